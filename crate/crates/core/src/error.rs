use thiserror::Error;

use crate::game::Violation;

pub type Result<T> = std::result::Result<T, MieError>;

#[derive(Debug, Error)]
pub enum MieError {
    /// Out-of-range index, malformed argument or an operation the scenario does not support.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("game failed validation ({} violation(s)): {}", .0.len(), describe_violations(.0))]
    InvalidGame(Vec<Violation>),

    #[error("numerical error{}: {message}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    Numerical { message: String, index: Option<usize> },

    /// Observation carried zero likelihood under every hypothesis.
    #[error("inconsistent observation: {0}")]
    Inconsistent(String),

    #[error("agent {agent}: {source}")]
    Agent {
        agent: usize,
        #[source]
        source: Box<MieError>,
    },

    #[error("tick {tick}: {source}")]
    Tick {
        tick: u64,
        #[source]
        source: Box<MieError>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("log error: {0}")]
    Log(String),

    #[error("config hash mismatch: log has {expected}, scenario/config gives {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MieError {
    pub fn usage(msg: impl Into<String>) -> Self {
        MieError::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>, index: Option<usize>) -> Self {
        MieError::Numerical {
            message: msg.into(),
            index,
        }
    }

    pub fn for_agent(self, agent: usize) -> Self {
        MieError::Agent {
            agent,
            source: Box::new(self),
        }
    }

    pub fn at_tick(self, tick: u64) -> Self {
        MieError::Tick {
            tick,
            source: Box::new(self),
        }
    }

    /// The underlying error with agent and tick context stripped.
    pub fn root(&self) -> &MieError {
        match self {
            MieError::Agent { source, .. } | MieError::Tick { source, .. } => source.root(),
            e => e,
        }
    }
}

fn describe_violations(v: &[Violation]) -> String {
    let shown: Vec<String> = v.iter().take(5).map(|x| x.to_string()).collect();
    let mut s = shown.join("; ");
    if v.len() > 5 {
        s.push_str(&format!("; ... and {} more", v.len() - 5));
    }
    s
}
