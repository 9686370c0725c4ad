//! Observation and action space descriptors.

use serde::{Deserialize, Serialize};

/// Identifies an observation space. Agents with equal ids share encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpaceId(pub u32);

/// Identifies a discrete action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionSpaceId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationSpace {
    pub id: SpaceId,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpace {
    pub id: ActionSpaceId,
    pub n: usize,
}

/// Observation/action signature of one kind of agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentKind {
    pub observation: ObservationSpace,
    pub action: ActionSpace,
}

/// Appends the one-hot encoding of `action` among `n` choices.
pub fn push_one_hot(out: &mut Vec<f64>, action: usize, n: usize) {
    out.extend((0..n).map(|i| if i == action { 1.0 } else { 0.0 }));
}

/// Agent identifier, unique within an episode and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "agent{}", self.0)
    }
}
