//! Cooperative environments whose population changes within an episode.
//!
//! Agents appear in observations only while active. Every step returns a
//! single reward shared by the group; there are no per-agent rewards.

mod absorbing;
mod baton_relay;
mod dungeon_run;
mod grid;
mod script;
mod scripted;
mod simple_spread;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::spaces::{AgentId, AgentKind};

pub use absorbing::{AbsorbingWrapper, PaddedView};
pub use baton_relay::{BatonRelay, BatonRelayConfig, BatonRelayLayout};
pub use dungeon_run::{DungeonRun, DungeonRunConfig, DungeonRunLayout};
pub use grid::{Cell, Move};
pub use script::{parse_action_script, ScriptError};
pub use scripted::{ScriptStep, ScriptedEnv};
pub use simple_spread::{simple_spread_reward, SimpleSpread, SimpleSpreadConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("no action given for active {0}")]
    MissingAction(AgentId),
    #[error("action given for {0}, which is not active")]
    UnexpectedAction(AgentId),
    #[error("action {action} for {agent} outside 0..{n}")]
    ActionOutOfRange { agent: AgentId, action: usize, n: usize },
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("spawn would exceed the {n_max} absorbing slots")]
    SlotOverflow { n_max: usize },
    #[error("slot action list has {found} entries, expected {expected}")]
    SlotCount { expected: usize, found: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("scripted episode has no step {0}")]
    ScriptExhausted(usize),
}

/// An agent as seen by the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentHandle {
    pub id: AgentId,
    pub kind: AgentKind,
}

/// Initial population of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Reset {
    pub agents: Vec<AgentHandle>,
    pub observations: BTreeMap<AgentId, Vec<f64>>,
}

/// Outcome of one joint action.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Observations of agents still present after the step. When the
    /// episode ends these are the final observations.
    pub observations: BTreeMap<AgentId, Vec<f64>>,
    pub group_reward: f64,
    /// Agents removed by this step.
    pub terminations: Vec<AgentId>,
    pub spawns: Vec<AgentHandle>,
    pub episode_done: bool,
    /// The episode was cut by a time limit rather than reaching a terminal
    /// state, so the remaining value should be bootstrapped.
    pub interrupted: bool,
}

pub trait GroupEnv {
    fn name(&self) -> &'static str;

    /// Every kind of agent the environment may field.
    fn kinds(&self) -> Vec<AgentKind>;

    /// Upper bound on agents ever present in one episode.
    fn max_agents(&self) -> usize;

    fn reset(&mut self, seed: u64) -> Reset;

    /// `actions` must hold exactly the active agents.
    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError>;

    fn active(&self) -> Vec<AgentHandle>;

    /// Full internal state as words, for exact comparisons.
    fn snapshot(&self) -> Vec<u64>;

    /// Fixed-width view for absorbing-state critics; `None` unless wrapped.
    fn padded_view(&self) -> Option<PaddedView> {
        None
    }
}

impl<E: GroupEnv + ?Sized> GroupEnv for Box<E> {
    fn name(&self) -> &'static str {
        (**self).name()
    }
    fn kinds(&self) -> Vec<AgentKind> {
        (**self).kinds()
    }
    fn max_agents(&self) -> usize {
        (**self).max_agents()
    }
    fn reset(&mut self, seed: u64) -> Reset {
        (**self).reset(seed)
    }
    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError> {
        (**self).step(actions)
    }
    fn active(&self) -> Vec<AgentHandle> {
        (**self).active()
    }
    fn snapshot(&self) -> Vec<u64> {
        (**self).snapshot()
    }
    fn padded_view(&self) -> Option<PaddedView> {
        (**self).padded_view()
    }
}

/// Checks that `actions` covers exactly `active`, each within range.
pub fn check_actions(
    active: &[AgentHandle],
    actions: &BTreeMap<AgentId, usize>,
) -> Result<(), EnvError> {
    for h in active {
        match actions.get(&h.id) {
            None => return Err(EnvError::MissingAction(h.id)),
            Some(&a) if a >= h.kind.action.n => {
                return Err(EnvError::ActionOutOfRange {
                    agent: h.id,
                    action: a,
                    n: h.kind.action.n,
                })
            }
            _ => {}
        }
    }
    if let Some(extra) = actions.keys().find(|id| !active.iter().any(|h| h.id == **id)) {
        return Err(EnvError::UnexpectedAction(*extra));
    }
    Ok(())
}

/// Words describing an rng's exact position in its stream.
pub(crate) fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let pos = rng.get_word_pos();
    let mut out = vec![rng.get_stream(), pos as u64, (pos >> 64) as u64];
    out.extend(
        rng.get_seed()
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))),
    );
    out
}
