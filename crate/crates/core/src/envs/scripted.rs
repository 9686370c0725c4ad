//! An environment that replays a fixed schedule of rewards, deaths and
//! spawns regardless of the actions taken.

use std::collections::{BTreeMap, BTreeSet};

use crate::envs::{check_actions, AgentHandle, EnvError, GroupEnv, Reset, StepResult};
use crate::spaces::{ActionSpace, ActionSpaceId, AgentId, AgentKind, ObservationSpace, SpaceId};

/// What happens after the joint action at one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScriptStep {
    pub reward: f64,
    pub terminate: Vec<u32>,
    pub spawn: Vec<u32>,
    pub done: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ScriptedEnv {
    initial: Vec<u32>,
    steps: Vec<ScriptStep>,
    active: BTreeSet<AgentId>,
    max_agents: usize,
    t: usize,
    actions_seen: Vec<BTreeMap<AgentId, usize>>,
}

impl ScriptedEnv {
    pub const KIND: AgentKind = AgentKind {
        observation: ObservationSpace {
            id: SpaceId(0),
            dim: 2,
        },
        action: ActionSpace {
            id: ActionSpaceId(0),
            n: 2,
        },
    };

    pub fn new(initial: Vec<u32>, steps: Vec<ScriptStep>) -> Self {
        let spawned: usize = steps.iter().map(|s| s.spawn.len()).sum();
        ScriptedEnv {
            max_agents: initial.len() + spawned,
            initial,
            steps,
            active: BTreeSet::new(),
            t: 0,
            actions_seen: Vec::new(),
        }
    }

    /// Two agents; agent 0 leaves after the first step and the group earns
    /// +1 after the third.
    pub fn death_then_reward() -> Self {
        ScriptedEnv::new(
            vec![0, 1],
            vec![
                ScriptStep {
                    terminate: vec![0],
                    ..ScriptStep::default()
                },
                ScriptStep::default(),
                ScriptStep {
                    reward: 1.0,
                    done: true,
                    ..ScriptStep::default()
                },
            ],
        )
    }

    /// Actions received so far this episode.
    pub fn actions_seen(&self) -> &[BTreeMap<AgentId, usize>] {
        &self.actions_seen
    }

    fn observations(&self) -> BTreeMap<AgentId, Vec<f64>> {
        self.active
            .iter()
            .map(|&id| (id, vec![id.0 as f64 / 10.0, self.t as f64 / 10.0]))
            .collect()
    }
}

impl GroupEnv for ScriptedEnv {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn kinds(&self) -> Vec<AgentKind> {
        vec![Self::KIND]
    }

    fn max_agents(&self) -> usize {
        self.max_agents
    }

    fn reset(&mut self, _seed: u64) -> Reset {
        self.active = self.initial.iter().map(|&i| AgentId(i)).collect();
        self.t = 0;
        self.actions_seen.clear();
        Reset {
            agents: self.active(),
            observations: self.observations(),
        }
    }

    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError> {
        let step = self.steps.get(self.t).cloned().ok_or(EnvError::ScriptExhausted(self.t))?;
        check_actions(&self.active(), actions)?;
        self.actions_seen.push(actions.clone());
        let mut terminations = Vec::new();
        for &i in &step.terminate {
            if self.active.remove(&AgentId(i)) {
                terminations.push(AgentId(i));
            }
        }
        let mut spawns = Vec::new();
        for &i in &step.spawn {
            self.active.insert(AgentId(i));
            spawns.push(AgentHandle {
                id: AgentId(i),
                kind: Self::KIND,
            });
        }
        self.t += 1;
        let done = step.done || step.truncated || self.active.is_empty();
        Ok(StepResult {
            observations: self.observations(),
            group_reward: step.reward,
            terminations,
            spawns,
            episode_done: done,
            interrupted: step.truncated,
        })
    }

    fn active(&self) -> Vec<AgentHandle> {
        self.active
            .iter()
            .map(|&id| AgentHandle { id, kind: Self::KIND })
            .collect()
    }

    fn snapshot(&self) -> Vec<u64> {
        let mut s = vec![self.t as u64];
        s.extend(self.active.iter().map(|id| id.0 as u64));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn death_then_reward_schedule() {
        let mut env = ScriptedEnv::death_then_reward();
        let r = env.reset(0);
        assert_eq!(r.agents.len(), 2);
        let both = BTreeMap::from([(AgentId(0), 1), (AgentId(1), 0)]);
        let s = env.step(&both).unwrap();
        assert_eq!(s.terminations, vec![AgentId(0)]);
        let one = BTreeMap::from([(AgentId(1), 0)]);
        assert_eq!(env.step(&both), Err(EnvError::UnexpectedAction(AgentId(0))));
        assert_eq!(env.step(&one).unwrap().group_reward, 0.0);
        let last = env.step(&one).unwrap();
        assert_eq!(last.group_reward, 1.0);
        assert!(last.episode_done && !last.interrupted);
        assert_eq!(env.step(&one), Err(EnvError::ScriptExhausted(3)));
    }
}
