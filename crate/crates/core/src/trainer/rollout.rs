//! Experience collection over episodes whose population changes.

use std::collections::BTreeMap;

use rand::Rng;

use crate::envs::{GroupEnv, PaddedView};
use crate::policy::{ActionRecord, ActorNet};
use crate::scalar::Real;
use crate::spaces::{AgentId, AgentKind};
use crate::trainer::TrainError;

/// One active agent's view at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObs {
    pub id: AgentId,
    pub kind: AgentKind,
    pub obs: Vec<f64>,
}

/// Joint observation of the active agents, ordered by id, plus the padded
/// slot view when the environment is wrapped for absorbing states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    pub agents: Vec<AgentObs>,
    pub padded: Option<PaddedView>,
}

impl StateRecord {
    fn capture<E: GroupEnv + ?Sized>(
        env: &E,
        observations: &BTreeMap<AgentId, Vec<f64>>,
    ) -> Result<Self, TrainError> {
        let agents = env
            .active()
            .into_iter()
            .filter_map(|h| {
                observations.get(&h.id).map(|o| AgentObs {
                    id: h.id,
                    kind: h.kind,
                    obs: o.clone(),
                })
            })
            .collect::<Vec<_>>();
        if agents.len() != observations.len() {
            return Err(TrainError::Protocol(
                "observations do not match the active agents".into(),
            ));
        }
        Ok(StateRecord {
            agents,
            padded: env.padded_view(),
        })
    }

    pub fn position(&self, id: AgentId) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }
}

/// A joint action and what followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStep {
    pub state: StateRecord,
    /// Aligned with `state.agents`.
    pub actions: Vec<ActionRecord<f64>>,
    pub reward: f64,
    /// Agents removed by this step.
    pub terminated: Vec<AgentId>,
}

/// Consecutive steps of one episode. The group reward keeps flowing after
/// individual agents leave, until the episode ends.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTrajectory {
    pub steps: Vec<GroupStep>,
    /// The episode reached a terminal state after the last step.
    pub terminal: bool,
    /// State after the last step, to bootstrap from when not terminal.
    pub final_state: Option<StateRecord>,
}

impl GroupTrajectory {
    pub fn agent_steps(&self) -> usize {
        self.steps.iter().map(|s| s.state.agents.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub reward: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectories: Vec<GroupTrajectory>,
    pub env_steps: u64,
    pub agent_steps: usize,
    /// Episodes that finished during this collection.
    pub episodes: Vec<EpisodeStats>,
}

/// One actor per agent kind.
#[derive(Debug, Clone)]
pub struct Actors<F: Real> {
    pub nets: Vec<ActorNet<F>>,
}

impl<F: Real> Actors<F> {
    pub fn new<R: Rng + ?Sized>(kinds: &[AgentKind], hidden: usize, layers: usize, rng: &mut R) -> Self {
        let mut nets: Vec<ActorNet<F>> = Vec::new();
        for &k in kinds {
            if !nets.iter().any(|n| n.kind == k) {
                nets.push(ActorNet::new(k, hidden, layers, rng));
            }
        }
        Actors { nets }
    }

    pub fn index_of(&self, kind: AgentKind) -> Result<usize, TrainError> {
        self.nets
            .iter()
            .position(|n| n.kind == kind)
            .ok_or_else(|| TrainError::Protocol(format!("no actor for {kind:?}")))
    }

    /// Samples an action for every agent in `state`, one batch per kind.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &StateRecord,
        rng: &mut R,
    ) -> Result<Vec<ActionRecord<f64>>, TrainError> {
        let mut out = vec![None; state.agents.len()];
        for (k, net) in self.nets.iter().enumerate() {
            let members: Vec<usize> = (0..state.agents.len())
                .filter(|&i| state.agents[i].kind == net.kind)
                .collect();
            if members.is_empty() {
                continue;
            }
            let obs: Vec<&[f64]> = members.iter().map(|&i| state.agents[i].obs.as_slice()).collect();
            let records = self.nets[k].act_batch(&obs, rng)?;
            for (&i, r) in members.iter().zip(records) {
                out[i] = Some(ActionRecord {
                    action: r.action,
                    log_prob: r.log_prob.to_f(),
                    entropy: r.entropy.to_f(),
                });
            }
        }
        out.into_iter()
            .map(|r| r.ok_or_else(|| TrainError::Protocol("agent kind without an actor".into())))
            .collect()
    }
}

/// Drives one environment across updates; an unfinished episode carries
/// over into the next collection.
#[derive(Debug)]
pub struct Collector<E> {
    pub env: E,
    state: Option<StateRecord>,
    episode_reward: f64,
    episode_length: usize,
}

impl<E: GroupEnv> Collector<E> {
    pub fn new(env: E) -> Self {
        Collector {
            env,
            state: None,
            episode_reward: 0.0,
            episode_length: 0,
        }
    }

    /// Return and length of the episode in progress.
    pub fn partial_episode(&self) -> Option<EpisodeStats> {
        self.state.as_ref().map(|_| EpisodeStats {
            reward: self.episode_reward,
            length: self.episode_length,
        })
    }

    /// Steps until `agent_steps` agent-steps or `env_steps` joint steps
    /// have been gathered, whichever comes first.
    pub fn collect<F: Real, R: Rng + ?Sized>(
        &mut self,
        actors: &Actors<F>,
        rng: &mut R,
        agent_steps: usize,
        env_steps: u64,
    ) -> Result<Rollout, TrainError> {
        let mut rollout = Rollout {
            trajectories: Vec::new(),
            env_steps: 0,
            agent_steps: 0,
            episodes: Vec::new(),
        };
        let mut current = Vec::new();
        while rollout.agent_steps < agent_steps && rollout.env_steps < env_steps {
            let state = match self.state.take() {
                Some(s) => s,
                None => {
                    let r = self.env.reset(rng.gen());
                    self.episode_reward = 0.0;
                    self.episode_length = 0;
                    StateRecord::capture(&self.env, &r.observations)?
                }
            };
            let actions = actors.act(&state, rng)?;
            let joint: BTreeMap<AgentId, usize> = state
                .agents
                .iter()
                .zip(&actions)
                .map(|(a, r)| (a.id, r.action))
                .collect();
            let r = self.env.step(&joint)?;
            rollout.env_steps += 1;
            rollout.agent_steps += state.agents.len();
            self.episode_reward += r.group_reward;
            self.episode_length += 1;
            let next = StateRecord::capture(&self.env, &r.observations)?;
            current.push(GroupStep {
                state,
                actions,
                reward: r.group_reward,
                terminated: r.terminations.clone(),
            });
            if r.episode_done {
                rollout.episodes.push(EpisodeStats {
                    reward: self.episode_reward,
                    length: self.episode_length,
                });
                let terminal = !r.interrupted || next.agents.is_empty();
                rollout.trajectories.push(GroupTrajectory {
                    steps: std::mem::take(&mut current),
                    terminal,
                    final_state: (!terminal).then_some(next),
                });
            } else {
                self.state = Some(next);
            }
        }
        if !current.is_empty() {
            rollout.trajectories.push(GroupTrajectory {
                steps: current,
                terminal: false,
                final_state: self.state.clone(),
            });
        }
        Ok(rollout)
    }
}
