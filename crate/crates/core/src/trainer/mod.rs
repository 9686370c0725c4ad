//! Collect/update loops for MA-POCA, COMA over absorbing slots, and
//! independent PPO.

mod batch;
mod critics;
mod metrics;
mod rollout;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{CriticConfig, CriticError, SlotLayout};
use crate::envs::{AbsorbingWrapper, EnvError, GroupEnv};
use crate::policy::{log_probs_and_entropy, policy_loss, standardize, PolicyError};
use crate::scalar::Real;
use crate::tensor::{Adam, Graph, TensorError};

pub use batch::{build_group_batch, build_independent_batch, BaselineTarget, PolicyTarget, UpdateBatch, ValueTarget};
pub use critics::{BaselineInput, Critic, ValueInput};
pub use metrics::{
    final_window_reward, read_metrics, reward_between, steps_to_threshold, write_metrics, MetricsRow, METRICS_HEADER,
};
pub use rollout::{Actors, AgentObs, Collector, EpisodeStats, GroupStep, GroupTrajectory, Rollout, StateRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {what} at update {update}")]
    NonFinite { update: usize, what: String },
    #[error("{0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mapoca,
    Coma,
    Ppo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mapoca => "mapoca",
            Algorithm::Coma => "coma",
            Algorithm::Ppo => "ppo",
        }
    }

    pub fn uses_attention(self) -> bool {
        self == Algorithm::Mapoca
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mapoca" | "ma-poca" => Ok(Algorithm::Mapoca),
            "coma" => Ok(Algorithm::Coma),
            "ppo" => Ok(Algorithm::Ppo),
            _ => Err(format!("unknown algorithm {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub minibatch: usize,
    /// Agent-steps collected per update.
    pub buffer: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub embedding: usize,
    pub heads: usize,
    pub normalize_advantages: bool,
}

impl Hyperparameters {
    /// Dungeon Run, Baton Relay and anything else without its own column.
    pub fn general() -> Self {
        Hyperparameters {
            minibatch: 1024,
            buffer: 10240,
            epochs: 3,
            learning_rate: 3e-4,
            beta: 0.01,
            epsilon: 0.2,
            lambda: 0.95,
            gamma: 0.99,
            hidden_units: 256,
            hidden_layers: 2,
            embedding: 256,
            heads: 4,
            normalize_advantages: true,
        }
    }

    pub fn simple_spread() -> Self {
        Hyperparameters {
            minibatch: 512,
            buffer: 5120,
            hidden_units: 128,
            embedding: 128,
            ..Self::general()
        }
    }
}

/// Everything the trainer needs besides the environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSetup {
    pub algorithm: Algorithm,
    pub hyper: Hyperparameters,
    pub seed: u64,
    /// Environment steps (joint actions) before training stops.
    pub max_steps: u64,
    /// Absorbing slots for COMA; the environment's maximum when unset.
    pub n_max: Option<usize>,
}

pub struct Trainer<F: Real> {
    setup: TrainSetup,
    rng: ChaCha8Rng,
    collector: Collector<Box<dyn GroupEnv>>,
    actors: Actors<F>,
    actor_opts: Vec<Adam<F>>,
    critic: Critic<F>,
    env_steps: u64,
    episodes: u64,
    updates: usize,
    last_episode: Option<(f64, f64)>,
}

impl<F: Real> Trainer<F> {
    pub fn new(setup: TrainSetup, env: Box<dyn GroupEnv>) -> Result<Self, TrainError> {
        let h = setup.hyper;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        let kinds = env.kinds();
        let first = *kinds
            .first()
            .ok_or_else(|| TrainError::Protocol("environment declares no agent kinds".into()))?;
        let env: Box<dyn GroupEnv> = match setup.algorithm {
            Algorithm::Coma => {
                let n_max = setup.n_max.unwrap_or_else(|| env.max_agents());
                Box::new(AbsorbingWrapper::new(env, n_max)?)
            }
            _ => env,
        };
        let actors = Actors::new(&kinds, h.hidden_units, h.hidden_layers, &mut rng);
        let critic = match setup.algorithm {
            Algorithm::Mapoca => Critic::attention(
                &kinds,
                CriticConfig {
                    embedding: h.embedding,
                    heads: h.heads,
                    hidden: h.hidden_units,
                    hidden_layers: h.hidden_layers,
                },
                h.learning_rate,
                &mut rng,
            )?,
            Algorithm::Coma => {
                if kinds.iter().any(|k| k.action.n != first.action.n) {
                    return Err(TrainError::Protocol("absorbing slots need one action count".into()));
                }
                let layout = SlotLayout {
                    n_max: env.max_agents(),
                    obs_dim: first.observation.dim,
                    n_actions: first.action.n,
                };
                Critic::absorbing(layout, h.hidden_units, h.hidden_layers, h.learning_rate, &mut rng)
            }
            Algorithm::Ppo => {
                if kinds.iter().any(|k| k.observation.dim != first.observation.dim) {
                    return Err(TrainError::Protocol("shared agent critic needs one observation width".into()));
                }
                Critic::independent(first.observation.dim, h.hidden_units, h.hidden_layers, h.learning_rate, &mut rng)
            }
        };
        let actor_opts = actors
            .nets
            .iter()
            .map(|n| Adam::new(n.store(), F::from_f(h.learning_rate)))
            .collect();
        Ok(Trainer {
            setup,
            rng,
            collector: Collector::new(env),
            actors,
            actor_opts,
            critic,
            env_steps: 0,
            episodes: 0,
            updates: 0,
            last_episode: None,
        })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn actors(&self) -> &Actors<F> {
        &self.actors
    }

    pub fn critic(&self) -> &Critic<F> {
        &self.critic
    }

    /// Trains to `max_steps`, handing each metrics row to `on_row`.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>, TrainError> {
        let mut rows = Vec::new();
        while let Some(row) = self.update()? {
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    /// One collect/update cycle; `None` once the step budget is spent.
    pub fn update(&mut self) -> Result<Option<MetricsRow>, TrainError> {
        let remaining = self.setup.max_steps.saturating_sub(self.env_steps);
        if remaining == 0 {
            return Ok(None);
        }
        let h = self.setup.hyper;
        let rollout = self
            .collector
            .collect(&self.actors, &mut self.rng, h.buffer, remaining)?;
        self.env_steps += rollout.env_steps;
        self.episodes += rollout.episodes.len() as u64;
        self.updates += 1;

        let mut batch = match self.setup.algorithm {
            Algorithm::Ppo => build_independent_batch(&rollout.trajectories, &self.critic, h.gamma, h.lambda)?,
            _ => build_group_batch(&rollout.trajectories, &self.critic, h.gamma, h.lambda)?,
        };
        if h.normalize_advantages {
            let mut adv: Vec<f64> = batch.policy.iter().map(|p| p.advantage).collect();
            standardize(&mut adv);
            for (p, a) in batch.policy.iter_mut().zip(adv) {
                p.advantage = a;
            }
        }
        let losses = self.optimize(&rollout, &batch)?;

        let (reward, length) = if rollout.episodes.is_empty() {
            self.last_episode
                .or_else(|| {
                    self.collector
                        .partial_episode()
                        .map(|e| (e.reward, e.length as f64))
                })
                .unwrap_or((0.0, 0.0))
        } else {
            let n = rollout.episodes.len() as f64;
            let r = rollout.episodes.iter().map(|e| e.reward).sum::<f64>() / n;
            let l = rollout.episodes.iter().map(|e| e.length as f64).sum::<f64>() / n;
            self.last_episode = Some((r, l));
            (r, l)
        };
        let row = MetricsRow {
            step: self.env_steps,
            episodes: self.episodes,
            mean_episode_reward: reward,
            mean_episode_length: length,
            value_loss: losses.value,
            baseline_loss: losses.baseline,
            policy_loss: losses.policy,
            entropy: losses.entropy,
            mean_active_agents: rollout.agent_steps as f64 / rollout.env_steps as f64,
        };
        for (what, v) in row.named_values() {
            if !v.is_finite() {
                return Err(self.non_finite(what));
            }
        }
        Ok(Some(row))
    }

    fn non_finite(&self, what: &str) -> TrainError {
        TrainError::NonFinite {
            update: self.updates,
            what: what.to_string(),
        }
    }

    fn optimize(&mut self, rollout: &Rollout, batch: &UpdateBatch) -> Result<Losses, TrainError> {
        let h = self.setup.hyper;
        let n = batch.policy.len();
        let nv = batch.values.len();
        let chunks = n.div_ceil(h.minibatch.max(1)).max(1);
        let kinds: Vec<usize> = batch
            .policy
            .iter()
            .map(|p| {
                let kind = rollout.trajectories[p.traj].steps[p.step].state.agents[p.agent].kind;
                self.actors.index_of(kind)
            })
            .collect::<Result<_, _>>()?;
        let mut sums = Losses::default();
        let mut count = 0usize;
        for _ in 0..h.epochs {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut self.rng);
            let mut vperm: Vec<usize> = (0..nv).collect();
            vperm.shuffle(&mut self.rng);
            for c in 0..chunks {
                let pidx = &perm[(c * h.minibatch).min(n)..((c + 1) * h.minibatch).min(n)];
                let vidx = &vperm[c * nv / chunks..(c + 1) * nv / chunks];
                let (vl, bl) = self.critic_step(rollout, batch, vidx, pidx)?;
                let (pl, ent) = self.actor_step(rollout, batch, &kinds, pidx)?;
                for (what, v) in [("value loss", vl), ("baseline loss", bl), ("policy loss", pl), ("entropy", ent)] {
                    if !v.is_finite() {
                        return Err(self.non_finite(what));
                    }
                }
                if !self.critic.stores().iter().all(|s| s.all_finite())
                    || !self.actors.nets.iter().all(|a| a.store().all_finite())
                {
                    return Err(self.non_finite("parameters"));
                }
                sums.value += vl;
                sums.baseline += bl;
                sums.policy += pl;
                sums.entropy += ent;
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        Ok(Losses {
            value: sums.value / c,
            baseline: sums.baseline / c,
            policy: sums.policy / c,
            entropy: sums.entropy / c,
        })
    }

    fn critic_step(
        &mut self,
        rollout: &Rollout,
        batch: &UpdateBatch,
        vidx: &[usize],
        pidx: &[usize],
    ) -> Result<(f64, f64), TrainError> {
        let trajs = &rollout.trajectories;
        let values: Vec<_> = vidx
            .iter()
            .map(|&i| {
                let v = &batch.values[i];
                let state = &trajs[v.traj].steps[v.step].state;
                let input = match v.agent {
                    Some(j) => ValueInput::Agent(&state.agents[j].obs),
                    None => ValueInput::Group(state),
                };
                (input, v.target, v.old)
            })
            .collect();
        let baselines: Vec<_> = if self.critic.has_baseline() {
            pidx.iter()
                .map(|&i| {
                    let b = &batch.baselines[i];
                    ((&trajs[b.traj].steps[b.step], b.agent), b.target, b.old)
                })
                .collect()
        } else {
            Vec::new()
        };
        self.critic.update(&values, &baselines, self.setup.hyper.epsilon)
    }

    fn actor_step(
        &mut self,
        rollout: &Rollout,
        batch: &UpdateBatch,
        kinds: &[usize],
        pidx: &[usize],
    ) -> Result<(f64, f64), TrainError> {
        let h = self.setup.hyper;
        let total = pidx.len() as f64;
        let (mut loss_sum, mut ent_sum) = (0.0, 0.0);
        for k in 0..self.actors.nets.len() {
            let members: Vec<&PolicyTarget> = pidx
                .iter()
                .filter(|&&i| kinds[i] == k)
                .map(|&i| &batch.policy[i])
                .collect();
            if members.is_empty() {
                continue;
            }
            let obs: Vec<&[f64]> = members
                .iter()
                .map(|p| rollout.trajectories[p.traj].steps[p.step].state.agents[p.agent].obs.as_slice())
                .collect();
            let actions: Vec<usize> = members.iter().map(|p| p.action).collect();
            let old: Vec<F> = members.iter().map(|p| F::from_f(p.old_log_prob)).collect();
            let adv: Vec<F> = members.iter().map(|p| F::from_f(p.advantage)).collect();
            let share = members.len() as f64 / total;

            let mut g = Graph::new();
            let net = &mut self.actors.nets[k];
            let logits = net.logits(&mut g, &obs)?;
            let (lp, ent) = log_probs_and_entropy(&mut g, logits, &actions)?;
            let loss = policy_loss(&mut g, lp, &old, &adv, ent, F::from_f(h.epsilon), F::from_f(h.beta))?;
            let weighted = g.scale(loss, F::from_f(share));
            g.backward(weighted)?;
            net.store_mut().zero_grads();
            g.accumulate_param_grads(net.store_mut());
            self.actor_opts[k].step(net.store_mut());

            loss_sum += g.value(weighted).as_slice()[0].to_f();
            let e = g.value(ent).as_slice();
            ent_sum += e.iter().map(|v| v.to_f()).sum::<f64>() / total;
        }
        Ok((loss_sum, ent_sum))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Losses {
    value: f64,
    baseline: f64,
    policy: f64,
    entropy: f64,
}

/// Builds a trainer for `setup` and runs it to completion.
pub fn train(setup: TrainSetup, env: Box<dyn GroupEnv>) -> Result<Vec<MetricsRow>, TrainError> {
    Trainer::<f64>::new(setup, env)?.run(|_| ())
}

pub fn train_mapoca(setup: TrainSetup, env: Box<dyn GroupEnv>) -> Result<Vec<MetricsRow>, TrainError> {
    train(TrainSetup { algorithm: Algorithm::Mapoca, ..setup }, env)
}

pub fn train_coma(setup: TrainSetup, env: Box<dyn GroupEnv>) -> Result<Vec<MetricsRow>, TrainError> {
    train(TrainSetup { algorithm: Algorithm::Coma, ..setup }, env)
}

pub fn train_ppo(setup: TrainSetup, env: Box<dyn GroupEnv>) -> Result<Vec<MetricsRow>, TrainError> {
    train(TrainSetup { algorithm: Algorithm::Ppo, ..setup }, env)
}
