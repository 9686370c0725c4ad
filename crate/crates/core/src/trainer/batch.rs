//! Turning trajectories into regression targets and advantages.

use crate::critic::{compute_lambda_targets, gae};
use crate::scalar::Real;
use crate::spaces::AgentId;
use crate::trainer::critics::{Critic, ValueInput};
use crate::trainer::rollout::GroupTrajectory;
use crate::trainer::TrainError;

/// Value regression sample. `agent` is set for per-agent critics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueTarget {
    pub traj: usize,
    pub step: usize,
    pub agent: Option<usize>,
    pub target: f64,
    pub old: f64,
}

/// Baseline regression sample for agent `agent` at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineTarget {
    pub traj: usize,
    pub step: usize,
    pub agent: usize,
    pub target: f64,
    pub old: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyTarget {
    pub traj: usize,
    pub step: usize,
    pub agent: usize,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// Everything one update trains on. For the group critics `baselines[i]`
/// belongs to the same agent-step as `policy[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateBatch {
    pub values: Vec<ValueTarget>,
    pub baselines: Vec<BaselineTarget>,
    pub policy: Vec<PolicyTarget>,
}

/// Group critics: one λ-return per step from the group reward, shared by
/// the value sample and every agent that acted, dead or alive afterwards.
/// Advantages are the return minus each agent's baseline.
pub fn build_group_batch<F: Real>(
    trajectories: &[GroupTrajectory],
    critic: &Critic<F>,
    gamma: f64,
    lambda: f64,
) -> Result<UpdateBatch, TrainError> {
    let mut inputs = Vec::new();
    let mut queries = Vec::new();
    for traj in trajectories {
        inputs.extend(traj.steps.iter().map(|s| ValueInput::Group(&s.state)));
        if let Some(f) = &traj.final_state {
            inputs.push(ValueInput::Group(f));
        }
        for step in &traj.steps {
            queries.extend((0..step.state.agents.len()).map(|j| (step, j)));
        }
    }
    let values = critic.values(&inputs)?;
    let baselines = critic.baselines(&queries)?;

    let mut batch = UpdateBatch::default();
    let (mut vi, mut bi) = (0, 0);
    for (ti, traj) in trajectories.iter().enumerate() {
        let n = traj.steps.len();
        let v = &values[vi..vi + n];
        let tail = match &traj.final_state {
            Some(_) if !traj.terminal => values[vi + n],
            _ => 0.0,
        };
        vi += n + usize::from(traj.final_state.is_some());
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
        let mut bootstrap = v[1..].to_vec();
        bootstrap.push(tail);
        let y = compute_lambda_targets(&rewards, &bootstrap, traj.terminal, gamma, lambda)?.targets;
        for (t, step) in traj.steps.iter().enumerate() {
            batch.values.push(ValueTarget {
                traj: ti,
                step: t,
                agent: None,
                target: y[t],
                old: v[t],
            });
            for (j, record) in step.actions.iter().enumerate() {
                let b = baselines[bi];
                bi += 1;
                batch.baselines.push(BaselineTarget {
                    traj: ti,
                    step: t,
                    agent: j,
                    target: y[t],
                    old: b,
                });
                batch.policy.push(PolicyTarget {
                    traj: ti,
                    step: t,
                    agent: j,
                    action: record.action,
                    old_log_prob: record.log_prob,
                    advantage: y[t] - b,
                });
            }
        }
    }
    Ok(batch)
}

struct AgentTrace {
    id: AgentId,
    entries: Vec<(usize, usize)>,
}

/// Independent learners: every agent's own trajectory, cut when it leaves
/// the episode, with GAE against its own value estimate.
pub fn build_independent_batch<F: Real>(
    trajectories: &[GroupTrajectory],
    critic: &Critic<F>,
    gamma: f64,
    lambda: f64,
) -> Result<UpdateBatch, TrainError> {
    // (trace, bootstrap observation, done)
    let mut traces: Vec<(usize, AgentTrace, Option<&[f64]>, bool)> = Vec::new();
    for (ti, traj) in trajectories.iter().enumerate() {
        let mut by_agent: Vec<AgentTrace> = Vec::new();
        for (t, step) in traj.steps.iter().enumerate() {
            for (j, a) in step.state.agents.iter().enumerate() {
                match by_agent.iter_mut().find(|tr| tr.id == a.id) {
                    Some(tr) => tr.entries.push((t, j)),
                    None => by_agent.push(AgentTrace {
                        id: a.id,
                        entries: vec![(t, j)],
                    }),
                }
            }
        }
        let last = traj.steps.len().saturating_sub(1);
        for trace in by_agent {
            let (t_end, _) = *trace.entries.last().expect("non-empty trace");
            let left = traj.steps[t_end].terminated.contains(&trace.id);
            let ended = traj.terminal && t_end == last;
            let next_obs = if left || ended || t_end != last {
                None
            } else {
                traj.final_state.as_ref().and_then(|f| {
                    f.position(trace.id).map(|p| f.agents[p].obs.as_slice())
                })
            };
            let done = next_obs.is_none();
            traces.push((ti, trace, next_obs, done));
        }
    }

    let mut inputs = Vec::new();
    for (ti, trace, next, _) in &traces {
        let traj = &trajectories[*ti];
        inputs.extend(
            trace
                .entries
                .iter()
                .map(|&(t, j)| ValueInput::Agent(&traj.steps[t].state.agents[j].obs)),
        );
        if let Some(o) = next {
            inputs.push(ValueInput::Agent(o));
        }
    }
    let values = critic.values(&inputs)?;

    let mut batch = UpdateBatch::default();
    let mut vi = 0;
    for (ti, trace, next, done) in &traces {
        let traj = &trajectories[*ti];
        let n = trace.entries.len();
        let v = &values[vi..vi + n];
        let bootstrap = if next.is_some() { values[vi + n] } else { 0.0 };
        vi += n + usize::from(next.is_some());
        let rewards: Vec<f64> = trace.entries.iter().map(|&(t, _)| traj.steps[t].reward).collect();
        let (adv, returns) = gae(&rewards, v, bootstrap, *done, gamma, lambda)?;
        for (k, &(t, j)) in trace.entries.iter().enumerate() {
            let record = &traj.steps[t].actions[j];
            batch.values.push(ValueTarget {
                traj: *ti,
                step: t,
                agent: Some(j),
                target: returns[k],
                old: v[k],
            });
            batch.policy.push(PolicyTarget {
                traj: *ti,
                step: t,
                agent: j,
                action: record.action,
                old_log_prob: record.log_prob,
                advantage: adv[k],
            });
        }
    }
    Ok(batch)
}
