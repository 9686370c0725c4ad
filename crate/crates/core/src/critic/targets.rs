use crate::critic::CriticError;
use crate::scalar::Real;

/// TD(λ) regression targets for one trajectory segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTargets<F> {
    pub targets: Vec<F>,
    pub gamma: F,
    pub lambda: F,
}

/// λ-returns by the backward recursion
/// `y_t = r_{t+1} + γ[(1-λ)V(s_{t+1}) + λ y_{t+1}]`.
///
/// `rewards[t]` follows the joint action at `t` and `bootstrap_values[t]` is
/// the value of the state reached by it. The last state's value is dropped
/// when the segment ends the episode (`done`), so a group with no agents
/// left is never evaluated.
pub fn compute_lambda_targets<F: Real>(
    rewards: &[F],
    bootstrap_values: &[F],
    done: bool,
    gamma: F,
    lambda: F,
) -> Result<LambdaTargets<F>, CriticError> {
    if rewards.len() != bootstrap_values.len() {
        return Err(CriticError::LengthMismatch {
            what: "rewards/bootstrap values",
            left: rewards.len(),
            right: bootstrap_values.len(),
        });
    }
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    let one = F::one();
    let mut targets = vec![F::zero(); rewards.len()];
    let mut next: Option<F> = None;
    for t in (0..rewards.len()).rev() {
        let v = bootstrap_values[t];
        targets[t] = match next {
            None => {
                let tail = if done { F::zero() } else { v };
                rewards[t] + gamma * tail
            }
            Some(y_next) => rewards[t] + gamma * ((one - lambda) * v + lambda * y_next),
        };
        next = Some(targets[t]);
    }
    Ok(LambdaTargets {
        targets,
        gamma,
        lambda,
    })
}

/// Generalized advantage estimates and the matching return targets for a
/// single agent's own trajectory.
///
/// `values[t]` estimates the agent's state at `t`; `bootstrap` is the value
/// after the last step and is ignored when `done`.
pub fn gae<F: Real>(
    rewards: &[F],
    values: &[F],
    bootstrap: F,
    done: bool,
    gamma: F,
    lambda: F,
) -> Result<(Vec<F>, Vec<F>), CriticError> {
    if rewards.len() != values.len() {
        return Err(CriticError::LengthMismatch {
            what: "rewards/values",
            left: rewards.len(),
            right: values.len(),
        });
    }
    check_unit("gamma", gamma)?;
    check_unit("lambda", lambda)?;
    let n = rewards.len();
    let mut adv = vec![F::zero(); n];
    let mut running = F::zero();
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            values[t + 1]
        } else if done {
            F::zero()
        } else {
            bootstrap
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, returns))
}

/// `Adv_j = y − b_j` for every agent active at one timestep.
pub fn advantages<F: Real>(target: F, baselines: &[F]) -> Vec<F> {
    baselines.iter().map(|&b| target - b).collect()
}

fn check_unit<F: Real>(name: &'static str, x: F) -> Result<(), CriticError> {
    if x >= F::zero() && x <= F::one() {
        Ok(())
    } else {
        Err(CriticError::OutOfRange {
            name,
            value: x.to_f(),
        })
    }
}
