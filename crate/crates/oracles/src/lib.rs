//! Brute-force reference computations for the test suites.
//!
//! Nothing in here depends on `mapoca-core`. Every routine re-derives its
//! answer from first principles (explicit sums, central differences, plain
//! nested loops) so that it can be used to check the optimized code paths.

/// Forward-view TD(λ) targets, expanded term by term.
///
/// `next_values[t]` is the critic's estimate of the state reached after the
/// transition at `t`. The last entry is the bootstrap for the segment end and
/// is ignored (treated as zero) when `done` is set. On a segment of length
/// `L - t` the n-step returns for `n < L - t` are weighted by
/// `(1 - λ) λ^(n-1)` and the full-length return takes the remaining mass
/// `λ^(L-t-1)`.
pub fn td_lambda_forward(
    rewards: &[f64],
    next_values: &[f64],
    done: bool,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    assert_eq!(rewards.len(), next_values.len());
    let len = rewards.len();
    let value_after = |idx: usize| -> f64 {
        if idx == len - 1 && done {
            0.0
        } else {
            next_values[idx]
        }
    };
    let n_step = |t: usize, n: usize| -> f64 {
        let mut g = 0.0;
        for l in 1..=n {
            g += gamma.powi(l as i32 - 1) * rewards[t + l - 1];
        }
        g + gamma.powi(n as i32) * value_after(t + n - 1)
    };
    (0..len)
        .map(|t| {
            let horizon = len - t;
            let mut y = 0.0;
            for n in 1..horizon {
                y += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(t, n);
            }
            y + lambda.powi(horizon as i32 - 1) * n_step(t, horizon)
        })
        .collect()
}

/// GAE advantages by explicit sum of discounted TD residuals.
pub fn gae_forward(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    done: bool,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let len = rewards.len();
    let v_next = |t: usize| {
        if t + 1 < len {
            values[t + 1]
        } else if done {
            0.0
        } else {
            bootstrap
        }
    };
    (0..len)
        .map(|t| {
            (t..len)
                .map(|l| {
                    let delta = rewards[l] + gamma * v_next(l) - values[l];
                    (gamma * lambda).powi((l - t) as i32) * delta
                })
                .sum()
        })
        .collect()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor, the usual gradient-check metric.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Round-off level of a central difference of `f` with step `h`: gradients
/// smaller than this cannot be resolved, so relative errors below it are
/// meaningless.
pub fn central_difference_noise(f: f64, h: f64) -> f64 {
    f64::EPSILON * f.abs().max(1.0) / h
}

/// [`relative_error`] with the floor raised to `floor`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Single-head scaled dot-product attention on plain row vectors.
///
/// Returns `(weights, output)` where `weights[i][j]` is the softmax of
/// `q_i · k_j / sqrt(d)`.
pub fn dot_product_attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = queries[0].len() as f64;
    let weights: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect();
    let width = values[0].len();
    let output = weights
        .iter()
        .map(|w| {
            (0..width)
                .map(|c| w.iter().zip(values).map(|(wi, v)| wi * v[c]).sum())
                .collect()
        })
        .collect();
    (weights, output)
}

/// Layer normalization of one row with unit gain and zero shift.
pub fn layer_norm_row(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    row.iter().map(|x| (x - mean) / (var + eps).sqrt()).collect()
}

/// Shannon entropy (nats) of the softmax of `logits`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits
        .iter()
        .map(|l| {
            let p = (l - max).exp() / z;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// One PPO-clip surrogate term, `min(ρA, clamp(ρ, 1-ε, 1+ε)A)`.
pub fn ppo_clip_term(log_new: f64, log_old: f64, advantage: f64, eps: f64) -> f64 {
    let ratio = (log_new - log_old).exp();
    let clipped = if ratio < 1.0 - eps {
        1.0 - eps
    } else if ratio > 1.0 + eps {
        1.0 + eps
    } else {
        ratio
    };
    (ratio * advantage).min(clipped * advantage)
}

/// One clipped value-regression term, `max((v-y)^2, (clamp(v, old±ε)-y)^2)`.
pub fn clipped_value_term(pred: f64, old: f64, target: f64, eps: f64) -> f64 {
    let clipped = if pred < old - eps {
        old - eps
    } else if pred > old + eps {
        old + eps
    } else {
        pred
    };
    let a = (pred - target) * (pred - target);
    let b = (clipped - target) * (clipped - target);
    a.max(b)
}

/// Variance of the mean of `n` i.i.d. uniforms on `[lo, hi]`.
pub fn mean_of_uniforms_variance(lo: f64, hi: f64, n: usize) -> f64 {
    (hi - lo) * (hi - lo) / (12.0 * n as f64)
}

/// A hand-written multi-agent episode with no learning involved.
///
/// Used to compute returns by explicit enumeration.
#[derive(Debug, Clone)]
pub struct ScriptedEpisode {
    /// Agents acting at each step.
    pub active: Vec<Vec<u32>>,
    /// Group reward received after the joint action at each step.
    pub rewards: Vec<f64>,
}

impl ScriptedEpisode {
    /// The canonical posthumous scenario: agent 0 acts only at `t = 0`,
    /// agent 1 acts at every step, and the group reward `+1` follows the
    /// joint action at the last step.
    pub fn death_then_reward() -> Self {
        ScriptedEpisode {
            active: vec![vec![0, 1], vec![1], vec![1]],
            rewards: vec![0.0, 0.0, 1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Discounted group return from `t` to the end of the episode. This is
    /// what a group-level critic assigns regardless of who is still alive.
    pub fn group_return(&self, t: usize, gamma: f64) -> f64 {
        self.rewards[t..]
            .iter()
            .enumerate()
            .map(|(l, r)| gamma.powi(l as i32) * r)
            .sum()
    }

    /// Discounted return seen by `agent` alone: rewards stop once the agent
    /// is no longer in the active set.
    pub fn individual_return(&self, agent: u32, t: usize, gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for step in t..self.len() {
            if !self.active[step].contains(&agent) {
                break;
            }
            total += discount * self.rewards[step];
            discount *= gamma;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_sum_lambda_zero_is_one_step() {
        let y = td_lambda_forward(&[1.0, 2.0], &[0.5, 0.25], false, 0.9, 0.0);
        assert!((y[0] - (1.0 + 0.9 * 0.5)).abs() < 1e-15);
        assert!((y[1] - (2.0 + 0.9 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn forward_sum_lambda_one_is_monte_carlo() {
        let y = td_lambda_forward(&[1.0, 0.0, 2.0], &[9.0, 9.0, 9.0], true, 0.9, 1.0);
        assert!((y[0] - 2.62).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn scripted_returns() {
        let ep = ScriptedEpisode::death_then_reward();
        assert_eq!(ep.group_return(0, 1.0), 1.0);
        assert_eq!(ep.individual_return(0, 0, 1.0), 0.0);
        assert_eq!(ep.individual_return(1, 0, 1.0), 1.0);
    }
}
