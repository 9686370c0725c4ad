//! Decentralized actors with categorical action heads and the clipped
//! policy-gradient loss.

use rand::Rng;
use thiserror::Error;

use crate::nets::Mlp;
use crate::scalar::Real;
use crate::spaces::AgentKind;
use crate::tensor::{softmax_rows, Graph, Matrix, NodeId, ParamStore, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("observation width {found} does not match actor width {expected}")]
    ObservationWidth { expected: usize, found: usize },
    #[error("{what}: lengths {left} and {right} differ")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A sampled action with its exact log-probability and the entropy of the
/// distribution it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionRecord<F> {
    pub action: usize,
    pub log_prob: F,
    pub entropy: F,
}

/// `π(a | o)`: an encoder layer, `hidden_layers` further ReLU layers and a
/// logit head. One instance serves every agent of its kind.
#[derive(Debug, Clone)]
pub struct ActorNet<F: Real> {
    pub kind: AgentKind,
    store: ParamStore<F>,
    mlp: Mlp,
}

impl<F: Real> ActorNet<F> {
    pub fn new<R: Rng + ?Sized>(kind: AgentKind, hidden: usize, hidden_layers: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "actor",
            kind.observation.dim,
            hidden,
            hidden_layers + 1,
            kind.action.n,
            rng,
        );
        ActorNet { kind, store, mlp }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn n_actions(&self) -> usize {
        self.kind.action.n
    }

    /// Logits for a batch of observations (`n × |A|`).
    pub fn logits(&self, g: &mut Graph<F>, observations: &[&[f64]]) -> Result<NodeId, PolicyError> {
        let d = self.kind.observation.dim;
        if let Some(bad) = observations.iter().find(|o| o.len() != d) {
            return Err(PolicyError::ObservationWidth {
                expected: d,
                found: bad.len(),
            });
        }
        let x = g.input(Matrix::from_f64_rows(observations)?);
        Ok(self.mlp.forward(g, &self.store, x)?)
    }

    /// Samples one action per observation.
    pub fn act_batch<R: Rng + ?Sized>(
        &self,
        observations: &[&[f64]],
        rng: &mut R,
    ) -> Result<Vec<ActionRecord<F>>, PolicyError> {
        if observations.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let logits = self.logits(&mut g, observations)?;
        let logits = g.value(logits);
        Ok((0..logits.rows()).map(|i| sample(logits.row(i), rng)).collect())
    }

    pub fn act<R: Rng + ?Sized>(&self, observation: &[f64], rng: &mut R) -> Result<ActionRecord<F>, PolicyError> {
        Ok(self.act_batch(&[observation], rng)?[0])
    }
}

/// Draws from `softmax(logits)` by inverting the cumulative distribution with
/// one uniform draw.
pub fn sample<F: Real, R: Rng + ?Sized>(logits: &[F], rng: &mut R) -> ActionRecord<F> {
    let probs = softmax_rows(&Matrix::from_vec(1, logits.len(), logits.to_vec()).expect("one row"));
    let probs = probs.as_slice();
    let u = F::from_f(rng.gen::<f64>());
    let mut acc = F::zero();
    let mut action = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            action = i;
            break;
        }
    }
    ActionRecord {
        action,
        log_prob: log_softmax(logits)[action],
        entropy: entropy(logits),
    }
}

fn log_softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn entropy<F: Real>(logits: &[F]) -> F {
    let lp = log_softmax(logits);
    -lp.iter()
        .map(|&l| {
            let p = l.exp();
            if p > F::zero() {
                p * l
            } else {
                F::zero()
            }
        })
        .sum::<F>()
}

/// Log-probabilities of the taken actions (`n×1`) and per-row entropies
/// (`n×1`) as graph nodes.
pub fn log_probs_and_entropy<F: Real>(
    g: &mut Graph<F>,
    logits: NodeId,
    actions: &[usize],
) -> Result<(NodeId, NodeId), PolicyError> {
    let lp = g.log_softmax(logits);
    let picked = g.pick_columns(lp, actions)?;
    let p = g.softmax(logits);
    let plogp = g.mul(p, lp)?;
    let neg = g.row_sum(plogp);
    let ent = g.scale(neg, -F::one());
    Ok((picked, ent))
}

/// `−mean(min(ρA, clamp(ρ, 1−ε, 1+ε)A)) − β·mean(entropy)` with
/// `ρ = exp(new − old)`.
pub fn policy_loss<F: Real>(
    g: &mut Graph<F>,
    log_probs_new: NodeId,
    log_probs_old: &[F],
    advantages: &[F],
    entropies: NodeId,
    epsilon: F,
    beta: F,
) -> Result<NodeId, PolicyError> {
    let n = g.value(log_probs_new).rows();
    for (what, len) in [("log_probs_old", log_probs_old.len()), ("advantages", advantages.len())] {
        if len != n {
            return Err(PolicyError::LengthMismatch { what, left: n, right: len });
        }
    }
    if g.value(entropies).rows() != n {
        return Err(PolicyError::LengthMismatch {
            what: "entropies",
            left: n,
            right: g.value(entropies).rows(),
        });
    }
    let one = F::one();
    let old = g.input(Matrix::column(log_probs_old));
    let adv = g.input(Matrix::column(advantages));
    let diff = g.sub(log_probs_new, old)?;
    let ratio = g.exp(diff);
    let clipped = g.clamp(
        ratio,
        Matrix::filled(n, 1, one - epsilon),
        Matrix::filled(n, 1, one + epsilon),
    )?;
    let unclipped_term = g.mul(ratio, adv)?;
    let clipped_term = g.mul(clipped, adv)?;
    let surrogate = g.minimum(unclipped_term, clipped_term)?;
    let surrogate = g.mean_all(surrogate)?;
    let mean_entropy = g.mean_all(entropies)?;
    let bonus = g.scale(mean_entropy, beta);
    let total = g.add(surrogate, bonus)?;
    Ok(g.scale(total, -one))
}

/// Scales advantages to zero mean and unit standard deviation. A constant
/// batch is only centered.
pub fn standardize<F: Real>(values: &mut [F]) {
    if values.is_empty() {
        return;
    }
    let n = F::from_usize(values.len()).unwrap();
    let mean = values.iter().copied().sum::<F>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let std = var.sqrt();
    let tiny = F::from_f(1e-8);
    for v in values.iter_mut() {
        *v = if std > tiny { (*v - mean) / std } else { *v - mean };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{ActionSpace, ActionSpaceId, ObservationSpace, SpaceId};
    use mapoca_oracles::{ppo_clip_term, softmax_entropy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const KIND: AgentKind = AgentKind {
        observation: ObservationSpace {
            id: SpaceId(0),
            dim: 3,
        },
        action: ActionSpace {
            id: ActionSpaceId(0),
            n: 4,
        },
    };

    fn loss_value(new: &[f64], old: &[f64], adv: &[f64], ent: &[f64], eps: f64, beta: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let lp = g.input(Matrix::column(new));
        let e = g.input(Matrix::column(ent));
        let l = policy_loss(&mut g, lp, old, adv, e, eps, beta).unwrap();
        g.value(l).as_slice()[0]
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.0f64; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!(entropy(&[1e6f64, 0.0, 0.0]).abs() < 1e-12);
        assert!((entropy(&[0.0f64, 1.0]) - 0.5822).abs() < 1e-4);
        assert!((entropy(&[0.0f64, 1.0]) - softmax_entropy(&[0.0, 1.0])).abs() < 1e-12);
    }

    #[test]
    fn uniform_and_argmax_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = sample(&[0.5f64; 5], &mut rng);
        assert!((rec.log_prob - (0.2f64).ln()).abs() < 1e-12);
        assert!((rec.entropy - 5f64.ln()).abs() < 1e-12);
        for _ in 0..100 {
            let rec = sample(&[0.0f64, 1e6, 0.0], &mut rng);
            assert_eq!(rec.action, 1);
            assert!(rec.log_prob.abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_frequencies_follow_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.0f64, 1.0, 2.0];
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[sample(&logits, &mut rng).action] += 1;
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (c, l) in counts.iter().zip(&logits) {
            assert!((*c as f64 / n as f64 - l.exp() / z).abs() < 0.01);
        }
    }

    #[test]
    fn shift_invariance() {
        let logits = [0.3f64, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 17.5).collect();
        let a = sample(&logits, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample(&shifted, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.action, b.action);
        assert!((a.log_prob - b.log_prob).abs() < 1e-9);
        assert!((a.entropy - b.entropy).abs() < 1e-9);
    }

    #[test]
    fn seeded_actor_is_reproducible() {
        let actor = ActorNet::<f64>::new(KIND, 8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let obs = [0.1, -0.4, 0.9];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| actor.act(&obs, &mut rng).unwrap().action).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert!(matches!(
            actor.act(&[0.0; 2], &mut ChaCha8Rng::seed_from_u64(0)),
            Err(PolicyError::ObservationWidth { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn ratio_one_gives_negative_mean_advantage() {
        let adv = [1.0, -2.0, 0.5];
        let lp = [-0.3, -1.0, -2.0];
        let l = loss_value(&lp, &lp, &adv, &[0.0; 3], 0.2, 0.0);
        assert!((l - (0.5 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn clipped_branch_selected() {
        let l = loss_value(&[2f64.ln()], &[0.0], &[1.0], &[0.0], 0.2, 0.0);
        assert!((l + 1.2).abs() < 1e-12);
    }

    #[test]
    fn five_tuple_hand_oracle() {
        // (new, old, A)
        let rows = [
            (-0.1, -0.2, 1.0),
            (-1.0, -0.5, 2.0),
            (-0.3, -0.9, -1.5),
            (-2.0, -1.0, -0.5),
            (-0.7, -0.7, 0.25),
        ];
        let new: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let old: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let adv: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let ent = [0.5, 1.0, 0.2, 0.3, 0.0];
        let l = loss_value(&new, &old, &adv, &ent, 0.2, 0.01);
        let surrogate: f64 = rows.iter().map(|r| ppo_clip_term(r.0, r.1, r.2, 0.2)).sum::<f64>() / 5.0;
        let want = -surrogate - 0.01 * 2.0 / 5.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn clipped_sample_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let lp = g.input(Matrix::column(&[2f64.ln()]));
        let e = g.input(Matrix::column(&[0.0]));
        let l = policy_loss(&mut g, lp, &[0.0], &[1.0], e, 0.2, 0.0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(lp).as_slice()[0], 0.0);
        // finite differences agree
        let h = 1e-5;
        let plus = loss_value(&[2f64.ln() + h], &[0.0], &[1.0], &[0.0], 0.2, 0.0);
        let minus = loss_value(&[2f64.ln() - h], &[0.0], &[1.0], &[0.0], 0.2, 0.0);
        assert_eq!((plus - minus) / (2.0 * h), 0.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut g = Graph::<f64>::new();
        let lp = g.input(Matrix::column(&[0.0, 0.0]));
        let e = g.input(Matrix::column(&[0.0, 0.0]));
        assert!(matches!(
            policy_loss(&mut g, lp, &[0.0], &[1.0, 1.0], e, 0.2, 0.0),
            Err(PolicyError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn graph_entropy_matches_scalar() {
        let actor = ActorNet::<f64>::new(KIND, 8, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let obs: [&[f64]; 2] = [&[0.1, 0.2, 0.3], &[-1.0, 0.0, 1.0]];
        let mut g = Graph::new();
        let logits = actor.logits(&mut g, &obs).unwrap();
        let (lp, ent) = log_probs_and_entropy(&mut g, logits, &[1, 3]).unwrap();
        let lv = g.value(logits).clone();
        for i in 0..2 {
            assert!((g.value(ent).as_slice()[i] - entropy(lv.row(i))).abs() < 1e-12);
            assert!((g.value(lp).as_slice()[i] - log_softmax(lv.row(i))[[1, 3][i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_moments() {
        let mut v = vec![1.0f64, 2.0, 3.0, 4.0];
        standardize(&mut v);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let mut c = vec![2.0f64; 3];
        standardize(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }
}
