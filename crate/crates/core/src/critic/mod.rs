//! Centralized critics: the attention value function over active agents,
//! the counterfactual baseline, their fully connected absorbing-state
//! counterparts, and the shared TD(λ) target math.

mod absorbing;
mod targets;

use rand::Rng;
use thiserror::Error;

use crate::attention::{AttentionError, EncoderBank, Entity, RsaBlock};
use crate::nets::Mlp;
use crate::scalar::Real;
use crate::spaces::{AgentId, AgentKind};
use crate::tensor::{segments_from_counts, Graph, Matrix, NodeId, ParamStore, TensorError};

pub use absorbing::{FcBaselineNet, FcValueNet, SlotLayout};
pub use targets::{advantages, compute_lambda_targets, gae, LambdaTargets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticError {
    #[error("critic queried with an empty group")]
    EmptyGroup,
    #[error("focus agent {0} also listed among the others")]
    FocusInOthers(AgentId),
    #[error("focus entity must be observation-only")]
    FocusHasAction,
    #[error("entity of agent {0} lacks an action")]
    MissingAction(AgentId),
    #[error("{what}: lengths {left} and {right} differ")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("slot input of width {found}, expected {expected}")]
    SlotWidth { expected: usize, found: usize },
    #[error("slot {slot} outside 0..{n_max}")]
    SlotIndex { slot: usize, n_max: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer sizes shared by the value and baseline networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticConfig {
    pub embedding: usize,
    pub heads: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

/// `V_φ(RSA(g_i(o_i)))` over whichever agents are active.
#[derive(Debug, Clone)]
pub struct ValueNet<F: Real> {
    store: ParamStore<F>,
    encoders: EncoderBank,
    rsa: RsaBlock,
    head: Mlp,
}

impl<F: Real> ValueNet<F> {
    pub fn new<R: Rng + ?Sized>(
        kinds: &[AgentKind],
        cfg: CriticConfig,
        rng: &mut R,
    ) -> Result<Self, CriticError> {
        let mut store = ParamStore::new();
        let mut encoders = EncoderBank::new(cfg.embedding);
        for kind in kinds {
            encoders.register_observation(&mut store, kind.observation, rng);
        }
        let rsa = RsaBlock::new(&mut store, "value.rsa", cfg.embedding, cfg.heads, rng)?;
        let head = Mlp::new(&mut store, "value.head", cfg.embedding, cfg.hidden, cfg.hidden_layers, 1, rng);
        Ok(ValueNet {
            store,
            encoders,
            rsa,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// One value per state (`S×1`); each state lists its active agents.
    pub fn forward(&self, g: &mut Graph<F>, states: &[Vec<Entity<'_>>]) -> Result<NodeId, CriticError> {
        let (flat, counts) = flatten(states.iter().map(|s| s.as_slice()))?;
        let x = self.encoders.encode(g, &self.store, &flat)?;
        let pooled = self.rsa.forward(g, &self.store, x, segments_from_counts(&counts))?.pooled;
        Ok(self.head.forward(g, &self.store, pooled)?)
    }

    pub fn evaluate(&self, states: &[Vec<Entity<'_>>]) -> Result<Vec<F>, CriticError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, states)?;
        Ok(g.value(out).as_slice().to_vec())
    }

    pub fn value_estimate(&self, active: &[Entity<'_>]) -> Result<F, CriticError> {
        Ok(self.evaluate(&[active.to_vec()])?[0])
    }
}

/// Input to the baseline for one focus agent: its observation alone plus the
/// observation-action pairs of every other active agent.
#[derive(Debug, Clone)]
pub struct BaselineQuery<'a> {
    pub focus: Entity<'a>,
    pub others: Vec<Entity<'a>>,
}

impl<'a> BaselineQuery<'a> {
    /// Checks that the focus agent is not among `others`, carries no action,
    /// and that every other entity does.
    pub fn new(
        focus_id: AgentId,
        focus: Entity<'a>,
        others: &[(AgentId, Entity<'a>)],
    ) -> Result<Self, CriticError> {
        if focus.action.is_some() {
            return Err(CriticError::FocusHasAction);
        }
        for (id, e) in others {
            if *id == focus_id {
                return Err(CriticError::FocusInOthers(focus_id));
            }
            if e.action.is_none() {
                return Err(CriticError::MissingAction(*id));
            }
        }
        Ok(BaselineQuery {
            focus,
            others: others.iter().map(|(_, e)| *e).collect(),
        })
    }

    fn entities(&self) -> Vec<Entity<'a>> {
        let mut v = Vec::with_capacity(self.others.len() + 1);
        v.push(self.focus);
        v.extend_from_slice(&self.others);
        v
    }
}

/// `Q_ψ(RSA(g_j(o_j), f_i(o_i, a_i)))`, with parameters disjoint from the
/// value network.
#[derive(Debug, Clone)]
pub struct BaselineNet<F: Real> {
    store: ParamStore<F>,
    encoders: EncoderBank,
    rsa: RsaBlock,
    head: Mlp,
}

impl<F: Real> BaselineNet<F> {
    pub fn new<R: Rng + ?Sized>(
        kinds: &[AgentKind],
        cfg: CriticConfig,
        rng: &mut R,
    ) -> Result<Self, CriticError> {
        let mut store = ParamStore::new();
        let mut encoders = EncoderBank::new(cfg.embedding);
        for kind in kinds {
            encoders.register_observation(&mut store, kind.observation, rng);
            encoders.register_observation_action(&mut store, kind.observation, kind.action, rng);
        }
        let rsa = RsaBlock::new(&mut store, "baseline.rsa", cfg.embedding, cfg.heads, rng)?;
        let head = Mlp::new(
            &mut store,
            "baseline.head",
            cfg.embedding,
            cfg.hidden,
            cfg.hidden_layers,
            1,
            rng,
        );
        Ok(BaselineNet {
            store,
            encoders,
            rsa,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn forward(&self, g: &mut Graph<F>, queries: &[BaselineQuery<'_>]) -> Result<NodeId, CriticError> {
        let sets: Vec<Vec<Entity<'_>>> = queries.iter().map(|q| q.entities()).collect();
        let (flat, counts) = flatten(sets.iter().map(|s| s.as_slice()))?;
        let x = self.encoders.encode(g, &self.store, &flat)?;
        let pooled = self.rsa.forward(g, &self.store, x, segments_from_counts(&counts))?.pooled;
        Ok(self.head.forward(g, &self.store, pooled)?)
    }

    pub fn evaluate(&self, queries: &[BaselineQuery<'_>]) -> Result<Vec<F>, CriticError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, queries)?;
        Ok(g.value(out).as_slice().to_vec())
    }

    pub fn baseline_estimate(
        &self,
        focus_id: AgentId,
        focus: Entity<'_>,
        others: &[(AgentId, Entity<'_>)],
    ) -> Result<F, CriticError> {
        let q = BaselineQuery::new(focus_id, focus, others)?;
        Ok(self.evaluate(&[q])?[0])
    }
}

fn flatten<'a, 'b>(
    sets: impl Iterator<Item = &'b [Entity<'a>]>,
) -> Result<(Vec<Entity<'a>>, Vec<usize>), CriticError>
where
    'a: 'b,
{
    let mut flat = Vec::new();
    let mut counts = Vec::new();
    for s in sets {
        if s.is_empty() {
            return Err(CriticError::EmptyGroup);
        }
        flat.extend_from_slice(s);
        counts.push(s.len());
    }
    if counts.is_empty() {
        return Err(CriticError::EmptyGroup);
    }
    Ok((flat, counts))
}

/// `mean(max((p − y)², (clamp(p, old ± ε) − y)²))` over a column of
/// predictions.
pub fn clipped_regression_loss<F: Real>(
    g: &mut Graph<F>,
    predictions: NodeId,
    old: &[F],
    targets: &[F],
    epsilon: F,
) -> Result<NodeId, CriticError> {
    let n = g.value(predictions).rows();
    if old.len() != n || targets.len() != n {
        return Err(CriticError::LengthMismatch {
            what: "predictions/old/targets",
            left: n,
            right: old.len().min(targets.len()),
        });
    }
    let lo = Matrix::column(&old.iter().map(|&o| o - epsilon).collect::<Vec<_>>());
    let hi = Matrix::column(&old.iter().map(|&o| o + epsilon).collect::<Vec<_>>());
    let y = g.input(Matrix::column(targets));
    let clipped = g.clamp(predictions, lo, hi)?;
    let du = g.sub(predictions, y)?;
    let dc = g.sub(clipped, y)?;
    let su = g.square(du);
    let sc = g.square(dc);
    let worst = g.maximum(su, sc)?;
    Ok(g.mean_all(worst)?)
}

/// One value regression sample.
#[derive(Debug, Clone)]
pub struct ValueSample<'a, F> {
    pub entities: Vec<Entity<'a>>,
    pub target: F,
    pub old: F,
}

/// One baseline regression sample.
#[derive(Debug, Clone)]
pub struct BaselineSample<'a, F> {
    pub query: BaselineQuery<'a>,
    pub target: F,
    pub old: F,
}

/// Clipped regression losses of both networks on one minibatch. Gradients
/// are added into each network's own parameter store.
pub fn critic_losses<F: Real>(
    value_net: &mut ValueNet<F>,
    baseline_net: &mut BaselineNet<F>,
    values: &[ValueSample<'_, F>],
    baselines: &[BaselineSample<'_, F>],
    epsilon: F,
) -> Result<(F, F), CriticError> {
    let value_loss = {
        let mut g = Graph::new();
        let states: Vec<Vec<Entity<'_>>> = values.iter().map(|s| s.entities.clone()).collect();
        let pred = value_net.forward(&mut g, &states)?;
        let old: Vec<F> = values.iter().map(|s| s.old).collect();
        let y: Vec<F> = values.iter().map(|s| s.target).collect();
        let loss = clipped_regression_loss(&mut g, pred, &old, &y, epsilon)?;
        g.backward(loss)?;
        g.accumulate_param_grads(value_net.store_mut());
        g.value(loss).as_slice()[0]
    };
    let baseline_loss = {
        let mut g = Graph::new();
        let queries: Vec<BaselineQuery<'_>> = baselines.iter().map(|s| s.query.clone()).collect();
        let pred = baseline_net.forward(&mut g, &queries)?;
        let old: Vec<F> = baselines.iter().map(|s| s.old).collect();
        let y: Vec<F> = baselines.iter().map(|s| s.target).collect();
        let loss = clipped_regression_loss(&mut g, pred, &old, &y, epsilon)?;
        g.backward(loss)?;
        g.accumulate_param_grads(baseline_net.store_mut());
        g.value(loss).as_slice()[0]
    };
    Ok((value_loss, baseline_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{ActionSpace, ActionSpaceId, ObservationSpace, SpaceId};
    use mapoca_oracles::clipped_value_term;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const KIND: AgentKind = AgentKind {
        observation: ObservationSpace {
            id: SpaceId(0),
            dim: 4,
        },
        action: ActionSpace {
            id: ActionSpaceId(0),
            n: 3,
        },
    };

    fn cfg() -> CriticConfig {
        CriticConfig {
            embedding: 8,
            heads: 2,
            hidden: 6,
            hidden_layers: 2,
        }
    }

    fn random_obs(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn obs_entities(obs: &[Vec<f64>]) -> Vec<Entity<'_>> {
        obs.iter().map(|o| Entity::observation(SpaceId(0), o)).collect()
    }

    #[test]
    fn value_is_deterministic_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ValueNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let obs = random_obs(&mut rng, 3);
        let a = net.value_estimate(&obs_entities(&obs)).unwrap();
        let b = net.value_estimate(&obs_entities(&obs)).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
        // dropping an agent needs no reshaping
        assert!(net.value_estimate(&obs_entities(&obs[..2])).unwrap().is_finite());
    }

    #[test]
    fn empty_group_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ValueNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        assert_eq!(net.value_estimate(&[]), Err(CriticError::EmptyGroup));
    }

    #[test]
    fn batched_values_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ValueNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let sets: Vec<Vec<Vec<f64>>> = (1..=4).map(|k| random_obs(&mut rng, k)).collect();
        let states: Vec<Vec<Entity<'_>>> = sets.iter().map(|s| obs_entities(s)).collect();
        let batched = net.evaluate(&states).unwrap();
        for (s, b) in states.iter().zip(&batched) {
            assert!((net.value_estimate(s).unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn value_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ValueNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let obs = random_obs(&mut rng, 4);
        let base = net.value_estimate(&obs_entities(&obs)).unwrap();
        let mut rev = obs.clone();
        rev.reverse();
        assert!((net.value_estimate(&obs_entities(&rev)).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn baseline_alone_and_swapped_focus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = BaselineNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let obs = random_obs(&mut rng, 2);
        let alone = net
            .baseline_estimate(AgentId(0), Entity::observation(SpaceId(0), &obs[0]), &[])
            .unwrap();
        assert!(alone.is_finite());

        let with = |j: usize, i: usize| {
            net.baseline_estimate(
                AgentId(j as u32),
                Entity::observation(SpaceId(0), &obs[j]),
                &[(AgentId(i as u32), Entity::with_action(SpaceId(0), &obs[i], ActionSpaceId(0), 1))],
            )
            .unwrap()
        };
        assert!((with(0, 1) - with(1, 0)).abs() > 1e-6);
    }

    #[test]
    fn baseline_rejects_focus_among_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = BaselineNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let o = [0.1, 0.2, 0.3, 0.4];
        let err = net
            .baseline_estimate(
                AgentId(7),
                Entity::observation(SpaceId(0), &o),
                &[(AgentId(7), Entity::with_action(SpaceId(0), &o, ActionSpaceId(0), 0))],
            )
            .unwrap_err();
        assert_eq!(err, CriticError::FocusInOthers(AgentId(7)));
    }

    #[test]
    fn networks_share_no_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = ValueNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let b = BaselineNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        assert_ne!(v.store().registry_id(), b.store().registry_id());
        // a graph built from the value net leaves the baseline store untouched
        let obs = random_obs(&mut rng, 2);
        let mut g = Graph::new();
        let out = v.forward(&mut g, &[obs_entities(&obs)]).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        let mut b2 = b.clone();
        g.accumulate_param_grads(b2.store_mut());
        assert!(b2.store().flatten_grads().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clipped_loss_hand_oracle() {
        // (pred, old, target)
        let rows = [(1.0, 1.0, 1.0), (1.5, 1.0, 2.0), (0.5, 1.0, 2.0), (0.0, 0.1, -1.0)];
        let eps = 0.2;
        let mut g = Graph::<f64>::new();
        let p = g.input(Matrix::column(&rows.iter().map(|r| r.0).collect::<Vec<_>>()));
        let old: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let loss = clipped_regression_loss(&mut g, p, &old, &y, eps).unwrap();
        // row by row: 0; max(0.25, 0.64); max(2.25, 1.44); max(1, 1)
        let want = (0.0 + 0.64 + 2.25 + 1.0) / 4.0;
        assert!((g.value(loss).as_slice()[0] - want).abs() < 1e-12);
        let oracle: f64 = rows.iter().map(|r| clipped_value_term(r.0, r.1, r.2, eps)).sum::<f64>() / 4.0;
        assert!((want - oracle).abs() < 1e-12);
    }

    #[test]
    fn clipped_branch_blocks_gradient() {
        // prediction already beyond old + ε toward the target: the clipped
        // term dominates and is constant in p
        let mut g = Graph::<f64>::new();
        let p = g.input(Matrix::column(&[1.5]));
        let loss = clipped_regression_loss(&mut g, p, &[1.0], &[2.0], 0.2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).as_slice()[0], 0.0);

        let mut g = Graph::<f64>::new();
        let p = g.input(Matrix::column(&[2.0]));
        let loss = clipped_regression_loss(&mut g, p, &[2.0], &[2.0], 0.2).unwrap();
        assert_eq!(g.value(loss).as_slice()[0], 0.0);
    }

    #[test]
    fn critic_losses_fill_both_stores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut v = ValueNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let mut b = BaselineNet::<f64>::new(&[KIND], cfg(), &mut rng).unwrap();
        let obs = random_obs(&mut rng, 2);
        let vs = [ValueSample {
            entities: obs_entities(&obs),
            target: 1.0,
            old: 0.0,
        }];
        let q = BaselineQuery::new(
            AgentId(0),
            Entity::observation(SpaceId(0), &obs[0]),
            &[(AgentId(1), Entity::with_action(SpaceId(0), &obs[1], ActionSpaceId(0), 2))],
        )
        .unwrap();
        let bs = [BaselineSample {
            query: q,
            target: 1.0,
            old: 0.0,
        }];
        let (lv, lb) = critic_losses(&mut v, &mut b, &vs, &bs, 0.2).unwrap();
        assert!(lv > 0.0 && lb > 0.0);
        assert!(v.store().flatten_grads().iter().any(|&x| x != 0.0));
        assert!(b.store().flatten_grads().iter().any(|&x| x != 0.0));
    }
}
