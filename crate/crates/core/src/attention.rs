//! Entity encoders and the residual self-attention block.
//!
//! Sets of entities are laid out as consecutive rows of one matrix, with a
//! list of row segments telling which rows belong together. Attention runs
//! inside each segment only and every segment is mean-pooled to a single
//! row, so a batch may mix sets of different sizes without padding or
//! masking.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Real;
use crate::spaces::{ActionSpace, ActionSpaceId, ObservationSpace, SpaceId};
use crate::tensor::{
    segments_from_counts, Dense, Graph, LayerNormParams, Matrix, NodeId, ParamStore, Segments,
    TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("no encoder registered for {0:?}")]
    UnknownEncoder(EncoderKey),
    #[error("observation width {found} does not match encoder width {expected}")]
    ObservationWidth { expected: usize, found: usize },
    #[error("action {action} outside a space of {n} actions")]
    ActionOutOfRange { action: usize, n: usize },
    #[error("entity set is empty")]
    EmptyEntitySet,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which encoder an entity goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncoderKey {
    /// Observation-only entities.
    Observation(SpaceId),
    /// Observation concatenated with a one-hot action.
    ObservationAction(SpaceId, ActionSpaceId),
}

/// One entity to embed.
#[derive(Debug, Clone, Copy)]
pub struct Entity<'a> {
    pub space: SpaceId,
    pub observation: &'a [f64],
    pub action: Option<(ActionSpaceId, usize)>,
}

impl<'a> Entity<'a> {
    pub fn observation(space: SpaceId, observation: &'a [f64]) -> Self {
        Entity {
            space,
            observation,
            action: None,
        }
    }

    pub fn with_action(
        space: SpaceId,
        observation: &'a [f64],
        action_space: ActionSpaceId,
        action: usize,
    ) -> Self {
        Entity {
            space,
            observation,
            action: Some((action_space, action)),
        }
    }

    pub fn key(&self) -> EncoderKey {
        match self.action {
            None => EncoderKey::Observation(self.space),
            Some((a, _)) => EncoderKey::ObservationAction(self.space, a),
        }
    }
}

/// Dense layer plus ReLU mapping one entity into the embedding space.
#[derive(Debug, Clone)]
pub struct EntityEncoder {
    pub key: EncoderKey,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub layer: Dense,
}

/// Encoders keyed by observation space (and action space for
/// observation-action entities). Agents of the same kind share one encoder.
#[derive(Debug, Clone)]
pub struct EncoderBank {
    d_e: usize,
    encoders: BTreeMap<EncoderKey, EntityEncoder>,
}

impl EncoderBank {
    pub fn new(d_e: usize) -> Self {
        EncoderBank {
            d_e,
            encoders: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.d_e
    }

    /// Registers an observation encoder unless one exists for this space.
    pub fn register_observation<F: Real, R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<F>,
        space: ObservationSpace,
        rng: &mut R,
    ) -> EncoderKey {
        let key = EncoderKey::Observation(space.id);
        let d_e = self.d_e;
        self.encoders.entry(key).or_insert_with(|| EntityEncoder {
            key,
            obs_dim: space.dim,
            n_actions: 0,
            layer: Dense::new(store, &format!("enc.obs{}", space.id.0), space.dim, d_e, rng),
        });
        key
    }

    /// Registers an observation-action encoder unless one exists.
    pub fn register_observation_action<F: Real, R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore<F>,
        space: ObservationSpace,
        action: ActionSpace,
        rng: &mut R,
    ) -> EncoderKey {
        let key = EncoderKey::ObservationAction(space.id, action.id);
        let d_e = self.d_e;
        self.encoders.entry(key).or_insert_with(|| EntityEncoder {
            key,
            obs_dim: space.dim,
            n_actions: action.n,
            layer: Dense::new(
                store,
                &format!("enc.obs{}.act{}", space.id.0, action.id.0),
                space.dim + action.n,
                d_e,
                rng,
            ),
        });
        key
    }

    pub fn get(&self, key: EncoderKey) -> Option<&EntityEncoder> {
        self.encoders.get(&key)
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    /// Embeds every entity, returning one row per entity in input order.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        entities: &[Entity<'_>],
    ) -> Result<NodeId, AttentionError> {
        if entities.is_empty() {
            return Err(AttentionError::EmptyEntitySet);
        }
        // bucket rows per encoder, remembering where each entity went
        let mut buckets: BTreeMap<EncoderKey, Vec<usize>> = BTreeMap::new();
        for (i, e) in entities.iter().enumerate() {
            buckets.entry(e.key()).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(buckets.len());
        let mut position = vec![0usize; entities.len()];
        let mut offset = 0;
        for (key, members) in &buckets {
            let enc = self
                .encoders
                .get(key)
                .ok_or(AttentionError::UnknownEncoder(*key))?;
            let width = enc.obs_dim + enc.n_actions;
            let mut data = Vec::with_capacity(members.len() * width);
            for &i in members {
                let e = &entities[i];
                if e.observation.len() != enc.obs_dim {
                    return Err(AttentionError::ObservationWidth {
                        expected: enc.obs_dim,
                        found: e.observation.len(),
                    });
                }
                data.extend(e.observation.iter().map(|&x| F::from_f(x)));
                if let Some((_, a)) = e.action {
                    if a >= enc.n_actions {
                        return Err(AttentionError::ActionOutOfRange {
                            action: a,
                            n: enc.n_actions,
                        });
                    }
                    data.extend((0..enc.n_actions).map(|j| if j == a { F::one() } else { F::zero() }));
                }
                position[i] = offset;
                offset += 1;
            }
            let x = g.input(Matrix::from_vec(members.len(), width, data)?);
            let h = enc.layer.forward(g, store, x)?;
            parts.push(g.relu(h));
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        if position.iter().enumerate().all(|(i, &p)| i == p) {
            Ok(stacked)
        } else {
            Ok(g.gather_rows(stacked, &position)?)
        }
    }

    /// Embeds a single entity set outside any training graph.
    pub fn encode_entities<F: Real>(
        &self,
        store: &ParamStore<F>,
        entities: &[Entity<'_>],
    ) -> Result<EntitySet<F>, AttentionError> {
        let mut g = Graph::new();
        let node = self.encode(&mut g, store, entities)?;
        Ok(EntitySet(g.value(node).clone()))
    }
}

/// Embedded entities, one row each (`k × d_e`).
#[derive(Debug, Clone, PartialEq)]
pub struct EntitySet<F>(pub Matrix<F>);

impl<F: Real> EntitySet<F> {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    /// Same entities in a new order: row `i` becomes row `order[i]` of self.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let rows: Vec<Vec<F>> = order.iter().map(|&i| self.0.row(i).to_vec()).collect();
        EntitySet(Matrix::from_rows(&rows).expect("rows share a width"))
    }
}

/// Output of [`RsaBlock::forward`].
#[derive(Debug, Clone, Copy)]
pub struct RsaOutput {
    /// One pooled row per segment.
    pub pooled: NodeId,
    /// The attention node, for inspecting weights.
    pub attention: NodeId,
}

/// Residual self-attention over entity sets.
///
/// Layer norm, per-head query/key/value projections, scaled dot-product
/// attention, output projection, residual add of the un-normalized input,
/// layer norm, and a mean over the entities of each set.
#[derive(Debug, Clone)]
pub struct RsaBlock {
    pub d_e: usize,
    pub heads: usize,
    pub norm_in: LayerNormParams,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub norm_out: LayerNormParams,
}

impl RsaBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_e: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, AttentionError> {
        if heads == 0 || !d_e.is_multiple_of(heads) {
            return Err(TensorError::Heads { width: d_e, heads }.into());
        }
        Ok(RsaBlock {
            d_e,
            heads,
            norm_in: LayerNormParams::new(store, &format!("{name}.ln_in"), d_e),
            query: Dense::new(store, &format!("{name}.q"), d_e, d_e, rng),
            key: Dense::new(store, &format!("{name}.k"), d_e, d_e, rng),
            value: Dense::new(store, &format!("{name}.v"), d_e, d_e, rng),
            output: Dense::new(store, &format!("{name}.o"), d_e, d_e, rng),
            norm_out: LayerNormParams::new(store, &format!("{name}.ln_out"), d_e),
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        entities: NodeId,
        segments: Segments,
    ) -> Result<RsaOutput, AttentionError> {
        if segments.is_empty() {
            return Err(AttentionError::EmptyEntitySet);
        }
        let normed = self.norm_in.forward(g, store, entities)?;
        let q = self.query.forward(g, store, normed)?;
        let k = self.key.forward(g, store, normed)?;
        let v = self.value.forward(g, store, normed)?;
        let attention = g.segment_attention(q, k, v, segments.clone(), self.heads)?;
        let projected = self.output.forward(g, store, attention)?;
        let residual = g.add(projected, entities)?;
        let out = self.norm_out.forward(g, store, residual)?;
        let pooled = g.segment_mean(out, segments)?;
        Ok(RsaOutput { pooled, attention })
    }

    /// Pools one entity set to a fixed `d_e` vector.
    pub fn pool<F: Real>(
        &self,
        store: &ParamStore<F>,
        set: &EntitySet<F>,
    ) -> Result<Vec<F>, AttentionError> {
        let (g, out) = self.run_single(store, set)?;
        Ok(g.value(out.pooled).as_slice().to_vec())
    }

    /// Per-head `k×k` attention matrices for one entity set.
    pub fn attention_weights<F: Real>(
        &self,
        store: &ParamStore<F>,
        set: &EntitySet<F>,
    ) -> Result<Vec<Matrix<F>>, AttentionError> {
        let (g, out) = self.run_single(store, set)?;
        Ok(g.attention_weights(out.attention)
            .expect("node was built by segment_attention"))
    }

    fn run_single<F: Real>(
        &self,
        store: &ParamStore<F>,
        set: &EntitySet<F>,
    ) -> Result<(Graph<F>, RsaOutput), AttentionError> {
        if set.is_empty() {
            return Err(AttentionError::EmptyEntitySet);
        }
        let mut g = Graph::new();
        let x = g.input(set.0.clone());
        let out = self.forward(&mut g, store, x, segments_from_counts(&[set.len()]))?;
        Ok((g, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mapoca_oracles::{dot_product_attention, layer_norm_row};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const OBS: ObservationSpace = ObservationSpace {
        id: SpaceId(0),
        dim: 3,
    };
    const ACT: ActionSpace = ActionSpace {
        id: ActionSpaceId(0),
        n: 4,
    };

    fn random_set(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EntitySet<f64> {
        let data = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        EntitySet(Matrix::from_vec(k, d, data).unwrap())
    }

    #[test]
    fn shared_encoder_gives_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let mut bank = EncoderBank::new(8);
        bank.register_observation(&mut store, OBS, &mut rng);
        bank.register_observation(&mut store, OBS, &mut rng);
        assert_eq!(bank.len(), 1);
        let obs = [0.1, -0.4, 0.9];
        let set = bank
            .encode_entities(
                &store,
                &[Entity::observation(SpaceId(0), &obs), Entity::observation(SpaceId(0), &obs)],
            )
            .unwrap();
        assert_eq!(set.0.row(0), set.0.row(1));
        let single = bank
            .encode_entities(&store, &[Entity::observation(SpaceId(0), &obs)])
            .unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn observation_and_observation_action_encoders_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mut bank = EncoderBank::new(8);
        bank.register_observation(&mut store, OBS, &mut rng);
        bank.register_observation_action(&mut store, OBS, ACT, &mut rng);
        assert_eq!(bank.len(), 2);
        let obs = [0.5, 0.2, -0.3];
        let set = bank
            .encode_entities(
                &store,
                &[
                    Entity::observation(SpaceId(0), &obs),
                    Entity::with_action(SpaceId(0), &obs, ActionSpaceId(0), 2),
                ],
            )
            .unwrap();
        assert!(set.0.row(0).iter().zip(set.0.row(1)).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn mixed_encoders_preserve_entity_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let mut bank = EncoderBank::new(4);
        bank.register_observation(&mut store, OBS, &mut rng);
        bank.register_observation_action(&mut store, OBS, ACT, &mut rng);
        let (a, b, c) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        let ents = [
            Entity::with_action(SpaceId(0), &a, ActionSpaceId(0), 1),
            Entity::observation(SpaceId(0), &b),
            Entity::with_action(SpaceId(0), &c, ActionSpaceId(0), 3),
        ];
        let all = bank.encode_entities(&store, &ents).unwrap();
        for (i, e) in ents.iter().enumerate() {
            let alone = bank.encode_entities(&store, std::slice::from_ref(e)).unwrap();
            assert_eq!(all.0.row(i), alone.0.row(0));
        }
    }

    #[test]
    fn unknown_space_is_rejected() {
        let store = ParamStore::<f64>::new();
        let bank = EncoderBank::new(4);
        let err = bank
            .encode_entities(&store, &[Entity::observation(SpaceId(7), &[1.0])])
            .unwrap_err();
        assert_eq!(err, AttentionError::UnknownEncoder(EncoderKey::Observation(SpaceId(7))));
    }

    #[test]
    fn single_entity_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 8, 4, &mut rng).unwrap();
        let set = random_set(&mut rng, 1, 8);
        let weights = rsa.attention_weights(&store, &set).unwrap();
        assert_eq!(weights.len(), 4);
        for w in &weights {
            assert_eq!(w.as_slice(), &[1.0]);
        }
        let pooled = rsa.pool(&store, &set).unwrap();
        assert_eq!(pooled.len(), 8);
    }

    #[test]
    fn identical_entities_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 8, 2, &mut rng).unwrap();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let set = EntitySet(Matrix::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap());
        for w in rsa.attention_weights(&store, &set).unwrap() {
            assert!(w.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 8, 4, &mut rng).unwrap();
        let set = random_set(&mut rng, 3, 8);
        for w in rsa.attention_weights(&store, &set).unwrap() {
            for i in 0..3 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_projections_match_hand_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 2, 1, &mut rng).unwrap();
        for layer in [rsa.query, rsa.key, rsa.value, rsa.output] {
            *store.value_mut(layer.weight) = Matrix::identity(2);
        }
        let entities = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let set = EntitySet(Matrix::from_rows(&entities).unwrap());

        let normed: Vec<Vec<f64>> = entities.iter().map(|r| layer_norm_row(r, 1e-5)).collect();
        let (want_w, attended) = dot_product_attention(&normed, &normed, &normed);
        let residual: Vec<Vec<f64>> = attended
            .iter()
            .zip(&entities)
            .map(|(a, e)| a.iter().zip(e).map(|(x, y)| x + y).collect())
            .collect();
        let out: Vec<Vec<f64>> = residual.iter().map(|r| layer_norm_row(r, 1e-5)).collect();
        let want_pool = [(out[0][0] + out[1][0]) / 2.0, (out[0][1] + out[1][1]) / 2.0];

        let w = &rsa.attention_weights(&store, &set).unwrap()[0];
        for i in 0..2 {
            for j in 0..2 {
                assert!((w[(i, j)] - want_w[i][j]).abs() < 1e-12);
            }
        }
        let pooled = rsa.pool(&store, &set).unwrap();
        assert!((pooled[0] - want_pool[0]).abs() < 1e-12);
        assert!((pooled[1] - want_pool[1]).abs() < 1e-12);
    }

    #[test]
    fn pooled_output_ignores_entity_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 16, 4, &mut rng).unwrap();
        for k in 1..=10 {
            let set = random_set(&mut rng, k, 16);
            let base = rsa.pool(&store, &set).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            for _ in 0..5 {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                let p = rsa.pool(&store, &set.permuted(&order)).unwrap();
                let diff = base.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9, "k={k} diff={diff}");
            }
        }
    }

    #[test]
    fn every_entity_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 8, 2, &mut rng).unwrap();
        for k in 1..=6 {
            let set = random_set(&mut rng, k, 8);
            let mut g = Graph::new();
            let x = g.input(set.0.clone());
            let out = rsa.forward(&mut g, &store, x, segments_from_counts(&[k])).unwrap();
            let w = g.input(random_set(&mut rng, 1, 8).0);
            let prod = g.mul(out.pooled, w).unwrap();
            let loss = g.sum_all(prod);
            g.backward(loss).unwrap();
            for r in 0..k {
                assert!(g.grad(x).row(r).iter().any(|v| v.abs() > 1e-12), "row {r} of {k}");
            }
        }
    }

    #[test]
    fn same_block_handles_any_set_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 8, 4, &mut rng).unwrap();
        let before = store.numel();
        for k in 1..=10 {
            assert_eq!(rsa.pool(&store, &random_set(&mut rng, k, 8)).unwrap().len(), 8);
        }
        assert_eq!(store.numel(), before);
        let empty = EntitySet(Matrix::<f64>::zeros(0, 8));
        assert_eq!(rsa.pool(&store, &empty), Err(AttentionError::EmptyEntitySet));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        assert!(RsaBlock::new(&mut store, "rsa", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn batched_segments_match_individual_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let rsa = RsaBlock::new(&mut store, "rsa", 8, 2, &mut rng).unwrap();
        let sets: Vec<_> = [3, 1, 4].iter().map(|&k| random_set(&mut rng, k, 8)).collect();
        let rows: Vec<Vec<f64>> = sets.iter().flat_map(|s| s.0.to_f64_rows()).collect();
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&rows).unwrap());
        let out = rsa.forward(&mut g, &store, x, segments_from_counts(&[3, 1, 4])).unwrap();
        for (i, s) in sets.iter().enumerate() {
            let alone = rsa.pool(&store, s).unwrap();
            let diff = g.value(out.pooled).row(i).iter().zip(&alone).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }
}
