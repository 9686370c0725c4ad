use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::scalar::Real;
use crate::tensor::{Graph, Matrix, NodeId, TensorError};

static NEXT_REGISTRY: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param<F> {
    name: String,
    value: Matrix<F>,
    grad: Matrix<F>,
}

/// Owns the parameters of one network together with their gradients.
///
/// Every store gets a process-unique registry id, so two stores never alias
/// even when their contents coincide.
#[derive(Debug)]
pub struct ParamStore<F> {
    registry: u64,
    params: Vec<Param<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Clone for ParamStore<F> {
    /// Clones the values under a fresh registry id.
    fn clone(&self) -> Self {
        ParamStore {
            registry: NEXT_REGISTRY.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            registry: NEXT_REGISTRY.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn registry_id(&self) -> u64 {
        self.registry
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<F>) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values flattened in registration order.
    pub fn flatten(&self) -> Vec<F> {
        self.params
            .iter()
            .flat_map(|p| p.value.as_slice().iter().copied())
            .collect()
    }

    /// All gradients flattened in registration order.
    pub fn flatten_grads(&self) -> Vec<F> {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice().iter().copied())
            .collect()
    }

    /// Overwrites every parameter from a flat vector laid out as by
    /// [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.numel());
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Uniform fan-based initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| F::from_f(rng.gen_range(-limit..=limit)))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized to fan_in x fan_out")
}

/// A fully connected layer `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d_out));
        Dense {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Gain and shift of a layer normalization, initialized to one and zero.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, F::one())),
            shift: store.add(format!("{name}.shift"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift)
    }
}
