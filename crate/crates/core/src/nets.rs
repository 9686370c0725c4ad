//! Fully connected stacks.

use rand::Rng;

use crate::scalar::Real;
use crate::tensor::{Dense, Graph, NodeId, ParamStore, TensorError};

/// Dense layers with ReLU between them and a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `hidden_layers` ReLU layers of width `hidden`, then a linear map to
    /// `d_out`.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        hidden: usize,
        hidden_layers: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = d_in;
        for i in 0..hidden_layers {
            layers.push(Dense::new(store, &format!("{name}.hidden{i}"), width, hidden, rng));
            width = hidden;
        }
        layers.push(Dense::new(store, &format!("{name}.out"), width, d_out, rng));
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("at least one layer").d_out
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// The final linear layer, exposed so callers can rescale its weights.
    pub fn output_layer(&self) -> &Dense {
        self.layers.last().expect("at least one layer")
    }
}
