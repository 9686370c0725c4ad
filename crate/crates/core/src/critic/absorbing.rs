//! Fixed-width fully connected critics over absorbing-state padding.
//!
//! Every agent owns a slot for the whole episode; slots of agents that have
//! not spawned yet or have terminated hold the all-zeros observation.

use rand::Rng;

use crate::critic::CriticError;
use crate::nets::Mlp;
use crate::scalar::Real;
use crate::tensor::{Graph, Matrix, NodeId, ParamStore};

/// Shape of the padded joint input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotLayout {
    pub n_max: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
}

impl SlotLayout {
    pub fn value_width(&self) -> usize {
        self.n_max * self.obs_dim
    }

    pub fn baseline_width(&self) -> usize {
        self.n_max * (self.obs_dim + self.n_actions) + self.n_max
    }

    /// Concatenation of all slot observations.
    pub fn value_row(&self, slots: &[Vec<f64>]) -> Result<Vec<f64>, CriticError> {
        self.check_slots(slots)?;
        Ok(slots.concat())
    }

    /// Every slot's observation with its one-hot action, the focus slot's
    /// action left as zeros, followed by a one-hot of the focus slot.
    /// Absorbed slots pass `None` and contribute zeros.
    pub fn baseline_row(
        &self,
        slots: &[Vec<f64>],
        actions: &[Option<usize>],
        focus: usize,
    ) -> Result<Vec<f64>, CriticError> {
        self.check_slots(slots)?;
        if actions.len() != self.n_max {
            return Err(CriticError::LengthMismatch {
                what: "slots/actions",
                left: self.n_max,
                right: actions.len(),
            });
        }
        if focus >= self.n_max {
            return Err(CriticError::SlotIndex {
                slot: focus,
                n_max: self.n_max,
            });
        }
        let mut row = Vec::with_capacity(self.baseline_width());
        for (i, (obs, act)) in slots.iter().zip(actions).enumerate() {
            row.extend_from_slice(obs);
            let hot = if i == focus { None } else { *act };
            row.extend((0..self.n_actions).map(|a| if hot == Some(a) { 1.0 } else { 0.0 }));
        }
        row.extend((0..self.n_max).map(|i| if i == focus { 1.0 } else { 0.0 }));
        Ok(row)
    }

    fn check_slots(&self, slots: &[Vec<f64>]) -> Result<(), CriticError> {
        if slots.len() != self.n_max {
            return Err(CriticError::LengthMismatch {
                what: "slots/n_max",
                left: slots.len(),
                right: self.n_max,
            });
        }
        if let Some(bad) = slots.iter().find(|s| s.len() != self.obs_dim) {
            return Err(CriticError::SlotWidth {
                expected: self.obs_dim,
                found: bad.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FcNet<F: Real> {
    store: ParamStore<F>,
    mlp: Mlp,
}

impl<F: Real> FcNet<F> {
    fn new<R: Rng + ?Sized>(name: &str, d_in: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, name, d_in, hidden, layers, 1, rng);
        FcNet { store, mlp }
    }

    fn forward(&self, g: &mut Graph<F>, rows: &[Vec<f64>]) -> Result<NodeId, CriticError> {
        if rows.is_empty() {
            return Err(CriticError::EmptyGroup);
        }
        let width = self.mlp.d_in();
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(CriticError::SlotWidth {
                expected: width,
                found: bad.len(),
            });
        }
        let x = g.input(Matrix::from_f64_rows(rows)?);
        Ok(self.mlp.forward(g, &self.store, x)?)
    }

    fn evaluate(&self, rows: &[Vec<f64>]) -> Result<Vec<F>, CriticError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, rows)?;
        Ok(g.value(out).as_slice().to_vec())
    }
}

/// Value function over the padded joint observation.
#[derive(Debug, Clone)]
pub struct FcValueNet<F: Real> {
    pub layout: SlotLayout,
    net: FcNet<F>,
}

impl<F: Real> FcValueNet<F> {
    pub fn new<R: Rng + ?Sized>(layout: SlotLayout, hidden: usize, layers: usize, rng: &mut R) -> Self {
        FcValueNet {
            layout,
            net: FcNet::new("fc_value", layout.value_width(), hidden, layers, rng),
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.net.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.net.store
    }

    /// Rows built by [`SlotLayout::value_row`]; returns `S×1`.
    pub fn forward(&self, g: &mut Graph<F>, rows: &[Vec<f64>]) -> Result<NodeId, CriticError> {
        self.net.forward(g, rows)
    }

    pub fn evaluate(&self, rows: &[Vec<f64>]) -> Result<Vec<F>, CriticError> {
        self.net.evaluate(rows)
    }
}

/// Counterfactual baseline over the padded joint observation-action.
#[derive(Debug, Clone)]
pub struct FcBaselineNet<F: Real> {
    pub layout: SlotLayout,
    net: FcNet<F>,
}

impl<F: Real> FcBaselineNet<F> {
    pub fn new<R: Rng + ?Sized>(layout: SlotLayout, hidden: usize, layers: usize, rng: &mut R) -> Self {
        FcBaselineNet {
            layout,
            net: FcNet::new("fc_baseline", layout.baseline_width(), hidden, layers, rng),
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.net.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.net.store
    }

    /// Rows built by [`SlotLayout::baseline_row`]; returns `S×1`.
    pub fn forward(&self, g: &mut Graph<F>, rows: &[Vec<f64>]) -> Result<NodeId, CriticError> {
        self.net.forward(g, rows)
    }

    pub fn evaluate(&self, rows: &[Vec<f64>]) -> Result<Vec<F>, CriticError> {
        self.net.evaluate(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LAYOUT: SlotLayout = SlotLayout {
        n_max: 3,
        obs_dim: 2,
        n_actions: 2,
    };

    #[test]
    fn value_row_is_plain_concatenation() {
        let slots = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0]];
        assert_eq!(LAYOUT.value_row(&slots).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        assert!(LAYOUT.value_row(&slots[..2]).is_err());
    }

    #[test]
    fn baseline_row_hides_focus_action() {
        let slots = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0]];
        let row = LAYOUT.baseline_row(&slots, &[Some(1), Some(0), None], 0).unwrap();
        assert_eq!(
            row,
            vec![1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(row.len(), LAYOUT.baseline_width());
        assert!(LAYOUT.baseline_row(&slots, &[None; 3], 3).is_err());
    }

    #[test]
    fn nets_evaluate_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = FcValueNet::<f64>::new(LAYOUT, 8, 2, &mut rng);
        let b = FcBaselineNet::<f64>::new(LAYOUT, 8, 2, &mut rng);
        assert_ne!(v.store().registry_id(), b.store().registry_id());
        let slots = vec![vec![0.5, -0.5], vec![0.1, 0.2], vec![0.0, 0.0]];
        let rows = vec![LAYOUT.value_row(&slots).unwrap(); 2];
        let out = v.evaluate(&rows).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], out[1]);
        let brow = LAYOUT.baseline_row(&slots, &[Some(0), Some(1), None], 1).unwrap();
        assert!(b.evaluate(&[brow]).unwrap()[0].is_finite());
        assert!(v.evaluate(&[vec![0.0; 5]]).is_err());
    }
}
