//! Fixed-width view of a variable population: every agent keeps a slot for
//! the whole episode and absent agents read as the all-zeros observation.

use std::collections::BTreeMap;

use crate::envs::{AgentHandle, EnvError, GroupEnv, Reset, StepResult};
use crate::spaces::{AgentId, AgentKind};

/// Slot-major snapshot of the population.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedView {
    /// One observation per slot; absorbed slots are all zeros.
    pub slots: Vec<Vec<f64>>,
    /// Which slots hold an active agent. Diagnostics only.
    pub mask: Vec<bool>,
    /// Agent assigned to each slot, kept after it terminates.
    pub ids: Vec<Option<AgentId>>,
}

#[derive(Debug, Clone)]
pub struct AbsorbingWrapper<E> {
    inner: E,
    n_max: usize,
    obs_dim: usize,
    slot_ids: Vec<Option<AgentId>>,
    slot_obs: Vec<Vec<f64>>,
    active: Vec<bool>,
}

impl<E: GroupEnv> AbsorbingWrapper<E> {
    /// Wraps `inner` with `n_max` slots. All agent kinds must share one
    /// observation width.
    pub fn new(inner: E, n_max: usize) -> Result<Self, EnvError> {
        let kinds = inner.kinds();
        let obs_dim = kinds.first().map_or(0, |k| k.observation.dim);
        if kinds.iter().any(|k| k.observation.dim != obs_dim) {
            return Err(EnvError::Layout(
                "absorbing slots need one observation width".into(),
            ));
        }
        Ok(AbsorbingWrapper {
            inner,
            n_max,
            obs_dim,
            slot_ids: vec![None; n_max],
            slot_obs: vec![vec![0.0; obs_dim]; n_max],
            active: vec![false; n_max],
        })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn slot_of(&self, id: AgentId) -> Option<usize> {
        self.slot_ids.iter().position(|s| *s == Some(id))
    }

    pub fn view(&self) -> PaddedView {
        PaddedView {
            slots: self.slot_obs.clone(),
            mask: self.active.clone(),
            ids: self.slot_ids.clone(),
        }
    }

    /// Steps with one action per slot; entries for absorbed slots are
    /// ignored.
    pub fn step_slots(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if actions.len() != self.n_max {
            return Err(EnvError::SlotCount {
                expected: self.n_max,
                found: actions.len(),
            });
        }
        let map = self
            .slot_ids
            .iter()
            .zip(&self.active)
            .zip(actions)
            .filter(|((_, &on), _)| on)
            .map(|((id, _), &a)| (id.expect("active slots are assigned"), a))
            .collect();
        self.step(&map)
    }

    /// Resets through a custom routine on the inner environment, such as a
    /// fixed layout.
    pub fn reset_inner_with(
        &mut self,
        f: impl FnOnce(&mut E) -> Result<Reset, EnvError>,
    ) -> Result<Reset, EnvError> {
        let r = f(&mut self.inner)?;
        self.seat(&r)?;
        Ok(r)
    }

    fn seat(&mut self, r: &Reset) -> Result<(), EnvError> {
        self.slot_ids = vec![None; self.n_max];
        self.slot_obs = vec![vec![0.0; self.obs_dim]; self.n_max];
        self.active = vec![false; self.n_max];
        for h in &r.agents {
            self.assign(h.id)?;
        }
        self.refresh(&r.observations);
        Ok(())
    }

    fn assign(&mut self, id: AgentId) -> Result<usize, EnvError> {
        let slot = self
            .slot_ids
            .iter()
            .position(Option::is_none)
            .ok_or(EnvError::SlotOverflow { n_max: self.n_max })?;
        self.slot_ids[slot] = Some(id);
        self.active[slot] = true;
        Ok(slot)
    }

    fn absorb(&mut self, id: AgentId) {
        if let Some(slot) = self.slot_of(id) {
            self.active[slot] = false;
            self.slot_obs[slot] = vec![0.0; self.obs_dim];
        }
    }

    fn refresh(&mut self, observations: &BTreeMap<AgentId, Vec<f64>>) {
        for (id, o) in observations {
            if let Some(slot) = self.slot_of(*id) {
                if self.active[slot] {
                    self.slot_obs[slot] = o.clone();
                }
            }
        }
    }
}

impl<E: GroupEnv> GroupEnv for AbsorbingWrapper<E> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn kinds(&self) -> Vec<AgentKind> {
        self.inner.kinds()
    }

    fn max_agents(&self) -> usize {
        self.n_max
    }

    /// Panics if the initial population alone exceeds the slots.
    fn reset(&mut self, seed: u64) -> Reset {
        let r = self.inner.reset(seed);
        self.seat(&r).expect("initial population fits the absorbing slots");
        r
    }

    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError> {
        let r = self.inner.step(actions)?;
        for id in &r.terminations {
            self.absorb(*id);
        }
        for h in &r.spawns {
            self.assign(h.id)?;
        }
        self.refresh(&r.observations);
        Ok(r)
    }

    fn active(&self) -> Vec<AgentHandle> {
        self.inner.active()
    }

    fn snapshot(&self) -> Vec<u64> {
        self.inner.snapshot()
    }

    fn padded_view(&self) -> Option<PaddedView> {
        Some(self.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BatonRelay, BatonRelayConfig, BatonRelayLayout, DungeonRun, DungeonRunConfig, DungeonRunLayout};
    use crate::envs::{Cell, SimpleSpread, SimpleSpreadConfig};

    #[test]
    fn full_population_has_no_padding() {
        let mut env = AbsorbingWrapper::new(SimpleSpread::new(SimpleSpreadConfig::default()), 3).unwrap();
        let r = env.reset(5);
        let v = env.view();
        assert!(v.mask.iter().all(|&m| m));
        for (slot, id) in v.ids.iter().enumerate() {
            assert_eq!(v.slots[slot], r.observations[&id.unwrap()]);
        }
    }

    #[test]
    fn unspawned_slots_read_zero() {
        let mut env = AbsorbingWrapper::new(BatonRelay::new(BatonRelayConfig::default()), 6).unwrap();
        env.reset(1);
        let v = env.view();
        assert_eq!(v.mask, vec![true, false, false, false, false, false]);
        assert!(v.slots[1..].iter().all(|s| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn dead_slot_ignores_actions() {
        let cfg = DungeonRunConfig {
            dragon_move_prob: 0.0,
            ..DungeonRunConfig::default()
        };
        let layout = DungeonRunLayout {
            agents: vec![Cell::new(1, 1), Cell::new(3, 3), Cell::new(1, 2)],
            dragon: Cell::new(3, 2),
            portal: Cell::new(6, 6),
            door: Cell::new(0, 6),
            pinks: vec![],
        };
        let make = || {
            let mut w = AbsorbingWrapper::new(DungeonRun::new(cfg), 3).unwrap();
            w.reset_inner_with(|e| e.reset_with_layout(&layout, 9)).unwrap();
            w
        };
        let mut a = make();
        let mut b = make();
        for w in [&mut a, &mut b] {
            let r = w.step_slots(&[0, 2, 0]).unwrap();
            assert_eq!(r.terminations, vec![AgentId(1)]);
            assert!(w.view().slots[1].iter().all(|&x| x == 0.0));
            assert_eq!(w.view().mask, vec![true, false, true]);
        }
        a.step_slots(&[1, 3, 4]).unwrap();
        b.step(&BTreeMap::from([(AgentId(0), 1), (AgentId(2), 4)])).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        assert_eq!(a.view(), b.view());
    }

    #[test]
    fn overflow_is_reported() {
        let layout = BatonRelayLayout {
            spawn: Cell::new(0, 0),
            button: Cell::new(0, 2),
            exit: Cell::new(5, 5),
            orb: Cell::new(2, 0),
        };
        let mut env = AbsorbingWrapper::new(BatonRelay::new(BatonRelayConfig::default()), 1).unwrap();
        env.reset_inner_with(|e| e.reset_with_layout(layout, 0)).unwrap();
        for a in [4, 4, 3, 1, 3] {
            env.step_slots(&[a]).unwrap();
        }
        assert_eq!(env.step_slots(&[1]), Err(EnvError::SlotOverflow { n_max: 1 }));
    }

    #[test]
    fn reset_clears_slots() {
        let mut env = AbsorbingWrapper::new(BatonRelay::new(BatonRelayConfig::default()), 6).unwrap();
        env.reset(3);
        let first = env.view();
        env.step_slots(&[1; 6]).unwrap();
        env.reset(3);
        assert_eq!(env.view(), first);
    }
}
