//! A grid escape where one agent must sacrifice itself to the key-carrying
//! dragon so a teammate can carry the key through the door.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::grid::{free_cell, Cell, Move};
use crate::envs::{check_actions, rng_words, AgentHandle, EnvError, GroupEnv, Reset, StepResult};
use crate::spaces::{ActionSpace, ActionSpaceId, AgentId, AgentKind, ObservationSpace, SpaceId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DungeonRunConfig {
    pub size: i32,
    pub agents: usize,
    /// Chance per step that the key dragon advances toward the portal.
    pub dragon_move_prob: f64,
    /// Smallest starting Manhattan distance between dragon and portal.
    pub min_portal_distance: i32,
    pub time_limit: usize,
    pub pink_dragons: usize,
    /// Chance per step that a pink dragon closes in on the nearest agent.
    pub pink_move_prob: f64,
}

impl Default for DungeonRunConfig {
    fn default() -> Self {
        DungeonRunConfig {
            size: 7,
            agents: 3,
            dragon_move_prob: 0.5,
            min_portal_distance: 6,
            time_limit: 60,
            pink_dragons: 0,
            pink_move_prob: 0.5,
        }
    }
}

/// Explicit placement of every entity, for scripted episodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DungeonRunLayout {
    pub agents: Vec<Cell>,
    pub dragon: Cell,
    pub portal: Cell,
    pub door: Cell,
    pub pinks: Vec<Cell>,
}

#[derive(Debug, Clone)]
pub struct DungeonRun {
    cfg: DungeonRunConfig,
    rng: ChaCha8Rng,
    agents: BTreeMap<AgentId, Cell>,
    dragon: Option<Cell>,
    key: Option<Cell>,
    holder: Option<AgentId>,
    portal: Cell,
    door: Cell,
    pinks: Vec<Cell>,
    t: usize,
    done: bool,
}

impl DungeonRun {
    pub fn new(cfg: DungeonRunConfig) -> Self {
        DungeonRun {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(0),
            agents: BTreeMap::new(),
            dragon: None,
            key: None,
            holder: None,
            portal: Cell::new(0, 0),
            door: Cell::new(0, 0),
            pinks: Vec::new(),
            t: 0,
            done: true,
        }
    }

    pub fn kind(&self) -> AgentKind {
        AgentKind {
            observation: ObservationSpace {
                id: SpaceId(0),
                dim: 17 + 3 * (self.cfg.agents - 1),
            },
            action: ActionSpace {
                id: ActionSpaceId(0),
                n: Move::COUNT,
            },
        }
    }

    pub fn agent_cells(&self) -> &BTreeMap<AgentId, Cell> {
        &self.agents
    }

    pub fn dragon(&self) -> Option<Cell> {
        self.dragon
    }

    /// Cell of a key lying on the floor.
    pub fn key_on_floor(&self) -> Option<Cell> {
        self.key
    }

    pub fn key_holder(&self) -> Option<AgentId> {
        self.holder
    }

    /// Starts an episode from an explicit layout; `seed` drives the dragons.
    pub fn reset_with_layout(&mut self, layout: &DungeonRunLayout, seed: u64) -> Result<Reset, EnvError> {
        let size = self.cfg.size;
        let cells = layout
            .agents
            .iter()
            .chain(&layout.pinks)
            .chain([&layout.dragon, &layout.portal, &layout.door]);
        if let Some(bad) = cells.clone().find(|c| !c.in_bounds(size)) {
            return Err(EnvError::Layout(format!("{bad:?} outside the {size}x{size} grid")));
        }
        if layout.agents.len() != self.cfg.agents || layout.pinks.len() != self.cfg.pink_dragons {
            return Err(EnvError::Layout(format!(
                "expected {} agents and {} pink dragons",
                self.cfg.agents, self.cfg.pink_dragons
            )));
        }
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.agents = layout
            .agents
            .iter()
            .enumerate()
            .map(|(i, &c)| (AgentId(i as u32), c))
            .collect();
        self.dragon = Some(layout.dragon);
        self.key = None;
        self.holder = None;
        self.portal = layout.portal;
        self.door = layout.door;
        self.pinks = layout.pinks.clone();
        self.t = 0;
        self.done = false;
        Ok(Reset {
            agents: self.active(),
            observations: self.observations(),
        })
    }

    fn random_layout(&mut self) -> DungeonRunLayout {
        let size = self.cfg.size;
        let rng = &mut self.rng;
        let portal = free_cell(rng, size, &[]);
        let far: Vec<Cell> = (0..size)
            .flat_map(|x| (0..size).map(move |y| Cell::new(x, y)))
            .filter(|c| c.manhattan(portal) >= self.cfg.min_portal_distance)
            .collect();
        let dragon = if far.is_empty() {
            free_cell(rng, size, &[portal])
        } else {
            far[rng.gen_range(0..far.len())]
        };
        let door = free_cell(rng, size, &[portal, dragon]);
        let mut taken = vec![portal, dragon, door];
        let mut agents = Vec::with_capacity(self.cfg.agents);
        for _ in 0..self.cfg.agents {
            let c = free_cell(rng, size, &taken);
            taken.push(c);
            agents.push(c);
        }
        let mut pinks = Vec::with_capacity(self.cfg.pink_dragons);
        for _ in 0..self.cfg.pink_dragons {
            let c = free_cell(rng, size, &taken);
            taken.push(c);
            pinks.push(c);
        }
        DungeonRunLayout {
            agents,
            dragon,
            portal,
            door,
            pinks,
        }
    }

    fn observe(&self, id: AgentId) -> Vec<f64> {
        let size = self.cfg.size;
        let me = self.agents[&id];
        let mut o = Vec::with_capacity(self.kind().observation.dim);
        o.extend(me.normalized(size));
        push_optional(&mut o, me, self.dragon, size);
        push_optional(&mut o, me, self.key, size);
        o.extend(me.relative(self.door, size));
        o.extend(me.relative(self.portal, size));
        o.push((self.holder == Some(id)) as u8 as f64);
        o.push((self.holder.is_some() && self.holder != Some(id)) as u8 as f64);
        for i in 0..self.cfg.agents as u32 {
            let other = AgentId(i);
            if other != id {
                push_optional(&mut o, me, self.agents.get(&other).copied(), size);
            }
        }
        let nearest = self.pinks.iter().copied().min_by_key(|p| (p.manhattan(me), *p));
        push_optional(&mut o, me, nearest, size);
        o
    }

    fn observations(&self) -> BTreeMap<AgentId, Vec<f64>> {
        self.agents.keys().map(|&id| (id, self.observe(id))).collect()
    }

    /// Removes the lowest-id agent standing on `cell`, dropping the key there
    /// if it carried it.
    fn remove_agent_at(&mut self, cell: Cell, terminations: &mut Vec<AgentId>) -> bool {
        let victim = self.agents.iter().find(|(_, &c)| c == cell).map(|(&id, _)| id);
        if let Some(id) = victim {
            self.agents.remove(&id);
            terminations.push(id);
            if self.holder == Some(id) {
                self.holder = None;
                self.key = Some(cell);
            }
            true
        } else {
            false
        }
    }

    fn resolve_dragon(&mut self, terminations: &mut Vec<AgentId>) {
        if let Some(d) = self.dragon {
            if self.remove_agent_at(d, terminations) {
                self.dragon = None;
                self.key = Some(d);
            }
        }
    }

    fn resolve_pinks(&mut self, terminations: &mut Vec<AgentId>) {
        for i in 0..self.pinks.len() {
            let p = self.pinks[i];
            while self.remove_agent_at(p, terminations) {}
        }
    }
}

fn push_optional(o: &mut Vec<f64>, me: Cell, target: Option<Cell>, size: i32) {
    match target {
        Some(c) => {
            o.extend(me.relative(c, size));
            o.push(1.0);
        }
        None => o.extend([0.0, 0.0, 0.0]),
    }
}

impl GroupEnv for DungeonRun {
    fn name(&self) -> &'static str {
        "dungeon_run"
    }

    fn kinds(&self) -> Vec<AgentKind> {
        vec![self.kind()]
    }

    fn max_agents(&self) -> usize {
        self.cfg.agents
    }

    fn reset(&mut self, seed: u64) -> Reset {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = self.random_layout();
        let word = self.rng.gen::<u64>();
        self.reset_with_layout(&layout, word).expect("generated layouts are valid")
    }

    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        check_actions(&self.active(), actions)?;
        let size = self.cfg.size;
        let mut terminations = Vec::new();
        for (id, cell) in self.agents.iter_mut() {
            *cell = Move::from_index(actions[id]).apply(*cell, size);
        }
        self.resolve_dragon(&mut terminations);
        if let Some(d) = self.dragon {
            if self.rng.gen::<f64>() < self.cfg.dragon_move_prob {
                self.dragon = Some(d.toward(self.portal));
                self.resolve_dragon(&mut terminations);
            }
        }
        self.resolve_pinks(&mut terminations);
        for i in 0..self.pinks.len() {
            let p = self.pinks[i];
            let target = self.agents.values().copied().min_by_key(|a| (a.manhattan(p), *a));
            if let Some(target) = target {
                if self.rng.gen::<f64>() < self.cfg.pink_move_prob {
                    self.pinks[i] = p.toward(target);
                }
            }
        }
        self.resolve_pinks(&mut terminations);
        if let Some(k) = self.key {
            if let Some((&id, _)) = self.agents.iter().find(|(_, &c)| c == k) {
                self.holder = Some(id);
                self.key = None;
            }
        }

        let escaped = self.holder.is_some_and(|h| self.agents.get(&h) == Some(&self.door));
        let lost = self.dragon == Some(self.portal) || self.agents.is_empty();
        self.t += 1;
        let timeout = self.t >= self.cfg.time_limit;
        self.done = escaped || lost || timeout;
        Ok(StepResult {
            observations: self.observations(),
            group_reward: if escaped { 1.0 } else { 0.0 },
            terminations,
            spawns: Vec::new(),
            episode_done: self.done,
            interrupted: timeout && !escaped && !lost,
        })
    }

    fn active(&self) -> Vec<AgentHandle> {
        let kind = self.kind();
        self.agents.keys().map(|&id| AgentHandle { id, kind }).collect()
    }

    fn snapshot(&self) -> Vec<u64> {
        let none = u64::MAX;
        let mut s = vec![
            self.t as u64,
            self.done as u64,
            self.dragon.map_or(none, Cell::word),
            self.key.map_or(none, Cell::word),
            self.holder.map_or(none, |h| h.0 as u64),
            self.portal.word(),
            self.door.word(),
        ];
        for (id, c) in &self.agents {
            s.extend([id.0 as u64, c.word()]);
        }
        s.extend(self.pinks.iter().map(|c| c.word()));
        s.extend(rng_words(&self.rng));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> DungeonRunConfig {
        DungeonRunConfig {
            dragon_move_prob: 0.0,
            ..DungeonRunConfig::default()
        }
    }

    fn layout() -> DungeonRunLayout {
        DungeonRunLayout {
            agents: vec![Cell::new(1, 1), Cell::new(1, 2), Cell::new(5, 5)],
            dragon: Cell::new(2, 1),
            portal: Cell::new(6, 0),
            door: Cell::new(0, 3),
            pinks: vec![],
        }
    }

    fn acts(pairs: &[(u32, usize)]) -> BTreeMap<AgentId, usize> {
        pairs.iter().map(|&(i, a)| (AgentId(i), a)).collect()
    }

    #[test]
    fn reset_is_seeded() {
        let mut env = DungeonRun::new(DungeonRunConfig::default());
        let a = env.reset(11);
        assert_eq!(a.agents.len(), 3);
        assert!(a.observations.values().all(|o| o.len() == 23));
        assert_eq!(env.reset(11), a);
        assert!(env.dragon().unwrap().manhattan(env.portal) >= 6);
    }

    #[test]
    fn sacrifice_drops_key_and_teammate_escapes() {
        let mut env = DungeonRun::new(still());
        env.reset_with_layout(&layout(), 0).unwrap();
        // agent0 walks into the dragon
        let r = env.step(&acts(&[(0, 4), (1, 0), (2, 0)])).unwrap();
        assert_eq!(r.terminations, vec![AgentId(0)]);
        assert_eq!(env.dragon(), None);
        assert_eq!(env.key_on_floor(), Some(Cell::new(2, 1)));
        assert!(!r.observations.contains_key(&AgentId(0)));
        assert_eq!(r.group_reward, 0.0);
        // agent1 takes the key: right, down
        env.step(&acts(&[(1, 4), (2, 0)])).unwrap();
        let r = env.step(&acts(&[(1, 2), (2, 0)])).unwrap();
        assert_eq!(env.key_holder(), Some(AgentId(1)));
        assert!(!r.episode_done);
        // then to the door at (0, 3)
        for a in [3, 3, 1] {
            env.step(&acts(&[(1, a), (2, 0)])).unwrap();
        }
        let r = env.step(&acts(&[(1, 1), (2, 0)])).unwrap();
        assert_eq!(r.group_reward, 1.0);
        assert!(r.episode_done && !r.interrupted);
    }

    #[test]
    fn door_without_key_does_nothing() {
        let mut env = DungeonRun::new(still());
        env.reset_with_layout(&layout(), 0).unwrap();
        env.step(&acts(&[(0, 0), (1, 3), (2, 0)])).unwrap();
        let r = env.step(&acts(&[(0, 0), (1, 1), (2, 0)])).unwrap();
        assert_eq!(env.agent_cells()[&AgentId(1)], Cell::new(0, 3));
        assert_eq!(r.group_reward, 0.0);
        assert!(!r.episode_done);
    }

    #[test]
    fn simultaneous_contact_takes_lowest_id() {
        let mut env = DungeonRun::new(still());
        let mut l = layout();
        l.agents = vec![Cell::new(3, 1), Cell::new(2, 2), Cell::new(5, 5)];
        env.reset_with_layout(&l, 0).unwrap();
        let r = env.step(&acts(&[(0, 3), (1, 2), (2, 0)])).unwrap();
        assert_eq!(r.terminations, vec![AgentId(0)]);
        // agent1 stands on the dropped key and picks it up at once
        assert_eq!(env.key_holder(), Some(AgentId(1)));
    }

    #[test]
    fn dragon_reaching_portal_ends_episode() {
        let cfg = DungeonRunConfig {
            dragon_move_prob: 1.0,
            ..DungeonRunConfig::default()
        };
        let mut env = DungeonRun::new(cfg);
        let mut l = layout();
        l.dragon = Cell::new(4, 0);
        env.reset_with_layout(&l, 0).unwrap();
        let stay = acts(&[(0, 0), (1, 0), (2, 0)]);
        assert!(!env.step(&stay).unwrap().episode_done);
        let r = env.step(&stay).unwrap();
        assert!(r.episode_done && !r.interrupted);
        assert_eq!(r.group_reward, 0.0);
    }

    #[test]
    fn time_limit_interrupts() {
        let mut env = DungeonRun::new(still());
        env.reset_with_layout(&layout(), 0).unwrap();
        let stay = acts(&[(0, 0), (1, 0), (2, 0)]);
        for t in 0..60 {
            let r = env.step(&stay).unwrap();
            assert_eq!(r.episode_done, t == 59);
            assert_eq!(r.interrupted, t == 59);
        }
    }

    #[test]
    fn pink_dragon_eats_agent() {
        let cfg = DungeonRunConfig {
            dragon_move_prob: 0.0,
            pink_dragons: 1,
            pink_move_prob: 0.0,
            ..DungeonRunConfig::default()
        };
        let mut env = DungeonRun::new(cfg);
        let mut l = layout();
        l.pinks = vec![Cell::new(1, 3)];
        env.reset_with_layout(&l, 0).unwrap();
        let r = env.step(&acts(&[(0, 0), (1, 1), (2, 0)])).unwrap();
        assert_eq!(r.terminations, vec![AgentId(1)]);
        assert!(r.observations[&AgentId(0)][20..23].iter().any(|&x| x != 0.0));
    }
}
