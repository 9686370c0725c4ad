//! A relay on a grid: the newest agent fetches the orb and presses the
//! button, which spawns the next orb and the next agent.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::grid::{free_cell, Cell, Move};
use crate::envs::{check_actions, rng_words, AgentHandle, EnvError, GroupEnv, Reset, StepResult};
use crate::spaces::{ActionSpace, ActionSpaceId, AgentId, AgentKind, ObservationSpace, SpaceId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatonRelayConfig {
    pub size: i32,
    /// Orbs to collect before the episode ends.
    pub orbs: usize,
    pub time_limit: usize,
    /// Charged per existing agent per step.
    pub agent_penalty: f64,
}

impl Default for BatonRelayConfig {
    fn default() -> Self {
        BatonRelayConfig {
            size: 6,
            orbs: 5,
            time_limit: 150,
            agent_penalty: 0.000125,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatonRelayLayout {
    pub spawn: Cell,
    pub button: Cell,
    pub exit: Cell,
    pub orb: Cell,
}

#[derive(Debug, Clone)]
pub struct BatonRelay {
    cfg: BatonRelayConfig,
    rng: ChaCha8Rng,
    layout: BatonRelayLayout,
    agents: BTreeMap<AgentId, Cell>,
    latest: AgentId,
    next_id: u32,
    orb: Option<Cell>,
    carrying: bool,
    collected: usize,
    t: usize,
    done: bool,
}

impl BatonRelay {
    pub fn new(cfg: BatonRelayConfig) -> Self {
        let origin = Cell::new(0, 0);
        BatonRelay {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(0),
            layout: BatonRelayLayout {
                spawn: origin,
                button: origin,
                exit: origin,
                orb: origin,
            },
            agents: BTreeMap::new(),
            latest: AgentId(0),
            next_id: 0,
            orb: None,
            carrying: false,
            collected: 0,
            t: 0,
            done: true,
        }
    }

    pub fn kind(&self) -> AgentKind {
        AgentKind {
            observation: ObservationSpace {
                id: SpaceId(0),
                dim: 22,
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

    pub fn latest(&self) -> AgentId {
        self.latest
    }

    pub fn orb(&self) -> Option<Cell> {
        self.orb
    }

    pub fn carrying(&self) -> bool {
        self.carrying
    }

    pub fn collected(&self) -> usize {
        self.collected
    }

    pub fn reset_with_layout(&mut self, layout: BatonRelayLayout, seed: u64) -> Result<Reset, EnvError> {
        let cells = [layout.spawn, layout.button, layout.exit, layout.orb];
        if cells.iter().any(|c| !c.in_bounds(self.cfg.size)) {
            return Err(EnvError::Layout(format!("{layout:?} leaves the grid")));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if cells[i] == cells[j] {
                    return Err(EnvError::Layout("spawn, button, exit and orb must differ".into()));
                }
            }
        }
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.layout = layout;
        self.agents = BTreeMap::from([(AgentId(0), layout.spawn)]);
        self.latest = AgentId(0);
        self.next_id = 1;
        self.orb = Some(layout.orb);
        self.carrying = false;
        self.collected = 0;
        self.t = 0;
        self.done = false;
        Ok(Reset {
            agents: self.active(),
            observations: self.observations(),
        })
    }

    fn observe(&self, id: AgentId) -> Vec<f64> {
        let size = self.cfg.size;
        let me = self.agents[&id];
        let is_latest = id == self.latest;
        let mut o = Vec::with_capacity(22);
        o.extend(me.normalized(size));
        push_optional(&mut o, me, self.orb, size);
        o.extend(me.relative(self.layout.button, size));
        o.extend(me.relative(self.layout.exit, size));
        o.extend(me.relative(self.layout.spawn, size));
        o.push(is_latest as u8 as f64);
        o.push((is_latest && self.carrying) as u8 as f64);
        o.push(self.carrying as u8 as f64);
        o.push(self.agents.len() as f64 / self.max_agents() as f64);
        o.push((self.cfg.orbs - self.collected) as f64 / self.cfg.orbs as f64);
        let nearest = self
            .agents
            .iter()
            .filter(|(&other, _)| other != id)
            .map(|(_, &c)| c)
            .min_by_key(|c| (c.manhattan(me), *c));
        push_optional(&mut o, me, nearest, size);
        let latest = if is_latest { None } else { self.agents.get(&self.latest).copied() };
        push_optional(&mut o, me, latest, size);
        o
    }

    fn observations(&self) -> BTreeMap<AgentId, Vec<f64>> {
        self.agents.keys().map(|&id| (id, self.observe(id))).collect()
    }

    fn handle(&self, id: AgentId) -> AgentHandle {
        AgentHandle { id, kind: self.kind() }
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

impl GroupEnv for BatonRelay {
    fn name(&self) -> &'static str {
        "baton_relay"
    }

    fn kinds(&self) -> Vec<AgentKind> {
        vec![self.kind()]
    }

    fn max_agents(&self) -> usize {
        self.cfg.orbs + 1
    }

    fn reset(&mut self, seed: u64) -> Reset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = self.cfg.size;
        let spawn = free_cell(&mut rng, size, &[]);
        let button = free_cell(&mut rng, size, &[spawn]);
        let exit = free_cell(&mut rng, size, &[spawn, button]);
        let orb = free_cell(&mut rng, size, &[spawn, button, exit]);
        let layout = BatonRelayLayout {
            spawn,
            button,
            exit,
            orb,
        };
        let word = rand::Rng::gen::<u64>(&mut rng);
        self.reset_with_layout(layout, word).expect("generated layouts are valid")
    }

    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        check_actions(&self.active(), actions)?;
        let size = self.cfg.size;
        let mut reward = -self.cfg.agent_penalty * self.agents.len() as f64;

        // agents are bulky: moves resolve in id order and never share a cell
        let ids: Vec<AgentId> = self.agents.keys().copied().collect();
        for id in &ids {
            let from = self.agents[id];
            let to = Move::from_index(actions[id]).apply(from, size);
            if !self.agents.iter().any(|(other, &c)| other != id && c == to) {
                self.agents.insert(*id, to);
            }
        }

        let mut terminations = Vec::new();
        let exit = self.layout.exit;
        self.agents.retain(|&id, &mut c| {
            let leaving = c == exit;
            if leaving {
                terminations.push(id);
            }
            !leaving
        });

        let mut spawns = Vec::new();
        let mut finished = false;
        if let Some(&at) = self.agents.get(&self.latest) {
            if !self.carrying && self.orb == Some(at) {
                self.carrying = true;
                self.orb = None;
                self.collected += 1;
                reward += 1.0;
                finished = self.collected >= self.cfg.orbs;
            } else if self.carrying && at == self.layout.button {
                self.carrying = false;
                let occupied: Vec<Cell> = self.agents.values().copied().collect();
                let spawn_at = if occupied.contains(&self.layout.spawn) {
                    let mut taken = occupied.clone();
                    taken.extend([self.layout.button, self.layout.exit]);
                    free_cell(&mut self.rng, size, &taken)
                } else {
                    self.layout.spawn
                };
                let id = AgentId(self.next_id);
                self.next_id += 1;
                self.agents.insert(id, spawn_at);
                self.latest = id;
                spawns.push(self.handle(id));
                let mut taken: Vec<Cell> = self.agents.values().copied().collect();
                taken.extend([self.layout.button, self.layout.exit, self.layout.spawn]);
                self.orb = Some(free_cell(&mut self.rng, size, &taken));
            }
        }

        let lost = self.agents.is_empty();
        self.t += 1;
        let timeout = self.t >= self.cfg.time_limit;
        self.done = finished || lost || timeout;
        Ok(StepResult {
            observations: self.observations(),
            group_reward: reward,
            terminations,
            spawns,
            episode_done: self.done,
            interrupted: timeout && !finished && !lost,
        })
    }

    fn active(&self) -> Vec<AgentHandle> {
        self.agents.keys().map(|&id| self.handle(id)).collect()
    }

    fn snapshot(&self) -> Vec<u64> {
        let mut s = vec![
            self.t as u64,
            self.done as u64,
            self.latest.0 as u64,
            self.next_id as u64,
            self.orb.map_or(u64::MAX, Cell::word),
            self.carrying as u64,
            self.collected as u64,
            self.layout.spawn.word(),
            self.layout.button.word(),
            self.layout.exit.word(),
        ];
        for (id, c) in &self.agents {
            s.extend([id.0 as u64, c.word()]);
        }
        s.extend(rng_words(&self.rng));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAYOUT: BatonRelayLayout = BatonRelayLayout {
        spawn: Cell::new(0, 0),
        button: Cell::new(0, 2),
        exit: Cell::new(5, 5),
        orb: Cell::new(2, 0),
    };

    fn acts(pairs: &[(u32, usize)]) -> BTreeMap<AgentId, usize> {
        pairs.iter().map(|&(i, a)| (AgentId(i), a)).collect()
    }

    fn relay() -> BatonRelay {
        let mut env = BatonRelay::new(BatonRelayConfig::default());
        env.reset_with_layout(LAYOUT, 3).unwrap();
        env
    }

    /// Collects the first orb and presses the button with agent 0.
    fn first_handoff(env: &mut BatonRelay) -> StepResult {
        env.step(&acts(&[(0, 4)])).unwrap();
        let r = env.step(&acts(&[(0, 4)])).unwrap();
        assert_eq!(r.group_reward, 1.0 - 0.000125);
        for a in [3, 1, 3] {
            env.step(&acts(&[(0, a)])).unwrap();
        }
        env.step(&acts(&[(0, 1)])).unwrap()
    }

    #[test]
    fn reset_spawns_one_agent() {
        let mut env = BatonRelay::new(BatonRelayConfig::default());
        let r = env.reset(2);
        assert_eq!(r.agents.len(), 1);
        assert!(r.observations[&AgentId(0)].len() == 22);
        assert_eq!(env.reset(2), r);
    }

    #[test]
    fn button_spawns_agent_and_orb() {
        let mut env = relay();
        let r = first_handoff(&mut env);
        assert_eq!(r.spawns.len(), 1);
        assert_eq!(r.spawns[0].id, AgentId(1));
        assert_eq!(env.latest(), AgentId(1));
        assert!(env.orb().is_some());
        assert!(r.observations.contains_key(&AgentId(1)));
        // two agents, nothing collected: penalty doubles
        let r = env.step(&acts(&[(0, 0), (1, 0)])).unwrap();
        assert!((r.group_reward + 0.00025).abs() < 1e-15);
    }

    #[test]
    fn only_newest_agent_interacts() {
        let mut env = relay();
        first_handoff(&mut env);
        let orb = env.orb().unwrap();
        // teleporting is not possible, so walk agent 0 onto the orb and back
        // to the button; neither touch counts
        let mut pos = env.agent_cells()[&AgentId(0)];
        let mut guard = 0;
        while pos != orb && guard < 20 {
            let next = pos.toward(orb);
            let a = if next.x > pos.x {
                4
            } else if next.x < pos.x {
                3
            } else if next.y > pos.y {
                1
            } else {
                2
            };
            let r = env.step(&acts(&[(0, a), (1, 0)])).unwrap();
            assert!(r.group_reward < 0.0);
            pos = env.agent_cells()[&AgentId(0)];
            guard += 1;
        }
        assert_eq!(pos, orb);
        assert_eq!(env.orb(), Some(orb));
        assert_eq!(env.collected(), 1);
    }

    #[test]
    fn agents_block_each_other() {
        let mut env = relay();
        first_handoff(&mut env);
        // agent 0 sits on the button (0, 2); agent 1 at spawn (0, 0)
        env.step(&acts(&[(0, 0), (1, 1)])).unwrap();
        assert_eq!(env.agent_cells()[&AgentId(1)], Cell::new(0, 1));
        env.step(&acts(&[(0, 0), (1, 1)])).unwrap();
        assert_eq!(env.agent_cells()[&AgentId(1)], Cell::new(0, 1));
    }

    #[test]
    fn exit_despawns_without_reward() {
        let mut env = BatonRelay::new(BatonRelayConfig::default());
        let layout = BatonRelayLayout {
            exit: Cell::new(1, 0),
            ..LAYOUT
        };
        env.reset_with_layout(layout, 0).unwrap();
        let r = env.step(&acts(&[(0, 4)])).unwrap();
        assert_eq!(r.terminations, vec![AgentId(0)]);
        assert_eq!(r.group_reward, -0.000125);
        assert!(r.episode_done && !r.interrupted);
    }

    #[test]
    fn episode_ends_after_last_orb() {
        let cfg = BatonRelayConfig {
            orbs: 1,
            ..BatonRelayConfig::default()
        };
        let mut env = BatonRelay::new(cfg);
        env.reset_with_layout(LAYOUT, 0).unwrap();
        env.step(&acts(&[(0, 4)])).unwrap();
        let r = env.step(&acts(&[(0, 4)])).unwrap();
        assert!(r.episode_done && !r.interrupted);
        assert_eq!(env.collected(), 1);
    }
}
