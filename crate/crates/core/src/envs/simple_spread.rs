//! Cooperative navigation in the particle world: cover every landmark
//! without bumping into teammates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{check_actions, rng_words, AgentHandle, EnvError, GroupEnv, Reset, StepResult};
use crate::spaces::{ActionSpace, ActionSpaceId, AgentId, AgentKind, ObservationSpace, SpaceId};

const DT: f64 = 0.1;
const DAMPING: f64 = 0.25;
const SENSITIVITY: f64 = 5.0;
const CONTACT_FORCE: f64 = 1e2;
const CONTACT_MARGIN: f64 = 1e-3;
const BOUND: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleSpreadConfig {
    pub agents: usize,
    pub landmarks: usize,
    pub episode_length: usize,
    pub agent_size: f64,
    pub collision_penalty: f64,
}

impl Default for SimpleSpreadConfig {
    fn default() -> Self {
        SimpleSpreadConfig {
            agents: 3,
            landmarks: 3,
            episode_length: 25,
            agent_size: 0.15,
            collision_penalty: 1.0,
        }
    }
}

/// `−Σ_landmarks min_agent ‖p_agent − p_landmark‖ − penalty · #colliding pairs`,
/// where a pair collides when closer than `collision_radius`.
pub fn simple_spread_reward(
    agents: &[[f64; 2]],
    landmarks: &[[f64; 2]],
    collision_radius: f64,
    penalty: f64,
) -> f64 {
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let cover: f64 = landmarks
        .iter()
        .map(|&l| agents.iter().map(|&a| dist(a, l)).fold(f64::INFINITY, f64::min))
        .sum();
    let mut collisions = 0usize;
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            if dist(agents[i], agents[j]) < collision_radius {
                collisions += 1;
            }
        }
    }
    -cover - penalty * collisions as f64
}

#[derive(Debug, Clone)]
pub struct SimpleSpread {
    cfg: SimpleSpreadConfig,
    rng: ChaCha8Rng,
    pos: Vec<[f64; 2]>,
    vel: Vec<[f64; 2]>,
    landmarks: Vec<[f64; 2]>,
    t: usize,
    done: bool,
}

impl SimpleSpread {
    pub fn new(cfg: SimpleSpreadConfig) -> Self {
        SimpleSpread {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(0),
            pos: Vec::new(),
            vel: Vec::new(),
            landmarks: Vec::new(),
            t: 0,
            done: true,
        }
    }

    pub fn kind(&self) -> AgentKind {
        AgentKind {
            observation: ObservationSpace {
                id: SpaceId(0),
                dim: 4 + 2 * self.cfg.landmarks + 2 * (self.cfg.agents - 1),
            },
            action: ActionSpace {
                id: ActionSpaceId(0),
                n: 5,
            },
        }
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.pos
    }

    pub fn landmarks(&self) -> &[[f64; 2]] {
        &self.landmarks
    }

    /// Places agents and landmarks explicitly, with zero velocities.
    pub fn set_state(&mut self, agents: &[[f64; 2]], landmarks: &[[f64; 2]]) -> Result<(), EnvError> {
        if agents.len() != self.cfg.agents || landmarks.len() != self.cfg.landmarks {
            return Err(EnvError::Layout(format!(
                "expected {} agents and {} landmarks",
                self.cfg.agents, self.cfg.landmarks
            )));
        }
        self.pos = agents.to_vec();
        self.vel = vec![[0.0; 2]; agents.len()];
        self.landmarks = landmarks.to_vec();
        self.t = 0;
        self.done = false;
        Ok(())
    }

    fn observe(&self, i: usize) -> Vec<f64> {
        let p = self.pos[i];
        let mut o = Vec::with_capacity(self.kind().observation.dim);
        o.extend_from_slice(&self.vel[i]);
        o.extend_from_slice(&p);
        for l in &self.landmarks {
            o.extend_from_slice(&[l[0] - p[0], l[1] - p[1]]);
        }
        for (j, q) in self.pos.iter().enumerate() {
            if j != i {
                o.extend_from_slice(&[q[0] - p[0], q[1] - p[1]]);
            }
        }
        o
    }

    fn observations(&self) -> BTreeMap<AgentId, Vec<f64>> {
        (0..self.cfg.agents).map(|i| (AgentId(i as u32), self.observe(i))).collect()
    }

    fn contact_forces(&self) -> Vec<[f64; 2]> {
        let n = self.pos.len();
        let mut f = vec![[0.0; 2]; n];
        let min_dist = 2.0 * self.cfg.agent_size;
        for i in 0..n {
            for j in i + 1..n {
                let d = [self.pos[i][0] - self.pos[j][0], self.pos[i][1] - self.pos[j][1]];
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if dist < 1e-12 {
                    continue;
                }
                // softplus penetration keeps the force smooth at contact
                let x = -(dist - min_dist) / CONTACT_MARGIN;
                let penetration = (x.max(0.0) + (-x.abs()).exp().ln_1p()) * CONTACT_MARGIN;
                for k in 0..2 {
                    let push = CONTACT_FORCE * d[k] / dist * penetration;
                    f[i][k] += push;
                    f[j][k] -= push;
                }
            }
        }
        f
    }

    pub fn reward(&self) -> f64 {
        simple_spread_reward(
            &self.pos,
            &self.landmarks,
            2.0 * self.cfg.agent_size,
            self.cfg.collision_penalty,
        )
    }
}

impl GroupEnv for SimpleSpread {
    fn name(&self) -> &'static str {
        "simple_spread"
    }

    fn kinds(&self) -> Vec<AgentKind> {
        vec![self.kind()]
    }

    fn max_agents(&self) -> usize {
        self.cfg.agents
    }

    fn reset(&mut self, seed: u64) -> Reset {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut self.rng;
        self.pos = (0..self.cfg.agents)
            .map(|_| [rng.gen_range(-BOUND..BOUND), rng.gen_range(-BOUND..BOUND)])
            .collect();
        self.landmarks = (0..self.cfg.landmarks)
            .map(|_| [0.9 * rng.gen_range(-BOUND..BOUND), 0.9 * rng.gen_range(-BOUND..BOUND)])
            .collect();
        self.vel = vec![[0.0; 2]; self.cfg.agents];
        self.t = 0;
        self.done = false;
        Reset {
            agents: self.active(),
            observations: self.observations(),
        }
    }

    fn step(&mut self, actions: &BTreeMap<AgentId, usize>) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        check_actions(&self.active(), actions)?;
        let forces = self.contact_forces();
        for i in 0..self.cfg.agents {
            let u = match actions[&AgentId(i as u32)] {
                1 => [1.0, 0.0],
                2 => [-1.0, 0.0],
                3 => [0.0, 1.0],
                4 => [0.0, -1.0],
                _ => [0.0, 0.0],
            };
            for k in 0..2 {
                let v = self.vel[i][k] * (1.0 - DAMPING) + (u[k] * SENSITIVITY + forces[i][k]) * DT;
                let p = self.pos[i][k] + v * DT;
                if p.abs() > BOUND {
                    self.pos[i][k] = p.clamp(-BOUND, BOUND);
                    self.vel[i][k] = 0.0;
                } else {
                    self.pos[i][k] = p;
                    self.vel[i][k] = v;
                }
            }
        }
        self.t += 1;
        self.done = self.t >= self.cfg.episode_length;
        Ok(StepResult {
            observations: self.observations(),
            group_reward: self.reward(),
            terminations: Vec::new(),
            spawns: Vec::new(),
            episode_done: self.done,
            interrupted: self.done,
        })
    }

    fn active(&self) -> Vec<AgentHandle> {
        if self.pos.is_empty() {
            return Vec::new();
        }
        let kind = self.kind();
        (0..self.cfg.agents)
            .map(|i| AgentHandle {
                id: AgentId(i as u32),
                kind,
            })
            .collect()
    }

    fn snapshot(&self) -> Vec<u64> {
        let mut s = vec![self.t as u64, self.done as u64];
        for v in self.pos.iter().chain(&self.vel).chain(&self.landmarks) {
            s.extend(v.iter().map(|x| x.to_bits()));
        }
        s.extend(rng_words(&self.rng));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(a: usize) -> BTreeMap<AgentId, usize> {
        (0..3).map(|i| (AgentId(i), a)).collect()
    }

    #[test]
    fn reset_fields_three_agents() {
        let mut env = SimpleSpread::new(SimpleSpreadConfig::default());
        let r = env.reset(4);
        assert_eq!(r.agents.len(), 3);
        assert_eq!(env.landmarks().len(), 3);
        assert!(r.observations.values().all(|o| o.len() == 14));
        assert_eq!(env.reset(4), r);
    }

    #[test]
    fn covered_landmarks_score_zero() {
        let lm = [[-0.6, 0.0], [0.0, 0.5], [0.6, -0.2]];
        assert_eq!(simple_spread_reward(&lm, &lm, 0.3, 1.0), 0.0);
    }

    #[test]
    fn stacked_agents_hand_geometry() {
        let lm = [[0.0, 0.0], [0.3, 0.4], [-0.6, 0.8]];
        let agents = [[0.0, 0.0]; 3];
        let r = simple_spread_reward(&agents, &lm, 0.3, 1.0);
        assert!((r - (-(0.5 + 1.0) - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn reward_is_translation_invariant() {
        let lm = [[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]];
        let ag = [[0.0, 0.1], [0.2, 0.2], [-0.4, -0.1]];
        let shift = |v: &[[f64; 2]]| v.iter().map(|p| [p[0] + 3.0, p[1] - 1.5]).collect::<Vec<_>>();
        let a = simple_spread_reward(&ag, &lm, 0.3, 1.0);
        let b = simple_spread_reward(&shift(&ag), &shift(&lm), 0.3, 1.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn agents_on_landmarks_stay_at_zero_reward() {
        let mut env = SimpleSpread::new(SimpleSpreadConfig::default());
        let lm = [[-0.6, 0.0], [0.0, 0.5], [0.6, -0.2]];
        env.set_state(&lm, &lm).unwrap();
        let r = env.step(&all(0)).unwrap();
        assert_eq!(r.group_reward, 0.0);
    }

    #[test]
    fn episode_truncates_after_25_steps() {
        let mut env = SimpleSpread::new(SimpleSpreadConfig::default());
        env.reset(0);
        for t in 0..25 {
            let r = env.step(&all(1)).unwrap();
            assert_eq!(r.episode_done, t == 24);
            assert_eq!(r.interrupted, t == 24);
            assert!(env.positions().iter().all(|p| p[0].abs() <= 1.0 && p[1].abs() <= 1.0));
        }
        assert_eq!(env.step(&all(0)), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn acceleration_moves_right() {
        let mut env = SimpleSpread::new(SimpleSpreadConfig::default());
        env.set_state(&[[-0.8, -0.8], [0.0, 0.8], [0.8, 0.0]], &[[0.0; 2]; 3]).unwrap();
        env.step(&all(1)).unwrap();
        // v = 5 · 0.1 = 0.5, p += 0.5 · 0.1
        assert!((env.positions()[0][0] - (-0.75)).abs() < 1e-12);
        assert!((env.positions()[0][1] - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn overlapping_agents_are_pushed_apart() {
        let mut env = SimpleSpread::new(SimpleSpreadConfig::default());
        env.set_state(&[[0.0, 0.0], [0.1, 0.0], [0.8, 0.8]], &[[0.0; 2]; 3]).unwrap();
        env.step(&all(0)).unwrap();
        let p = env.positions();
        assert!(p[0][0] < 0.0 && p[1][0] > 0.1);
    }

    #[test]
    fn wrong_action_sets_rejected() {
        let mut env = SimpleSpread::new(SimpleSpreadConfig::default());
        env.reset(1);
        let mut a = all(0);
        a.remove(&AgentId(2));
        assert_eq!(env.step(&a), Err(EnvError::MissingAction(AgentId(2))));
        let mut a = all(0);
        a.insert(AgentId(9), 0);
        assert_eq!(env.step(&a), Err(EnvError::UnexpectedAction(AgentId(9))));
        assert!(matches!(env.step(&all(5)), Err(EnvError::ActionOutOfRange { .. })));
    }
}
