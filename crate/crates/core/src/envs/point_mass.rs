use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{clip_action, Transition, DT};
use crate::error::{Error, Result};

/// Planar point mass reaching a goal.
///
/// State is `[x, y, vx, vy]`. One step of explicit Euler with step `DT`:
///
/// ```text
/// p' = p + DT * v
/// v' = v + DT * (gain * a - friction * v) + noise
/// ```
///
/// Positions are confined to `[-arena, arena]^2`; hitting a wall zeroes the
/// velocity component along it. Reward is `-|p - goal| - c |a|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassConfig {
    pub goal: [f64; 2],
    pub horizon: usize,
    pub noise: f64,
    pub control_cost: f64,
    pub gain: f64,
    pub friction: f64,
    pub arena: f64,
    /// Initial positions are drawn uniformly from `[-init_range, init_range]^2`.
    pub init_range: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            goal: [0.0, 0.0],
            horizon: 100,
            noise: 0.0,
            control_cost: 0.1,
            gain: 2.0,
            friction: 1.0,
            arena: 2.0,
            init_range: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMass {
    config: PointMassConfig,
    rng: ChaCha8Rng,
    state: Vec<f64>,
    t: usize,
}

impl PointMass {
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;

    pub fn new(config: PointMassConfig, seed: u64) -> Result<Self> {
        if config.horizon <= 1 {
            return Err(Error::InvalidConfig(format!(
                "point_mass horizon must exceed 1, got {}",
                config.horizon
            )));
        }
        if config.goal.iter().any(|g| g.abs() > config.arena) {
            return Err(Error::InvalidConfig("goal lies outside the arena".into()));
        }
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: vec![0.0; Self::STATE_DIM],
            t: 0,
        })
    }

    pub fn config(&self) -> &PointMassConfig {
        &self.config
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Overwrites the state and restarts the episode clock.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state.to_vec();
        self.t = 0;
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let r = self.config.init_range;
        let x = self.rng.random_range(-r..=r);
        let y = self.rng.random_range(-r..=r);
        self.state = vec![x, y, 0.0, 0.0];
        self.t = 0;
        self.state.clone()
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let [gx, gy] = self.config.goal;
        let dist = ((state[0] - gx).powi(2) + (state[1] - gy).powi(2)).sqrt();
        let a = clip_action(action);
        -dist - self.config.control_cost * a.iter().map(|v| v * v).sum::<f64>()
    }

    /// Largest distance from the goal to any point of the arena.
    pub fn max_distance(&self) -> f64 {
        let l = self.config.arena;
        let [gx, gy] = self.config.goal;
        let dx = l + gx.abs();
        let dy = l + gy.abs();
        (dx * dx + dy * dy).sqrt()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        let a = clip_action(action);
        let s = self.state.clone();
        let reward = self.reward(&s, &a);
        let c = &self.config;
        let mut next = s.clone();
        for k in 0..2 {
            next[k] = s[k] + DT * s[k + 2];
            next[k + 2] = s[k + 2] + DT * (c.gain * a[k] - c.friction * s[k + 2]);
        }
        if c.noise > 0.0 {
            let normal = Normal::new(0.0, c.noise).expect("noise std is positive");
            for k in 2..4 {
                next[k] += normal.sample(&mut self.rng);
            }
        }
        for k in 0..2 {
            if next[k].abs() > c.arena {
                next[k] = next[k].clamp(-c.arena, c.arena);
                next[k + 2] = 0.0;
            }
        }
        self.t += 1;
        let done = self.t >= c.horizon;
        self.state = next.clone();
        Ok(Transition {
            state: s,
            action: a,
            next_state: next,
            reward,
            done,
            terminal: false,
        })
    }
}
