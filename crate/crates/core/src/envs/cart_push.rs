use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{clip_action, Transition, DT};
use crate::error::{Error, Result};

/// One-dimensional cart pushed toward a target position.
///
/// State `[x, v]`, same Euler dynamics as the point mass along one axis.
/// Reward is `-|x - target| - c a^2`; an episode succeeds when the final
/// position is within `success_tolerance` of the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartPushConfig {
    pub target: f64,
    pub horizon: usize,
    pub noise: f64,
    pub control_cost: f64,
    pub gain: f64,
    pub friction: f64,
    pub track: f64,
    pub success_tolerance: f64,
}

impl Default for CartPushConfig {
    fn default() -> Self {
        Self {
            target: 1.0,
            horizon: 100,
            noise: 0.0,
            control_cost: 0.1,
            gain: 2.0,
            friction: 1.0,
            track: 2.0,
            success_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CartPush {
    config: CartPushConfig,
    rng: ChaCha8Rng,
    state: Vec<f64>,
    t: usize,
}

impl CartPush {
    pub const STATE_DIM: usize = 2;
    pub const ACTION_DIM: usize = 1;

    pub fn new(config: CartPushConfig, seed: u64) -> Result<Self> {
        if config.horizon <= 1 {
            return Err(Error::InvalidConfig(format!(
                "cart_push horizon must exceed 1, got {}",
                config.horizon
            )));
        }
        if config.target.abs() > config.track {
            return Err(Error::InvalidConfig("target lies off the track".into()));
        }
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: vec![0.0; Self::STATE_DIM],
            t: 0,
        })
    }

    pub fn config(&self) -> &CartPushConfig {
        &self.config
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let x = self.rng.random_range(-1.5..=-0.5);
        self.state = vec![x, 0.0];
        self.t = 0;
        self.state.clone()
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let a = action[0].clamp(-1.0, 1.0);
        -(state[0] - self.config.target).abs() - self.config.control_cost * a * a
    }

    pub fn is_success(&self, state: &[f64]) -> bool {
        (state[0] - self.config.target).abs() < self.config.success_tolerance
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        let a = clip_action(action);
        let s = self.state.clone();
        let reward = self.reward(&s, &a);
        let c = &self.config;
        let mut x = s[0] + DT * s[1];
        let mut v = s[1] + DT * (c.gain * a[0] - c.friction * s[1]);
        if c.noise > 0.0 {
            v += Normal::new(0.0, c.noise)
                .expect("noise std is positive")
                .sample(&mut self.rng);
        }
        if x.abs() > c.track {
            x = x.clamp(-c.track, c.track);
            v = 0.0;
        }
        self.t += 1;
        let next = vec![x, v];
        self.state = next.clone();
        Ok(Transition {
            state: s,
            action: a,
            next_state: next,
            reward,
            done: self.t >= c.horizon,
            terminal: false,
        })
    }
}
