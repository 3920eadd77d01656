//! Toy continuous-control environments with known ground-truth rewards, and
//! random tabular MDPs for checking Q-function error bounds.

mod cart_push;
mod point_mass;
pub mod tabular;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub use cart_push::{CartPush, CartPushConfig};
pub use point_mass::{PointMass, PointMassConfig};

/// Integration step shared by the continuous environments.
pub const DT: f64 = 0.05;

/// One environment step.
///
/// `done` marks the last step of an episode. Both built-in environments only
/// end on the time limit, so `terminal` (a genuine absorbing state, which
/// stops bootstrapping) is always false for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    #[serde(default)]
    pub terminal: bool,
}

/// Environment settings shared by the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Standard deviation of Gaussian velocity noise per step.
    pub noise: f64,
    /// Weight `c` of the quadratic action cost.
    pub control_cost: f64,
    /// Goal position; point-mass uses both entries, cart-push the first.
    pub goal: Vec<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            noise: 0.0,
            control_cost: 0.1,
            goal: vec![0.0, 0.0],
        }
    }
}

/// The registry of built-in environments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Env {
    PointMass(PointMass),
    CartPush(CartPush),
}

pub const ENV_NAMES: &[&str] = &["point_mass", "cart_push"];

impl Env {
    pub fn make(name: &str, config: &EnvConfig, seed: u64) -> Result<Self> {
        match name {
            "point_mass" => {
                let goal = match config.goal.as_slice() {
                    [x, y, ..] => [*x, *y],
                    _ => return Err(Error::InvalidConfig("point_mass needs a two-dimensional goal".into())),
                };
                Ok(Env::PointMass(PointMass::new(
                    PointMassConfig {
                        goal,
                        horizon: config.horizon,
                        noise: config.noise,
                        control_cost: config.control_cost,
                        ..PointMassConfig::default()
                    },
                    seed,
                )?))
            }
            "cart_push" => Ok(Env::CartPush(CartPush::new(
                CartPushConfig {
                    horizon: config.horizon,
                    noise: config.noise,
                    control_cost: config.control_cost,
                    target: config.goal.first().copied().unwrap_or(1.0),
                    ..CartPushConfig::default()
                },
                seed,
            )?)),
            other => Err(Error::InvalidConfig(format!(
                "unknown environment {other:?}; known: {ENV_NAMES:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::PointMass(_) => "point_mass",
            Env::CartPush(_) => "cart_push",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::PointMass(_) => PointMass::STATE_DIM,
            Env::CartPush(_) => CartPush::STATE_DIM,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::PointMass(_) => PointMass::ACTION_DIM,
            Env::CartPush(_) => CartPush::ACTION_DIM,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::PointMass(e) => e.config().horizon,
            Env::CartPush(e) => e.config().horizon,
        }
    }

    /// Starts a new episode and returns its first state.
    pub fn reset(&mut self) -> Vec<f64> {
        match self {
            Env::PointMass(e) => e.reset(),
            Env::CartPush(e) => e.reset(),
        }
    }

    pub fn state(&self) -> &[f64] {
        match self {
            Env::PointMass(e) => e.state(),
            Env::CartPush(e) => e.state(),
        }
    }

    /// Advances the current episode. Actions are clipped to `[-1, 1]`.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        check_len("env action", self.action_dim(), action.len())?;
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::InvalidInput(format!("NaN action {action:?}")));
        }
        match self {
            Env::PointMass(e) => e.step(action),
            Env::CartPush(e) => e.step(action),
        }
    }

    /// Ground-truth reward `r(s, a)`.
    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        match self {
            Env::PointMass(e) => e.reward(state, action),
            Env::CartPush(e) => e.reward(state, action),
        }
    }

    /// Whether a final state counts as a success, for envs that define one.
    pub fn success(&self, final_state: &[f64]) -> Option<bool> {
        match self {
            Env::PointMass(_) => None,
            Env::CartPush(e) => Some(e.is_success(final_state)),
        }
    }

    /// Planar position used by trajectory viewers.
    pub fn render_position(&self, state: &[f64]) -> [f64; 2] {
        match self {
            Env::PointMass(_) => [state[0], state[1]],
            Env::CartPush(_) => [state[0], 0.0],
        }
    }
}

pub(crate) fn clip_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

/// Writes transitions as JSON lines.
pub fn write_transitions_jsonl<W: Write>(mut out: W, transitions: &[Transition]) -> Result<()> {
    for t in transitions {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_transitions_jsonl(input: &str) -> Result<Vec<Transition>> {
    input
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
