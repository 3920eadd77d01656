//! Scripted annotators that label segment pairs from environment rewards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::reward::{Label, Segment};

/// Smoothing weight of the running average return.
pub const RETURN_EMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherKind {
    /// Prefers the larger return; exact ties are equal.
    #[default]
    Oracle,
    /// Oracle label flipped with probability `epsilon`.
    Mistake { epsilon: f64 },
    /// Equal label when returns differ by less than an adaptive margin.
    Equal {
        #[serde(default = "default_adapt")]
        epsilon_adapt: f64,
    },
    /// Declines pairs whose returns are both below an adaptive threshold.
    Skip {
        #[serde(default = "default_adapt")]
        epsilon_adapt: f64,
    },
    /// Oracle on returns discounted toward the end of the segment.
    Myopic { gamma: f64 },
    /// Labels come from people through the feedback service.
    Human,
}

fn default_adapt() -> f64 {
    0.1
}

impl TeacherKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TeacherKind::Mistake { epsilon } if !(0.0..=0.5).contains(&epsilon) => Err(Error::InvalidConfig(format!(
                "mistake rate must be in [0, 0.5], got {epsilon}"
            ))),
            TeacherKind::Myopic { gamma } if !(gamma > 0.0 && gamma < 1.0) => Err(Error::InvalidConfig(format!(
                "myopic discount must be in (0, 1), got {gamma}"
            ))),
            TeacherKind::Equal { epsilon_adapt } | TeacherKind::Skip { epsilon_adapt }
                if !(epsilon_adapt >= 0.0 && epsilon_adapt.is_finite()) =>
            {
                Err(Error::InvalidConfig(format!(
                    "adaptive margin must be non-negative, got {epsilon_adapt}"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Label(Label),
    Skip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedTeacher {
    kind: TeacherKind,
    episode_length: usize,
    running_return: Option<f64>,
    rng: ChaCha8Rng,
}

/// Label preferring the larger score; exact ties are equal.
pub fn compare(score0: f64, score1: f64) -> Label {
    if score0 > score1 {
        Label::Left
    } else if score1 > score0 {
        Label::Right
    } else {
        Label::Equal
    }
}

impl ScriptedTeacher {
    pub fn new(kind: TeacherKind, episode_length: usize, seed: u64) -> Result<Self> {
        kind.validate()?;
        if kind == TeacherKind::Human {
            return Err(Error::InvalidConfig("human feedback is not a scripted teacher".into()));
        }
        if episode_length == 0 {
            return Err(Error::InvalidConfig("episode length must be positive".into()));
        }
        Ok(Self {
            kind,
            episode_length,
            running_return: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn kind(&self) -> TeacherKind {
        self.kind
    }

    pub fn running_return(&self) -> Option<f64> {
        self.running_return
    }

    /// Folds a finished episode's return into the running average.
    pub fn update_running_return(&mut self, episode_return: f64) -> f64 {
        let r = match self.running_return {
            None => episode_return,
            Some(avg) => (1.0 - RETURN_EMA) * avg + RETURN_EMA * episode_return,
        };
        self.running_return = Some(r);
        r
    }

    // Expected return of an `h`-step segment scaled by the margin factor.
    fn adaptive_threshold(&self, h: usize, epsilon_adapt: f64) -> Option<f64> {
        self.running_return
            .map(|avg| h as f64 / self.episode_length as f64 * avg * epsilon_adapt)
    }

    pub fn label(&mut self, seg0: &Segment, seg1: &Segment) -> Result<Response> {
        check_len("paired segment length", seg0.len(), seg1.len())?;
        let (r0, r1) = (seg0.true_return(), seg1.true_return());
        if !(r0.is_finite() && r1.is_finite()) {
            return Err(Error::NonFinite("segment return".into()));
        }
        let h = seg0.len();
        let label = match self.kind {
            TeacherKind::Oracle => compare(r0, r1),
            TeacherKind::Mistake { epsilon } => {
                let flip = self.rng.random_bool(epsilon);
                let l = compare(r0, r1);
                if flip {
                    l.flipped()
                } else {
                    l
                }
            }
            TeacherKind::Equal { epsilon_adapt } => {
                // The margin is a width, so only its magnitude matters.
                let delta = self.adaptive_threshold(h, epsilon_adapt).unwrap_or(0.0).abs();
                if (r1 - r0).abs() < delta {
                    Label::Equal
                } else {
                    compare(r0, r1)
                }
            }
            TeacherKind::Skip { epsilon_adapt } => {
                if let Some(delta) = self.adaptive_threshold(h, epsilon_adapt) {
                    if r0.max(r1) < delta {
                        return Ok(Response::Skip);
                    }
                }
                compare(r0, r1)
            }
            TeacherKind::Myopic { gamma } => {
                let disc = |rs: &[f64]| {
                    rs.iter()
                        .enumerate()
                        .map(|(t, r)| gamma.powi((h - 1 - t) as i32) * r)
                        .sum::<f64>()
                };
                compare(disc(&seg0.true_rewards), disc(&seg1.true_rewards))
            }
            TeacherKind::Human => unreachable!("rejected at construction"),
        };
        Ok(Response::Label(label))
    }
}
