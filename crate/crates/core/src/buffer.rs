//! Replay buffer with in-place reward relabeling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};

/// A stored transition plus bookkeeping the learner never trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub transition: Transition,
    pub episode: u64,
    /// Index of the step within its episode.
    pub step: usize,
    /// Environment reward, kept for scripted teachers and evaluation only.
    pub true_reward: f64,
}

/// Column-major view of a sampled minibatch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    /// 0 for terminal transitions, 1 otherwise.
    pub not_terminal: Vec<f64>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let mut b = Batch::default();
        for t in items {
            if b.len == 0 {
                b.state_dim = t.state.len();
                b.action_dim = t.action.len();
            } else if t.state.len() != b.state_dim || t.action.len() != b.action_dim {
                return Err(Error::InvalidInput("mixed transition shapes in batch".into()));
            }
            b.states.extend_from_slice(&t.state);
            b.actions.extend_from_slice(&t.action);
            b.rewards.push(t.reward);
            b.next_states.extend_from_slice(&t.next_state);
            b.not_terminal.push(if t.terminal { 0.0 } else { 1.0 });
            b.len += 1;
        }
        Ok(b)
    }
}

/// Ring buffer of transitions, oldest evicted first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Entry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, transition: Transition, episode: u64, step: usize, true_reward: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry {
            transition,
            episode,
            step,
            true_reward,
        });
    }

    pub fn get(&self, i: usize) -> Option<&Entry> {
        self.entries.get(i)
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &Entry> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl ExactSizeIterator<Item = &mut Entry> {
        self.entries.iter_mut()
    }

    /// Uniform minibatch, with replacement.
    pub fn sample<R: Rng>(&self, rng: &mut R, batch_size: usize) -> Result<Batch> {
        if self.entries.is_empty() {
            return Err(Error::InsufficientData("cannot sample from an empty buffer".into()));
        }
        let n = self.entries.len();
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        Batch::from_transitions(idx.iter().map(|&i| &self.entries[i].transition))
    }

    /// Start indices of every length-`h` window lying inside one episode.
    pub fn window_starts(&self, h: usize) -> Vec<usize> {
        if h == 0 || self.entries.len() < h {
            return Vec::new();
        }
        let mut starts = Vec::new();
        // run = number of consecutive same-episode steps ending at i
        let mut run = 0usize;
        for i in 0..self.entries.len() {
            let contiguous = i > 0 && {
                let (prev, cur) = (&self.entries[i - 1], &self.entries[i]);
                prev.episode == cur.episode && prev.step + 1 == cur.step
            };
            run = if contiguous { run + 1 } else { 1 };
            if run >= h {
                starts.push(i + 1 - h);
            }
        }
        starts
    }
}
