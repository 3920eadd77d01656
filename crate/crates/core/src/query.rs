//! Candidate segment pairs from the replay buffer and disagreement-based selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::reward::{RewardEnsemble, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySchedule {
    pub total_budget: usize,
    pub per_session: usize,
    /// Online environment steps between sessions.
    pub interval: usize,
    /// Candidates scored per session; defaults to ten times `per_session`.
    pub pool_size: Option<usize>,
    pub segment_len: usize,
}

impl Default for QuerySchedule {
    fn default() -> Self {
        Self {
            total_budget: 200,
            per_session: 20,
            interval: 1000,
            pool_size: None,
            segment_len: 20,
        }
    }
}

impl QuerySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.per_session == 0 || self.per_session > self.total_budget {
            return Err(Error::InvalidConfig(format!(
                "per-session quota {} must be in 1..={}",
                self.per_session, self.total_budget
            )));
        }
        if self.interval == 0 || self.segment_len == 0 {
            return Err(Error::InvalidConfig(
                "interval and segment length must be positive".into(),
            ));
        }
        if self.pool() < self.per_session {
            return Err(Error::InvalidConfig("candidate pool smaller than the quota".into()));
        }
        Ok(())
    }

    pub fn pool(&self) -> usize {
        self.pool_size.unwrap_or(10 * self.per_session)
    }

    /// Labels to request in the session after `given` labels were collected.
    pub fn quota(&self, given: usize) -> usize {
        self.per_session.min(self.total_budget.saturating_sub(given))
    }
}

/// The `h` buffer entries starting at `start` as a segment.
pub fn segment_at(buffer: &ReplayBuffer, start: usize, h: usize) -> Result<Segment> {
    let first = buffer
        .get(start)
        .ok_or_else(|| Error::InvalidInput(format!("segment start {start} out of range")))?;
    let (sd, ad) = (first.transition.state.len(), first.transition.action.len());
    let mut states = Vec::with_capacity(h * sd);
    let mut actions = Vec::with_capacity(h * ad);
    let mut rewards = Vec::with_capacity(h);
    for i in start..start + h {
        let e = buffer
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("segment end {} out of range", start + h)))?;
        states.extend_from_slice(&e.transition.state);
        actions.extend_from_slice(&e.transition.action);
        rewards.push(e.true_reward);
    }
    Segment::new(sd, ad, states, actions, rewards)
}

/// A candidate pair with the buffer positions it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub seg0: Segment,
    pub seg1: Segment,
    pub starts: (usize, usize),
}

/// `n` pairs of length-`h` windows drawn uniformly, with replacement, from
/// windows lying inside single episodes.
pub fn sample_segment_pairs<R: Rng>(buffer: &ReplayBuffer, n: usize, h: usize, rng: &mut R) -> Result<Vec<Candidate>> {
    let starts = buffer.window_starts(h);
    if starts.is_empty() {
        log::warn!("no episode window of length {h} in the buffer");
        return Ok(Vec::new());
    }
    (0..n)
        .map(|_| {
            let a = starts[rng.random_range(0..starts.len())];
            let b = starts[rng.random_range(0..starts.len())];
            Ok(Candidate {
                seg0: segment_at(buffer, a, h)?,
                seg1: segment_at(buffer, b, h)?,
                starts: (a, b),
            })
        })
        .collect()
}

/// Population standard deviation of the members' preference probabilities.
pub fn disagreement(ens: &RewardEnsemble, seg0: &Segment, seg1: &Segment) -> Result<f64> {
    let p = ens.member_probs(seg0, seg1)?;
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    Ok((p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Indices of the `m` most disputed candidates, highest first, ties by index.
pub fn disagreement_select(ens: &RewardEnsemble, candidates: &[Candidate], m: usize) -> Result<Vec<usize>> {
    if m > candidates.len() {
        return Err(Error::InvalidInput(format!(
            "asked for {m} of {} candidates",
            candidates.len()
        )));
    }
    if ens.len() == 1 {
        log::warn!("single-member ensemble has no disagreement; taking candidates in order");
        return Ok((0..m).collect());
    }
    let scores = candidates
        .iter()
        .map(|c| disagreement(ens, &c.seg0, &c.seg1))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_descending(&scores, m))
}

/// First `m` indices of `scores` in descending order, ties by ascending index.
pub fn rank_descending(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}
