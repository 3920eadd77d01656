//! State-entropy exploration before feedback arrives, and the warm start of
//! the reward model on the normalized exploration bonus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::envs::{Env, Transition};
use crate::error::{check_len, Error, Result};
use crate::reward::RewardEnsemble;
use crate::sac::{concat_rows, SacAgent};

/// Distances below this are treated as this before taking a log.
pub const MIN_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntrinsicConfig {
    /// Neighbor rank used for the density estimate.
    pub k: usize,
    /// Normalized rewards are clipped to `(-1 + delta, 1 - delta)`.
    pub delta: f64,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self { k: 5, delta: 1e-8 }
    }
}

/// Distance from `s` to its `k`-th nearest neighbor among `archive` rows.
///
/// One exact copy of `s` in the archive counts as `s` itself and is skipped.
/// With fewer than `k` other points the farthest one is used; `None` if
/// there are none.
pub fn knn_distance(archive: &[f64], dim: usize, s: &[f64], k: usize) -> Option<f64> {
    let mut d: Vec<f64> = archive
        .chunks_exact(dim)
        .map(|row| row.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    if let Some(i) = d.iter().position(|v| *v == 0.0) {
        d.swap_remove(i);
    }
    if d.is_empty() || k == 0 {
        return None;
    }
    let rank = k.min(d.len()) - 1;
    let (_, kth, _) = d.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    Some(kth.sqrt())
}

/// `ln` of the `k`-NN distance, floored at [`MIN_DISTANCE`].
pub fn intrinsic_reward(archive: &[f64], dim: usize, s: &[f64], k: usize) -> Option<f64> {
    knn_distance(archive, dim, s, k).map(|d| d.max(MIN_DISTANCE).ln())
}

/// `clip((r - mean) / (3 std), -1 + delta, 1 - delta)`; zero when `std` is zero.
pub fn normalize_intrinsic(r: f64, mean: f64, std: f64, delta: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    ((r - mean) / (3.0 * std)).clamp(-1.0 + delta, 1.0 - delta)
}

/// Welford running mean and population variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

/// Every state visited during exploration, with running reward statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Intrinsic {
    pub config: IntrinsicConfig,
    dim: usize,
    archive: Vec<f64>,
    pub stats: RunningStats,
}

impl Intrinsic {
    pub fn new(dim: usize, config: IntrinsicConfig) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        if !(config.delta > 0.0 && config.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must be in (0, 1)".into()));
        }
        Ok(Self {
            config,
            dim,
            archive: Vec::new(),
            stats: RunningStats::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.archive.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.archive.is_empty()
    }

    pub fn archive(&self) -> &[f64] {
        &self.archive
    }

    /// Archives `s` and returns its normalized bonus, updating the statistics.
    pub fn observe(&mut self, s: &[f64]) -> Result<f64> {
        check_len("archived state", self.dim, s.len())?;
        self.archive.extend_from_slice(s);
        match intrinsic_reward(&self.archive, self.dim, s, self.config.k) {
            None => Ok(0.0),
            Some(r) => {
                self.stats.push(r);
                Ok(self.normalize(r))
            }
        }
    }

    pub fn normalize(&self, r: f64) -> f64 {
        normalize_intrinsic(r, self.stats.mean, self.stats.std(), self.config.delta)
    }

    /// Normalized bonuses for `n` states against the whole archive; statistics untouched.
    pub fn targets(&self, states: &[f64], n: usize) -> Result<Vec<f64>> {
        check_len("target states", n * self.dim, states.len())?;
        Ok(states
            .chunks_exact(self.dim)
            .map(|s| intrinsic_reward(&self.archive, self.dim, s, self.config.k).map_or(0.0, |r| self.normalize(r)))
            .collect())
    }
}

/// An environment plus the bookkeeping of the episode in progress.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollout {
    pub env: Env,
    state: Vec<f64>,
    pub episode: u64,
    pub step: usize,
    pub episode_return: f64,
}

impl Rollout {
    pub fn new(mut env: Env) -> Self {
        let state = env.reset();
        Self {
            env,
            state,
            episode: 0,
            step: 0,
            episode_return: 0.0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Steps the environment, resetting it at episode end. Returns the
    /// transition, its index within the episode, and the episode return if
    /// the episode just finished.
    pub fn step(&mut self, action: &[f64]) -> Result<(Transition, usize, Option<f64>)> {
        let t = self.env.step(action)?;
        let index = self.step;
        self.episode_return += t.reward;
        self.step += 1;
        let mut finished = None;
        if t.done || t.terminal {
            finished = Some(self.episode_return);
            self.state = self.env.reset();
            self.episode += 1;
            self.step = 0;
            self.episode_return = 0.0;
        } else {
            self.state = t.next_state.clone();
        }
        Ok((t, index, finished))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Leading steps with uniformly random actions and no updates.
    pub seed_steps: usize,
    pub warm_start: bool,
    pub warm_batch: usize,
    pub intrinsic: IntrinsicConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed_steps: 500,
            warm_start: true,
            warm_batch: 128,
            intrinsic: IntrinsicConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub sac_updates: usize,
    pub warm_updates: usize,
    pub last_warm_loss: Option<f64>,
}

/// What one exploration step did.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepOutcome {
    /// `(episode, ground-truth return)` of an episode that just ended.
    pub finished: Option<(u64, f64)>,
    pub sac_update: bool,
    pub warm_loss: Option<f64>,
}

/// Exploration step `i`: act (uniformly at random during the seed phase),
/// store the transition with its normalized bonus as reward, then one SAC
/// update and, with warm start on, one reward regression step.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<R: Rng>(
    config: &PretrainConfig,
    i: usize,
    agent: &mut SacAgent,
    rollout: &mut Rollout,
    ens: &mut RewardEnsemble,
    buffer: &mut ReplayBuffer,
    intrinsic: &mut Intrinsic,
    rng: &mut R,
) -> Result<StepOutcome> {
    let (sd, ad) = (agent.state_dim(), agent.action_dim());
    let state = rollout.state().to_vec();
    let action = if i < config.seed_steps {
        (0..ad).map(|_| rng.random_range(-1.0..1.0)).collect()
    } else {
        agent.act(&state, false)?
    };
    let episode = rollout.episode;
    let (mut t, index, finished) = rollout.step(&action)?;
    let true_reward = t.reward;
    t.reward = intrinsic.observe(&state)?;
    buffer.push(t, episode, index, true_reward);
    let mut out = StepOutcome {
        finished: finished.map(|r| (episode, r)),
        ..StepOutcome::default()
    };
    if i < config.seed_steps {
        return Ok(out);
    }
    let batch = buffer.sample(rng, agent.config().batch_size)?;
    agent.update(&batch)?;
    out.sac_update = true;
    if config.warm_start {
        let warm = buffer.sample(rng, config.warm_batch)?;
        let targets = intrinsic.targets(&warm.states, warm.len)?;
        let inputs = concat_rows(&warm.states, sd, &warm.actions, ad, warm.len);
        out.warm_loss = Some(ens.warm_step(&inputs, &targets)?);
    }
    Ok(out)
}

/// Runs `config.steps` exploration steps; see [`pretrain_step`].
#[allow(clippy::too_many_arguments)]
pub fn pretrain_phase<R: Rng>(
    config: &PretrainConfig,
    agent: &mut SacAgent,
    rollout: &mut Rollout,
    ens: &mut RewardEnsemble,
    buffer: &mut ReplayBuffer,
    intrinsic: &mut Intrinsic,
    rng: &mut R,
) -> Result<PretrainSummary> {
    let mut summary = PretrainSummary::default();
    for i in 0..config.steps {
        let out = pretrain_step(config, i, agent, rollout, ens, buffer, intrinsic, rng)?;
        summary.steps += 1;
        summary.sac_updates += out.sac_update as usize;
        if let Some(l) = out.warm_loss {
            summary.warm_updates += 1;
            summary.last_warm_loss = Some(l);
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(archive: &[f64], dim: usize, s: &[f64], k: usize) -> f64 {
        let mut d: Vec<f64> = archive
            .chunks(dim)
            .map(|r| r.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // d[0] is the self-match
        d[k]
    }

    #[test]
    fn line_examples() {
        let archive = [0.0, 1.0, 2.0];
        assert_eq!(intrinsic_reward(&archive, 1, &[0.0], 1), Some(0.0));
        assert!((intrinsic_reward(&archive, 1, &[0.0], 2).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(knn_distance(&[0.0], 1, &[0.0], 1), None);
    }

    #[test]
    fn duplicates_are_floored() {
        let archive = [0.5, 0.5, 0.5];
        assert_eq!(intrinsic_reward(&archive, 1, &[0.5], 1), Some(MIN_DISTANCE.ln()));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let archive: Vec<f64> = (0..500 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in (0..500).step_by(7) {
            let s = &archive[i * 3..i * 3 + 3];
            for k in [1, 5] {
                assert_eq!(knn_distance(&archive, 3, s, k).unwrap(), brute_knn(&archive, 3, s, k));
            }
        }
    }

    #[test]
    fn normalization_closed_forms() {
        let d = 1e-8;
        assert_eq!(normalize_intrinsic(2.0, 2.0, 0.5, d), 0.0);
        assert_eq!(normalize_intrinsic(3.5, 2.0, 0.5, d), 1.0 - d);
        assert_eq!(normalize_intrinsic(-48.0, 2.0, 0.5, d), -1.0 + d);
        assert_eq!(normalize_intrinsic(9.0, 2.0, 0.0, d), 0.0);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 0.25];
        let mut s = RunningStats::default();
        xs.iter().for_each(|x| s.push(*x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((s.mean - mean).abs() < 1e-12 && (s.std() - var.sqrt()).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn bonus_ignores_archive_order(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let archive: Vec<f64> = (0..40 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut rows: Vec<&[f64]> = archive.chunks(2).collect();
            rows.reverse();
            rows.swap(3, 17);
            let shuffled: Vec<f64> = rows.concat();
            let s = [0.1, -0.2];
            proptest::prop_assert_eq!(
                intrinsic_reward(&archive, 2, &s, k),
                intrinsic_reward(&shuffled, 2, &s, k)
            );
        }
    }
}
