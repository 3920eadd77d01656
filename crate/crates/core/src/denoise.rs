//! KL-threshold discriminator that keeps trustworthy preferences and flips
//! confidently contradicted ones, plus baseline robust-training strategies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{PairLoss, PreferenceTriple, RewardEnsemble};

/// When the decay counter of the lower-bound weight advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayClock {
    #[default]
    Session,
    RewardEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub alpha: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Linear decay of the uncertainty weight per counter tick.
    pub decay: f64,
    pub tau_upper: f64,
    pub use_lower: bool,
    pub use_upper: bool,
    pub clock: DecayClock,
    /// Smallest value the tracked maximum KL may take.
    pub rho_floor: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta_min: 1.0,
            beta_max: 3.0,
            decay: 1.0 / 30.0,
            tau_upper: 3.0 * 10f64.ln(),
            use_lower: true,
            use_upper: true,
            clock: DecayClock::Session,
            rho_floor: 1e-7,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 0.5], got {}",
                self.alpha
            )));
        }
        if !(self.beta_min <= self.beta_max) || self.beta_min < 0.0 {
            return Err(Error::InvalidConfig("need 0 <= beta_min <= beta_max".into()));
        }
        if !(self.tau_upper > 0.0) {
            return Err(Error::InvalidConfig("tau_upper must be positive".into()));
        }
        if !(self.decay >= 0.0) || !(self.rho_floor > 0.0) {
            return Err(Error::InvalidConfig("decay must be >= 0 and rho_floor > 0".into()));
        }
        Ok(())
    }
}

/// Mutable discriminator state carried across sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: DenoiseConfig,
    /// Largest KL seen on the last training set; `None` stands for infinity.
    pub rho: Option<f64>,
    /// Decay counter.
    pub t: u64,
}

impl Discriminator {
    pub fn new(config: DenoiseConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rho: None,
            t: 0,
        })
    }

    pub fn beta(&self) -> f64 {
        beta_t(&self.config, self.t)
    }

    pub fn tau_lower(&self, s_kl: f64) -> Result<f64> {
        tau_lower(&self.config, self.rho, self.t, s_kl)
    }

    /// Partitions `data` into trusted, flipped and discarded indices.
    pub fn filter(&self, ens: &RewardEnsemble, data: &[PreferenceTriple]) -> Result<FilterReport> {
        let kl = data
            .iter()
            .map(|t| ens.kl_to_label(t).map(|(k, _)| k))
            .collect::<Result<Vec<_>>>()?;
        self.filter_kls(kl)
    }

    /// [`Discriminator::filter`] on precomputed per-sample KLs.
    pub fn filter_kls(&self, kl: Vec<f64>) -> Result<FilterReport> {
        if kl.is_empty() {
            return Err(Error::InsufficientData("nothing to filter".into()));
        }
        let s_kl = population_std(&kl);
        let tau_lower = self.tau_lower(s_kl)?;
        let tau_upper = self.config.tau_upper;
        let mut trusted = Vec::new();
        let mut flipped = Vec::new();
        let mut discarded = Vec::new();
        for (i, &k) in kl.iter().enumerate() {
            let keep = if self.config.use_lower {
                k < tau_lower
            } else {
                k <= tau_upper
            };
            if keep || self.rho.is_none() {
                trusted.push(i);
            } else if self.config.use_upper && k > tau_upper {
                flipped.push(i);
            } else {
                discarded.push(i);
            }
        }
        Ok(FilterReport {
            t: self.t,
            rho: self.rho,
            beta: self.beta(),
            s_kl,
            tau_lower,
            tau_upper,
            kl,
            trusted,
            flipped,
            discarded,
        })
    }

    /// Sets `rho` to the largest post-update KL over the training set.
    /// Returns the new value, or `None` when the set is empty.
    pub fn update_rho(&mut self, ens: &RewardEnsemble, train_set: &[PreferenceTriple]) -> Result<Option<f64>> {
        if train_set.is_empty() {
            log::warn!("empty training set; keeping rho = {:?}", self.rho);
            return Ok(None);
        }
        let mut worst: f64 = 0.0;
        for t in train_set {
            worst = worst.max(ens.kl_to_label(t)?.0);
        }
        let rho = worst.max(self.config.rho_floor);
        self.rho = Some(rho);
        Ok(Some(rho))
    }

    pub fn tick(&mut self) {
        self.t += 1;
    }
}

/// `max(beta_min, beta_max - decay * t)`.
pub fn beta_t(cfg: &DenoiseConfig, t: u64) -> f64 {
    (cfg.beta_max - cfg.decay * t as f64).max(cfg.beta_min)
}

/// `-ln rho + alpha rho + beta_t s_kl`, or `+inf` while `rho` is unset.
pub fn tau_lower(cfg: &DenoiseConfig, rho: Option<f64>, t: u64, s_kl: f64) -> Result<f64> {
    if !(s_kl >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "KL spread must be non-negative, got {s_kl}"
        )));
    }
    match rho {
        None => Ok(f64::INFINITY),
        Some(r) if !(r > 0.0) => Err(Error::InvalidInput(format!("rho must be positive, got {r}"))),
        Some(r) => Ok(-r.ln() + cfg.alpha * r + beta_t(cfg, t) * s_kl),
    }
}

/// Smallest KL a corrupted sample can have once every clean sample has
/// loss at most `rho`: `-ln(1 - e^{-rho})`.
pub fn theorem1_bound(rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
    }
    Ok(-(-(-rho).exp_m1()).ln())
}

/// Small-`rho` expansion `-ln rho + rho / 2 - rho^2 / 24`.
pub fn theorem1_expansion(rho: f64) -> f64 {
    -rho.ln() + rho / 2.0 - rho * rho / 24.0
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Outcome of one filtering pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub t: u64,
    pub rho: Option<f64>,
    pub beta: f64,
    pub s_kl: f64,
    /// `null` in JSON while unbounded.
    #[serde(with = "unbounded")]
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub kl: Vec<f64>,
    pub trusted: Vec<usize>,
    pub flipped: Vec<usize>,
    pub discarded: Vec<usize>,
}

impl FilterReport {
    /// Trusted samples followed by flipped samples with reversed labels.
    pub fn training_set(&self, data: &[PreferenceTriple]) -> Vec<PreferenceTriple> {
        let mut out: Vec<PreferenceTriple> = self.trusted.iter().map(|&i| data[i].clone()).collect();
        out.extend(
            self.flipped
                .iter()
                .map(|&i| data[i].with_label(data[i].label.flipped())),
        );
        out
    }
}

/// Ground-truth quality of a filtering pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterQuality {
    /// Share of flipped samples whose stored label was wrong.
    pub flip_precision: Option<f64>,
    /// Share of wrong labels that were flipped.
    pub flip_recall: Option<f64>,
    /// Share of trusted samples whose stored label is wrong.
    pub trusted_corruption: Option<f64>,
    pub corrupted: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores a report against the hidden noise-free labels. Samples without a
/// stored ground truth are ignored.
pub fn filter_quality(report: &FilterReport, data: &[PreferenceTriple]) -> FilterQuality {
    let wrong = |i: usize| data[i].true_label.map(|t| t != data[i].label);
    let corrupted = (0..data.len()).filter(|&i| wrong(i) == Some(true)).count();
    let count = |idx: &[usize]| {
        let known = idx.iter().filter(|&&i| wrong(i).is_some()).count();
        let bad = idx.iter().filter(|&&i| wrong(i) == Some(true)).count();
        (known, bad)
    };
    let (f_known, f_bad) = count(&report.flipped);
    let (t_known, t_bad) = count(&report.trusted);
    FilterQuality {
        flip_precision: ratio(f_bad, f_known),
        flip_recall: ratio(f_bad, corrupted),
        trusted_corruption: ratio(t_bad, t_known),
        corrupted,
    }
}

/// How reward-model batches are formed and scored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Plain cross-entropy on every label.
    None,
    /// Discriminator filtering with label flipping.
    #[default]
    Rime,
    /// Drops the `min(gamma * iteration, tau_max)` share of largest-loss pairs.
    Adt {
        gamma: f64,
        tau_max: f64,
    },
    Mae,
    TruncatedCe {
        order: u32,
    },
    LabelSmoothing {
        r: f64,
    },
}

impl Strategy {
    pub fn adt() -> Self {
        Strategy::Adt {
            gamma: 0.003,
            tau_max: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Adt { gamma, tau_max } => {
                if !(gamma >= 0.0) || !(0.0..1.0).contains(&tau_max) {
                    return Err(Error::InvalidConfig(format!(
                        "ADT needs gamma >= 0 and tau_max in [0, 1), got {gamma}, {tau_max}"
                    )));
                }
                Ok(())
            }
            s => s.pair_loss().validate(),
        }
    }

    pub fn pair_loss(&self) -> PairLoss {
        match *self {
            Strategy::Mae => PairLoss::Mae,
            Strategy::TruncatedCe { order } => PairLoss::TruncatedCe { order },
            Strategy::LabelSmoothing { r } => PairLoss::LabelSmoothing { r },
            _ => PairLoss::CrossEntropy,
        }
    }

    /// Share of the batch dropped at gradient iteration `iteration`.
    pub fn drop_fraction(&self, iteration: u64) -> f64 {
        match *self {
            Strategy::Adt { gamma, tau_max } => (gamma * iteration as f64).min(tau_max),
            _ => 0.0,
        }
    }

    pub fn filters(&self) -> bool {
        matches!(self, Strategy::Rime)
    }
}

/// Mean cross-entropy over the filtered training set of `report`, with gradient
/// for one member.
pub fn filtered_loss_and_grad(
    ens: &RewardEnsemble,
    member: usize,
    report: &FilterReport,
    data: &[PreferenceTriple],
) -> Result<(f64, Vec<f64>)> {
    let set = report.training_set(data);
    let refs: Vec<&PreferenceTriple> = set.iter().collect();
    let g = ens.member_loss_and_grad(member, &refs, PairLoss::CrossEntropy, 0.0)?;
    Ok((g.loss, g.grad))
}

/// Reward-model training budget of one feedback session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionBudget {
    pub max_epochs: usize,
    /// Stop once an epoch's mean loss falls below this.
    pub early_stop_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    /// Present when the strategy filters.
    pub report: Option<FilterReport>,
    pub train_size: usize,
    pub epochs: usize,
    pub loss: f64,
    pub rho_after: Option<f64>,
}

/// Filters `data` (if the strategy does), trains the ensemble on the result,
/// then moves `rho` and the decay counter.
pub fn train_session<R: Rng>(
    ens: &mut RewardEnsemble,
    disc: &mut Discriminator,
    strategy: Strategy,
    data: &[PreferenceTriple],
    budget: SessionBudget,
    rng: &mut R,
    iteration: &mut u64,
) -> Result<SessionOutcome> {
    let (report, train_set) = if strategy.filters() {
        let report = disc.filter(ens, data)?;
        let set = report.training_set(data);
        (Some(report), set)
    } else {
        (None, data.to_vec())
    };
    let mut out = SessionOutcome {
        report,
        train_size: train_set.len(),
        epochs: 0,
        loss: 0.0,
        rho_after: None,
    };
    if !train_set.is_empty() {
        let loss = strategy.pair_loss();
        for epoch in 0..budget.max_epochs {
            out.loss = ens.train_epoch(&train_set, loss, rng, iteration, &|it| strategy.drop_fraction(it))?;
            out.epochs = epoch + 1;
            if strategy.filters() && disc.config.clock == DecayClock::RewardEpoch {
                disc.tick();
            }
            if out.loss < budget.early_stop_loss {
                break;
            }
        }
    }
    if strategy.filters() {
        out.rho_after = disc.update_rho(ens, &train_set)?;
        if disc.config.clock == DecayClock::Session {
            disc.tick();
        }
    }
    Ok(out)
}
