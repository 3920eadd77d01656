//! Ensemble Bradley-Terry reward model trained from pairwise preferences.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, OutputActivation};
use crate::sac::concat_rows;

/// Predicted probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before any log.
pub const P_CLAMP: f64 = 1e-7;

/// A fixed-length window of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub state_dim: usize,
    pub action_dim: usize,
    /// `len x state_dim`, row-major.
    pub states: Vec<f64>,
    /// `len x action_dim`, row-major.
    pub actions: Vec<f64>,
    /// Environment rewards, for scripted teachers and evaluation only.
    pub true_rewards: Vec<f64>,
}

impl Segment {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        true_rewards: Vec<f64>,
    ) -> Result<Self> {
        let h = true_rewards.len();
        if h == 0 {
            return Err(Error::InvalidInput("segment must have at least one step".into()));
        }
        check_len("segment states", h * state_dim, states.len())?;
        check_len("segment actions", h * action_dim, actions.len())?;
        if states.iter().chain(&actions).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segment contents".into()));
        }
        Ok(Self {
            state_dim,
            action_dim,
            states,
            actions,
            true_rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.true_rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_rewards.is_empty()
    }

    pub fn true_return(&self) -> f64 {
        self.true_rewards.iter().sum()
    }

    /// Rows of `[s, a]`.
    pub fn inputs(&self) -> Vec<f64> {
        concat_rows(&self.states, self.state_dim, &self.actions, self.action_dim, self.len())
    }
}

/// Which segment the annotator preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// `(1, 0)`: the first segment.
    Left,
    /// `(0, 1)`: the second segment.
    Right,
    /// `(0.5, 0.5)`.
    Equal,
}

impl Label {
    /// Probability mass on the first segment.
    pub fn y0(self) -> f64 {
        match self {
            Label::Left => 1.0,
            Label::Right => 0.0,
            Label::Equal => 0.5,
        }
    }

    /// `1 - y`; equal labels map to themselves.
    pub fn flipped(self) -> Self {
        match self {
            Label::Left => Label::Right,
            Label::Right => Label::Left,
            Label::Equal => Label::Equal,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(Label::Left),
            "right" => Some(Label::Right),
            "equal" => Some(Label::Equal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Left => "left",
            Label::Right => "right",
            Label::Equal => "equal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub seg0: Segment,
    pub seg1: Segment,
    pub label: Label,
    pub session: u64,
    /// Noise-free label, kept for evaluation; training never reads it.
    #[serde(default)]
    pub true_label: Option<Label>,
}

impl PreferenceTriple {
    pub fn new(seg0: Segment, seg1: Segment, label: Label, session: u64) -> Result<Self> {
        if seg0.len() != seg1.len() || seg0.state_dim != seg1.state_dim || seg0.action_dim != seg1.action_dim {
            return Err(Error::InvalidInput("paired segments differ in shape".into()));
        }
        Ok(Self {
            seg0,
            seg1,
            label,
            session,
            true_label: None,
        })
    }

    pub fn with_label(&self, label: Label) -> Self {
        Self { label, ..self.clone() }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `P[first preferred]` under Bradley-Terry from two segment returns.
pub fn bt_prob(return0: f64, return1: f64) -> f64 {
    sigmoid(return0 - return1)
}

/// `(P, 1 - P)` clamped, with a flag telling whether the clamp was active.
fn clamped_pair(z: f64) -> (f64, f64, bool) {
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if p < P_CLAMP {
        (P_CLAMP, 1.0 - P_CLAMP, true)
    } else if q < P_CLAMP {
        (1.0 - P_CLAMP, P_CLAMP, true)
    } else {
        (p, q, false)
    }
}

/// `KL(y || P)` for a binary soft label, with `0 ln 0 = 0` and the usual clamp.
pub fn kl_binary(y0: f64, p: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let term = |y: f64, q: f64| if y == 0.0 { 0.0 } else { y * (y / q).ln() };
    term(y0, p) + term(1.0 - y0, 1.0 - p)
}

/// Per-pair preference loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairLoss {
    CrossEntropy,
    /// `|y0 - P| + |y1 - (1 - P)|`.
    Mae,
    /// Truncated Taylor expansion of cross-entropy with `order` terms.
    TruncatedCe {
        order: u32,
    },
    /// Cross-entropy against `(1 - r) y + r / 2`.
    LabelSmoothing {
        r: f64,
    },
}

impl PairLoss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PairLoss::TruncatedCe { order } if order == 0 => {
                Err(Error::InvalidConfig("truncated CE order must be at least 1".into()))
            }
            PairLoss::LabelSmoothing { r } if !(0.0..=1.0).contains(&r) => Err(Error::InvalidConfig(format!(
                "label smoothing r must be in [0, 1], got {r}"
            ))),
            _ => Ok(()),
        }
    }

    /// Loss at logit `z = R0 - R1` and its derivative with respect to `z`.
    pub fn eval(&self, y0: f64, z: f64) -> (f64, f64) {
        match *self {
            PairLoss::CrossEntropy => ce_with_grad(y0, z),
            PairLoss::LabelSmoothing { r } => ce_with_grad((1.0 - r) * y0 + 0.5 * r, z),
            PairLoss::Mae => {
                let p = sigmoid(z);
                let d = y0 - p;
                let dp = if d == 0.0 { 0.0 } else { -2.0 * d.signum() };
                (2.0 * d.abs(), dp * p * (1.0 - p))
            }
            PairLoss::TruncatedCe { order } => {
                let p = sigmoid(z);
                // probability the model assigns to the annotated outcome
                let q = y0 * p + (1.0 - y0) * (1.0 - p);
                let mut loss = 0.0;
                let mut dq = 0.0;
                let mut pow = 1.0;
                for i in 1..=order {
                    dq -= pow;
                    pow *= 1.0 - q;
                    loss += pow / i as f64;
                }
                (loss, dq * (2.0 * y0 - 1.0) * p * (1.0 - p))
            }
        }
    }
}

fn ce_with_grad(y0: f64, z: f64) -> (f64, f64) {
    let (p, q, clamped) = clamped_pair(z);
    let loss = -y0 * p.ln() - (1.0 - y0) * q.ln();
    let grad = if clamped { 0.0 } else { sigmoid(z) - y0 };
    (loss, grad)
}

/// Per-sample cross-entropy with the clamp.
pub fn ce(y0: f64, z: f64) -> f64 {
    ce_with_grad(y0, z).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// KL of the label against the mean member probability.
    #[default]
    MeanProb,
    /// Mean over members of the per-member KL.
    MeanKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardModelConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub aggregation: Aggregation,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 3,
            hidden: vec![64, 64],
            lr: 3e-4,
            batch_size: 128,
            aggregation: Aggregation::MeanProb,
        }
    }
}

/// Loss and gradient for one ensemble member on a batch.
#[derive(Debug, Clone)]
pub struct MemberGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Pairs whose probability hit the clamp.
    pub clamped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardEnsemble {
    config: RewardModelConfig,
    state_dim: usize,
    action_dim: usize,
    pub members: Vec<Mlp>,
    opts: Vec<AdamState>,
}

impl RewardEnsemble {
    pub fn new(state_dim: usize, action_dim: usize, config: RewardModelConfig, seed: u64) -> Result<Self> {
        if config.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble needs at least one member".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("reward batch size must be positive".into()));
        }
        let mut dims = vec![state_dim + action_dim];
        dims.extend(&config.hidden);
        dims.push(1);
        let members = (0..config.ensemble_size)
            .map(|i| {
                Mlp::new(
                    &dims,
                    Activation::Relu,
                    OutputActivation::Tanh,
                    seed.wrapping_add(1000 * i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = members
            .iter()
            .map(|m| AdamState::for_net(m, AdamConfig::with_lr(config.lr)))
            .collect();
        Ok(Self {
            config,
            state_dim,
            action_dim,
            members,
            opts,
        })
    }

    pub fn config(&self) -> &RewardModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Per-step rewards of one member for `n` rows of `[s, a]`.
    pub fn member_rewards(&self, member: usize, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.members[member].forward_batch(inputs, n)
    }

    /// Ensemble-mean reward for `n` rows of `[s, a]`.
    pub fn mean_rewards(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n];
        for m in &self.members {
            for (o, r) in out.iter_mut().zip(m.forward_batch(inputs, n)?) {
                *o += r / self.members.len() as f64;
            }
        }
        Ok(out)
    }

    fn check_segment(&self, seg: &Segment) -> Result<()> {
        check_len("segment state dim", self.state_dim, seg.state_dim)?;
        check_len("segment action dim", self.action_dim, seg.action_dim)
    }

    /// Per-member logits `R0 - R1`.
    pub fn member_logits(&self, seg0: &Segment, seg1: &Segment) -> Result<Vec<f64>> {
        self.check_segment(seg0)?;
        self.check_segment(seg1)?;
        check_len("paired segment length", seg0.len(), seg1.len())?;
        let h = seg0.len();
        let mut inputs = seg0.inputs();
        inputs.extend(seg1.inputs());
        self.members
            .iter()
            .map(|m| {
                let r = m.forward_batch(&inputs, 2 * h)?;
                Ok(r[..h].iter().sum::<f64>() - r[h..].iter().sum::<f64>())
            })
            .collect()
    }

    /// Per-member `P[seg0 preferred]`.
    pub fn member_probs(&self, seg0: &Segment, seg1: &Segment) -> Result<Vec<f64>> {
        Ok(self.member_logits(seg0, seg1)?.into_iter().map(sigmoid).collect())
    }

    /// Mean member probability that `seg0` is preferred.
    pub fn predict_pref(&self, seg0: &Segment, seg1: &Segment) -> Result<f64> {
        let p = self.member_probs(seg0, seg1)?;
        Ok(p.iter().sum::<f64>() / p.len() as f64)
    }

    /// Per-member KLs and the aggregated KL used by the discriminator.
    pub fn kl_to_label(&self, triple: &PreferenceTriple) -> Result<(f64, Vec<f64>)> {
        let probs = self.member_probs(&triple.seg0, &triple.seg1)?;
        let y0 = triple.label.y0();
        let per: Vec<f64> = probs.iter().map(|p| kl_binary(y0, *p)).collect();
        let agg = match self.config.aggregation {
            Aggregation::MeanProb => kl_binary(y0, probs.iter().sum::<f64>() / probs.len() as f64),
            Aggregation::MeanKl => per.iter().sum::<f64>() / per.len() as f64,
        };
        Ok((agg, per))
    }

    /// Mean pair loss of one member over `triples`, with gradient.
    ///
    /// `drop_fraction` removes that share of pairs with the largest
    /// cross-entropy before averaging.
    pub fn member_loss_and_grad(
        &self,
        member: usize,
        triples: &[&PreferenceTriple],
        loss: PairLoss,
        drop_fraction: f64,
    ) -> Result<MemberGrad> {
        if triples.is_empty() {
            return Err(Error::InsufficientData("empty preference batch".into()));
        }
        let net = &self.members[member];
        let mut inputs = Vec::new();
        let mut offsets = Vec::with_capacity(triples.len());
        let mut rows = 0;
        for t in triples {
            self.check_segment(&t.seg0)?;
            check_len("paired segment length", t.seg0.len(), t.seg1.len())?;
            offsets.push((rows, t.seg0.len()));
            inputs.extend(t.seg0.inputs());
            inputs.extend(t.seg1.inputs());
            rows += 2 * t.seg0.len();
        }
        let tape = net.forward_tape(&inputs, rows)?;
        let r = tape.output();
        let logits: Vec<f64> = offsets
            .iter()
            .map(|&(o, h)| r[o..o + h].iter().sum::<f64>() - r[o + h..o + 2 * h].iter().sum::<f64>())
            .collect();

        let mut keep = vec![true; triples.len()];
        let n_drop = (drop_fraction * triples.len() as f64).floor() as usize;
        if n_drop > 0 {
            let mut order: Vec<usize> = (0..triples.len()).collect();
            let ces: Vec<f64> = triples.iter().zip(&logits).map(|(t, z)| ce(t.label.y0(), *z)).collect();
            order.sort_by(|&a, &b| ces[b].total_cmp(&ces[a]).then(a.cmp(&b)));
            for &i in order.iter().take(n_drop.min(triples.len() - 1)) {
                keep[i] = false;
            }
        }
        let kept = keep.iter().filter(|k| **k).count() as f64;

        let mut total = 0.0;
        let mut clamped = 0;
        let mut grad_out = vec![0.0; rows];
        for (i, t) in triples.iter().enumerate() {
            let z = logits[i];
            if clamped_pair(z).2 {
                clamped += 1;
            }
            if !keep[i] {
                continue;
            }
            let (l, dz) = loss.eval(t.label.y0(), z);
            total += l / kept;
            let (o, h) = offsets[i];
            for g in &mut grad_out[o..o + h] {
                *g = dz / kept;
            }
            for g in &mut grad_out[o + h..o + 2 * h] {
                *g = -dz / kept;
            }
        }
        let grad = net.backward(&tape, &grad_out)?.params;
        Ok(MemberGrad {
            loss: total,
            grad,
            clamped,
        })
    }

    /// One optimizer step on every member over the same batch; returns the mean loss.
    pub fn train_step(&mut self, triples: &[&PreferenceTriple], loss: PairLoss, drop_fraction: f64) -> Result<f64> {
        let mut total = 0.0;
        for m in 0..self.members.len() {
            let g = self.member_loss_and_grad(m, triples, loss, drop_fraction)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFinite(format!("reward loss {}", g.loss)));
            }
            let (net, opt) = (&mut self.members[m], &mut self.opts[m]);
            net.adam_step(opt, &g.grad)?;
            total += g.loss / self.members.len() as f64;
        }
        Ok(total)
    }

    /// One pass over `data` in shuffled minibatches. Returns the mean batch loss.
    ///
    /// `drop_schedule` maps the running iteration counter to a drop fraction.
    pub fn train_epoch<R: Rng>(
        &mut self,
        data: &[PreferenceTriple],
        loss: PairLoss,
        rng: &mut R,
        iteration: &mut u64,
        drop_schedule: &dyn Fn(u64) -> f64,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InsufficientData("no preferences to train on".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreferenceTriple> = chunk.iter().map(|&i| &data[i]).collect();
            total += self.train_step(&batch, loss, drop_schedule(*iteration))?;
            *iteration += 1;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Mean cross-entropy of the ensemble over `data`, averaged across members.
    pub fn mean_ce(&self, data: &[PreferenceTriple]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for t in data {
            for z in self.member_logits(&t.seg0, &t.seg1)? {
                total += ce(t.label.y0(), z);
            }
        }
        Ok(total / (data.len() * self.members.len()) as f64)
    }

    /// Fraction of hard-labeled pairs whose mean prediction picks the labeled side.
    pub fn accuracy(&self, data: &[PreferenceTriple]) -> Result<f64> {
        let mut hits = 0usize;
        let mut n = 0usize;
        for t in data {
            if t.label == Label::Equal {
                continue;
            }
            let p = self.predict_pref(&t.seg0, &t.seg1)?;
            n += 1;
            if (p > 0.5) == (t.label == Label::Left) {
                hits += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { hits as f64 / n as f64 })
    }

    /// `mean ½ (r - target)²` for one member, with gradient.
    pub fn warm_mse_loss_and_grad(&self, member: usize, inputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = targets.len();
        if n == 0 {
            return Err(Error::InsufficientData("empty regression batch".into()));
        }
        if let Some(t) = targets.iter().find(|t| !(t.abs() < 1.0)) {
            return Err(Error::InvalidInput(format!("regression target {t} is outside (-1, 1)")));
        }
        let net = &self.members[member];
        let tape = net.forward_tape(inputs, n)?;
        let mut loss = 0.0;
        let grad_out: Vec<f64> = tape
            .output()
            .iter()
            .zip(targets)
            .map(|(r, t)| {
                loss += 0.5 * (r - t) * (r - t) / n as f64;
                (r - t) / n as f64
            })
            .collect();
        Ok((loss, net.backward(&tape, &grad_out)?.params))
    }

    /// One regression step for every member; returns the mean loss.
    pub fn warm_step(&mut self, inputs: &[f64], targets: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for m in 0..self.members.len() {
            let (loss, grad) = self.warm_mse_loss_and_grad(m, inputs, targets)?;
            let (net, opt) = (&mut self.members[m], &mut self.opts[m]);
            net.adam_step(opt, &grad)?;
            total += loss / self.members.len() as f64;
        }
        Ok(total)
    }

    /// Rewrites every stored reward with the ensemble-mean prediction.
    pub fn relabel(&self, buffer: &mut ReplayBuffer) -> Result<usize> {
        const CHUNK: usize = 4096;
        let n = buffer.len();
        let mut rewards = Vec::with_capacity(n);
        let mut inputs = Vec::with_capacity(CHUNK * self.input_dim());
        let mut pending = 0;
        for e in buffer.entries() {
            inputs.extend_from_slice(&e.transition.state);
            inputs.extend_from_slice(&e.transition.action);
            pending += 1;
            if pending == CHUNK {
                rewards.extend(self.mean_rewards(&inputs, pending)?);
                inputs.clear();
                pending = 0;
            }
        }
        if pending > 0 {
            rewards.extend(self.mean_rewards(&inputs, pending)?);
        }
        for (e, r) in buffer.entries_mut().zip(rewards) {
            e.transition.reward = r;
        }
        Ok(n)
    }
}
