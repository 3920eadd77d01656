//! Soft actor-critic with a tanh-squashed Gaussian policy, twin critics and a
//! learned temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::buffer::Batch;
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, OutputActivation, Tape};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub gamma: f64,
    /// EMA coefficient for the target critics.
    pub tau: f64,
    /// Target critics are refreshed every this many updates.
    pub target_update_every: u64,
    pub init_temperature: f64,
    /// Pins the temperature (which may then be zero) instead of learning it.
    pub fixed_temperature: Option<f64>,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub batch_size: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            target_update_every: 2,
            init_temperature: 0.1,
            fixed_temperature: None,
            target_entropy: None,
            batch_size: 256,
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.batch_size == 0 || self.target_update_every == 0 {
            return Err(Error::InvalidConfig(
                "batch size and target period must be positive".into(),
            ));
        }
        if self.log_std_min >= self.log_std_max {
            return Err(Error::InvalidConfig("log-std bounds are inverted".into()));
        }
        if self.init_temperature <= 0.0 {
            return Err(Error::InvalidConfig("initial temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub temperature: f64,
    pub alpha: f64,
    /// Mean `-log pi` of the actions sampled for the actor update.
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacAgent {
    config: SacConfig,
    state_dim: usize,
    action_dim: usize,
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    log_temperature: f64,
    target_entropy: f64,
    policy_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    temperature_opt: AdamState,
    updates: u64,
    rng: ChaCha8Rng,
}

/// Result of pushing states and fixed standard-normal noise through the policy.
pub struct PolicySample {
    tape: Tape,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pre_tanh: Vec<f64>,
    std: Vec<f64>,
    raw_log_std: Vec<f64>,
}

/// Critic loss with its parameter gradients.
pub struct CriticGrad {
    pub loss: f64,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

/// Actor loss with its policy gradient.
pub struct ActorGrad {
    pub loss: f64,
    pub policy: Vec<f64>,
    pub mean_log_prob: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// log(1 - tanh(u)^2), stable for large |u|.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

pub(crate) fn concat_rows(a: &[f64], a_dim: usize, b: &[f64], b_dim: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (a_dim + b_dim));
    for i in 0..n {
        out.extend_from_slice(&a[i * a_dim..(i + 1) * a_dim]);
        out.extend_from_slice(&b[i * b_dim..(i + 1) * b_dim]);
    }
    out
}

impl SacAgent {
    pub fn new(state_dim: usize, action_dim: usize, config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![state_dim];
        dims.extend(&config.hidden);
        dims.push(2 * action_dim);
        let policy = Mlp::new(&dims, Activation::Relu, OutputActivation::None, seed)?;
        let mut qdims = vec![state_dim + action_dim];
        qdims.extend(&config.hidden);
        qdims.push(1);
        let q1 = Mlp::new(&qdims, Activation::Relu, OutputActivation::None, seed.wrapping_add(1))?;
        let q2 = Mlp::new(&qdims, Activation::Relu, OutputActivation::None, seed.wrapping_add(2))?;
        let target_entropy = config.target_entropy.unwrap_or(-(action_dim as f64));
        Ok(Self {
            state_dim,
            action_dim,
            policy_opt: AdamState::for_net(&policy, AdamConfig::with_lr(config.actor_lr)),
            q1_opt: AdamState::for_net(&q1, AdamConfig::with_lr(config.critic_lr)),
            q2_opt: AdamState::for_net(&q2, AdamConfig::with_lr(config.critic_lr)),
            temperature_opt: AdamState::new(1, AdamConfig::with_lr(config.temperature_lr)),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_temperature: config.init_temperature.ln(),
            target_entropy,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(3)),
            config,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    pub fn update_count(&self) -> u64 {
        self.updates
    }

    pub fn temperature(&self) -> f64 {
        self.config
            .fixed_temperature
            .unwrap_or_else(|| self.log_temperature.exp())
    }

    pub fn log_temperature(&self) -> f64 {
        self.log_temperature
    }

    pub fn set_log_temperature(&mut self, v: f64) {
        self.log_temperature = v;
    }

    /// Fresh critics and critic optimizers; the policy is kept.
    pub fn reset_critics(&mut self, seed: u64) -> Result<()> {
        let dims = self.q1.layer_dims().to_vec();
        self.q1 = Mlp::new(&dims, Activation::Relu, OutputActivation::None, seed)?;
        self.q2 = Mlp::new(&dims, Activation::Relu, OutputActivation::None, seed.wrapping_add(1))?;
        self.q1_target = self.q1.clone();
        self.q2_target = self.q2.clone();
        self.q1_opt = AdamState::for_net(&self.q1, AdamConfig::with_lr(self.config.critic_lr));
        self.q2_opt = AdamState::for_net(&self.q2, AdamConfig::with_lr(self.config.critic_lr));
        Ok(())
    }

    /// Draws standard-normal noise for `n` actions from the agent's stream.
    pub fn draw_noise(&mut self, n: usize) -> Vec<f64> {
        (0..n * self.action_dim)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect()
    }

    pub fn act(&mut self, state: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        check_len("agent state", self.state_dim, state.len())?;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("agent state {state:?}")));
        }
        if deterministic {
            return self.act_mean(state);
        }
        let noise = self.draw_noise(1);
        Ok(self.sample_policy(state, &noise, 1)?.actions)
    }

    /// `tanh` of the policy mean; needs no randomness.
    pub fn act_mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        check_len("agent state", self.state_dim, state.len())?;
        let out = self.policy.forward(state)?;
        Ok(out[..self.action_dim].iter().map(|m| m.tanh()).collect())
    }

    fn squash_log_std(&self, raw: f64) -> f64 {
        let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
        lo + 0.5 * (hi - lo) * (raw.tanh() + 1.0)
    }

    /// Reparameterized policy sample `a = tanh(mu + sigma * noise)` and its log-density.
    pub fn sample_policy(&self, states: &[f64], noise: &[f64], n: usize) -> Result<PolicySample> {
        let ad = self.action_dim;
        check_len("policy noise", n * ad, noise.len())?;
        let tape = self.policy.forward_tape(states, n)?;
        let out = tape.output();
        let mut actions = vec![0.0; n * ad];
        let mut log_probs = vec![0.0; n];
        let mut pre_tanh = vec![0.0; n * ad];
        let mut std = vec![0.0; n * ad];
        let mut raw_log_std = vec![0.0; n * ad];
        for i in 0..n {
            let row = &out[i * 2 * ad..(i + 1) * 2 * ad];
            let mut lp = 0.0;
            for j in 0..ad {
                let raw = row[ad + j];
                let ls = self.squash_log_std(raw);
                let s = ls.exp();
                let xi = noise[i * ad + j];
                let u = row[j] + s * xi;
                lp += -0.5 * xi * xi - ls - 0.5 * LN_2PI - log_one_minus_tanh_sq(u);
                actions[i * ad + j] = u.tanh();
                pre_tanh[i * ad + j] = u;
                std[i * ad + j] = s;
                raw_log_std[i * ad + j] = raw;
            }
            log_probs[i] = lp;
        }
        Ok(PolicySample {
            tape,
            actions,
            log_probs,
            pre_tanh,
            std,
            raw_log_std,
        })
    }

    /// Twin-critic Bellman loss. `next_noise` drives the next-state actions.
    pub fn critic_loss_and_grad(&self, batch: &Batch, next_noise: &[f64]) -> Result<CriticGrad> {
        let n = batch.len;
        let (sd, ad) = (self.state_dim, self.action_dim);
        check_len("batch state dim", sd, batch.state_dim)?;
        let alpha = self.temperature();
        let next = self.sample_policy(&batch.next_states, next_noise, n)?;
        let next_in = concat_rows(&batch.next_states, sd, &next.actions, ad, n);
        let t1 = self.q1_target.forward_batch(&next_in, n)?;
        let t2 = self.q2_target.forward_batch(&next_in, n)?;
        let target: Vec<f64> = (0..n)
            .map(|i| {
                let v = t1[i].min(t2[i]) - alpha * next.log_probs[i];
                batch.rewards[i] + self.config.gamma * batch.not_terminal[i] * v
            })
            .collect();

        let input = concat_rows(&batch.states, sd, &batch.actions, ad, n);
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for q in [&self.q1, &self.q2] {
            let tape = q.forward_tape(&input, n)?;
            let pred = tape.output();
            let mut g = vec![0.0; n];
            for i in 0..n {
                let d = pred[i] - target[i];
                loss += d * d / n as f64;
                g[i] = 2.0 * d / n as f64;
            }
            grads.push(q.backward(&tape, &g)?.params);
        }
        let q2 = grads.pop().expect("two critics");
        let q1 = grads.pop().expect("two critics");
        Ok(CriticGrad { loss, q1, q2 })
    }

    /// Reparameterized actor loss `mean(alpha log pi - min(Q1, Q2))` at fixed critics.
    pub fn actor_loss_and_grad(&self, states: &[f64], noise: &[f64], n: usize) -> Result<ActorGrad> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let alpha = self.temperature();
        let sample = self.sample_policy(states, noise, n)?;
        let input = concat_rows(states, sd, &sample.actions, ad, n);
        let tape1 = self.q1.forward_tape(&input, n)?;
        let tape2 = self.q2.forward_tape(&input, n)?;
        let (v1, v2) = (tape1.output(), tape2.output());
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        let mut loss = 0.0;
        for i in 0..n {
            let q = v1[i].min(v2[i]);
            loss += (alpha * sample.log_probs[i] - q) / n as f64;
            if v1[i] <= v2[i] {
                g1[i] = 1.0;
            } else {
                g2[i] = 1.0;
            }
        }
        let dq1 = self.q1.backward(&tape1, &g1)?.input;
        let dq2 = self.q2.backward(&tape2, &g2)?.input;

        let inv_n = 1.0 / n as f64;
        let mut grad_out = vec![0.0; n * 2 * ad];
        for i in 0..n {
            for j in 0..ad {
                let k = i * ad + j;
                let a = sample.actions[k];
                let dq_da = dq1[i * (sd + ad) + sd + j] + dq2[i * (sd + ad) + sd + j];
                // d/du of (alpha log pi - Q)
                let d_u = alpha * 2.0 * sample.pre_tanh[k].tanh() - dq_da * (1.0 - a * a);
                let d_mean = d_u;
                let xi = noise[k];
                let d_log_std = -alpha + d_u * sample.std[k] * xi;
                let th = sample.raw_log_std[k].tanh();
                let d_raw = d_log_std * 0.5 * (self.config.log_std_max - self.config.log_std_min) * (1.0 - th * th);
                grad_out[i * 2 * ad + j] = d_mean * inv_n;
                grad_out[i * 2 * ad + ad + j] = d_raw * inv_n;
            }
        }
        let policy = self.policy.backward(&sample.tape, &grad_out)?.params;
        let mean_log_prob = sample.log_probs.iter().sum::<f64>() * inv_n;
        Ok(ActorGrad {
            loss,
            policy,
            mean_log_prob,
        })
    }

    /// Temperature loss `alpha * (-log pi - target_entropy)` and its derivative
    /// with respect to `log alpha`, at a detached `mean_log_prob`.
    pub fn temperature_loss_and_grad(&self, log_temperature: f64, mean_log_prob: f64) -> (f64, f64) {
        let alpha = log_temperature.exp();
        let loss = alpha * (-mean_log_prob - self.target_entropy);
        (loss, loss)
    }

    /// One critic step followed by target refresh bookkeeping; the policy is untouched.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        if batch.len == 0 {
            return Err(Error::InvalidInput("empty minibatch".into()));
        }
        if batch.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("minibatch reward".into()));
        }
        let noise = self.draw_noise(batch.len);
        let g = self.critic_loss_and_grad(batch, &noise)?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {}", g.loss)));
        }
        self.q1.adam_step(&mut self.q1_opt, &g.q1)?;
        self.q2.adam_step(&mut self.q2_opt, &g.q2)?;
        Ok(g.loss)
    }

    fn refresh_targets(&mut self) -> Result<()> {
        if self.updates.is_multiple_of(self.config.target_update_every) {
            self.q1_target.soft_update_from(&self.q1, self.config.tau)?;
            self.q2_target.soft_update_from(&self.q2, self.config.tau)?;
        }
        Ok(())
    }

    /// Critic step with the policy frozen, then target EMA.
    pub fn policy_evaluation_update(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self.critic_update(batch)?;
        self.updates += 1;
        self.refresh_targets()?;
        Ok(loss)
    }

    /// One full SAC update: critics, actor, temperature, then target EMA.
    pub fn update(&mut self, batch: &Batch) -> Result<SacLosses> {
        let critic = self.critic_update(batch)?;

        let noise = self.draw_noise(batch.len);
        let actor = self.actor_loss_and_grad(&batch.states, &noise, batch.len)?;
        if !actor.loss.is_finite() {
            return Err(Error::NonFinite(format!("actor loss {}", actor.loss)));
        }
        self.policy.adam_step(&mut self.policy_opt, &actor.policy)?;

        let mut temperature = 0.0;
        if self.config.fixed_temperature.is_none() {
            let (loss, grad) = self.temperature_loss_and_grad(self.log_temperature, actor.mean_log_prob);
            let mut p = [self.log_temperature];
            self.temperature_opt.step(&mut p, &[grad])?;
            self.log_temperature = p[0];
            temperature = loss;
        }

        self.updates += 1;
        self.refresh_targets()?;
        Ok(SacLosses {
            critic,
            actor: actor.loss,
            temperature,
            alpha: self.temperature(),
            entropy: -actor.mean_log_prob,
        })
    }

    /// Mean of `min(Q1, Q2)` over a batch's stored state-action pairs.
    pub fn mean_q(&self, batch: &Batch) -> Result<f64> {
        let input = concat_rows(
            &batch.states,
            self.state_dim,
            &batch.actions,
            self.action_dim,
            batch.len,
        );
        let a = self.q1.forward_batch(&input, batch.len)?;
        let b = self.q2.forward_batch(&input, batch.len)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).sum::<f64>() / batch.len as f64)
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&AgentCheckpoint {
            version: AgentCheckpoint::VERSION,
            agent: self.clone(),
        })?)
    }

    pub fn from_checkpoint(s: &str) -> Result<Self> {
        let ck: AgentCheckpoint = serde_json::from_str(s)?;
        if ck.version != AgentCheckpoint::VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported agent checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck.agent)
    }
}

#[derive(Serialize, Deserialize)]
struct AgentCheckpoint {
    version: u32,
    agent: SacAgent,
}

impl AgentCheckpoint {
    const VERSION: u32 = 1;
}
