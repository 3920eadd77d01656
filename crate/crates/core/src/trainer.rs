//! The full loop: exploration with warm start, then rollouts interleaved with
//! feedback sessions, denoised reward learning, relabeling and SAC updates.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::denoise::{
    filter_quality, train_session, DenoiseConfig, Discriminator, FilterQuality, SessionBudget, Strategy,
};
use crate::envs::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::pretrain::{pretrain_step, Intrinsic, PretrainConfig, Rollout};
use crate::query::{disagreement_select, sample_segment_pairs, Candidate, QuerySchedule};
use crate::reward::{Label, PreferenceTriple, RewardEnsemble, RewardModelConfig, Segment};
use crate::sac::{SacAgent, SacConfig};
use crate::teachers::{compare, Response, ScriptedTeacher, TeacherKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub env_config: EnvConfig,
    pub seed: u64,
    /// Environment steps including exploration.
    pub total_steps: usize,
    pub teacher: TeacherKind,
    pub schedule: QuerySchedule,
    pub strategy: Strategy,
    pub denoise: DenoiseConfig,
    pub pretrain: PretrainConfig,
    /// Fresh critics after exploration when the reward model was not warm started.
    pub reset_critic_without_warm_start: bool,
    pub sac: SacConfig,
    pub reward: RewardModelConfig,
    /// Upper limit of reward-model epochs per session.
    pub reward_epochs: usize,
    /// Training stops early once the epoch's mean loss falls below this.
    pub early_stop_loss: f64,
    pub replay_capacity: usize,
    pub eval_episodes: usize,
    pub metrics_every: usize,
    /// Skipped queries are redrawn until this many times the quota was asked.
    pub max_resample_factor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "point_mass".into(),
            env_config: EnvConfig::default(),
            seed: 0,
            total_steps: 12_000,
            teacher: TeacherKind::Oracle,
            schedule: QuerySchedule::default(),
            strategy: Strategy::Rime,
            denoise: DenoiseConfig::default(),
            pretrain: PretrainConfig::default(),
            reset_critic_without_warm_start: true,
            sac: SacConfig::default(),
            reward: RewardModelConfig::default(),
            reward_epochs: 50,
            early_stop_loss: 0.01,
            replay_capacity: 100_000,
            eval_episodes: 10,
            metrics_every: 1000,
            max_resample_factor: 10,
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        Env::make(&self.env, &self.env_config, 0)?;
        self.teacher.validate()?;
        self.schedule.validate()?;
        self.strategy.validate()?;
        self.denoise.validate()?;
        self.sac.validate()?;
        if self.total_steps < self.pretrain.steps {
            return Err(Error::InvalidConfig(format!(
                "total_steps {} is shorter than the exploration phase {}",
                self.total_steps, self.pretrain.steps
            )));
        }
        if self.pretrain.steps > 0 && self.pretrain.seed_steps >= self.pretrain.steps && self.pretrain.warm_start {
            log::warn!("warm start requested but exploration never leaves the seed phase");
        }
        if self.replay_capacity == 0 || self.metrics_every == 0 || self.reward_epochs == 0 {
            return Err(Error::InvalidConfig(
                "replay capacity, metrics cadence and reward epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Strategy after folding in the discriminator toggles: with both bounds
    /// off the filter has nothing left to do.
    pub fn effective_strategy(&self) -> Strategy {
        if self.strategy == Strategy::Rime && !self.denoise.use_lower && !self.denoise.use_upper {
            Strategy::None
        } else {
            self.strategy
        }
    }

    /// The plain-preference baseline: no warm start, no filtering, plain cross-entropy.
    pub fn baseline(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.warm_start = false;
        c.strategy = Strategy::None;
        c.denoise.use_lower = false;
        c.denoise.use_upper = false;
        c
    }
}

/// Component toggles of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub warm_start: bool,
    pub lower: bool,
    pub upper: bool,
}

impl Toggles {
    pub fn name(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!(
            "ws-{}_lower-{}_upper-{}",
            f(self.warm_start),
            f(self.lower),
            f(self.upper)
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.strategy = Strategy::Rime;
        c.pretrain.warm_start = self.warm_start;
        c.denoise.use_lower = self.lower;
        c.denoise.use_upper = self.upper;
        c
    }
}

/// All eight on/off combinations of warm start and the two bounds.
pub fn ablation_matrix(base: &RunConfig) -> Vec<(Toggles, RunConfig)> {
    let mut out = Vec::with_capacity(8);
    for warm_start in [false, true] {
        for lower in [false, true] {
            for upper in [false, true] {
                let t = Toggles {
                    warm_start,
                    lower,
                    upper,
                };
                out.push((t, t.apply(base)));
            }
        }
    }
    out
}

/// One query shown to a person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub session: u64,
    pub seg0: Segment,
    pub seg1: Segment,
    /// Planar positions of each step, for drawing the two trajectories.
    pub render0: Vec<[f64; 2]>,
    pub render1: Vec<[f64; 2]>,
}

/// Source of labels from people. Implementations block until `quota`
/// distinct queries of the batch have labels.
pub trait HumanFeedback {
    fn collect(&mut self, session: u64, queries: &[Query], quota: usize) -> Result<Vec<(u64, Label)>>;
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionStats {
    pub session: u64,
    pub labels: usize,
    pub skipped: usize,
    pub dataset: usize,
    pub trusted: usize,
    pub flipped: usize,
    pub discarded: usize,
    pub rho_before: Option<f64>,
    pub rho_after: Option<f64>,
    /// `null` while unbounded.
    pub tau_lower: Option<f64>,
    pub beta: Option<f64>,
    pub s_kl: Option<f64>,
    pub quality: Option<FilterQuality>,
    /// Share of the whole dataset whose stored label is wrong.
    pub noise_rate: Option<f64>,
    pub reward_epochs: usize,
    pub reward_loss: f64,
    /// Agreement of the reward model with noise-free labels on the dataset.
    pub reward_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    pub event: String,
    pub eval_return: Option<f64>,
    pub success_rate: Option<f64>,
    pub train_return: Option<f64>,
    pub labels: usize,
    pub sessions: u64,
    pub rho: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub warm_loss: Option<f64>,
    pub session: Option<SessionStats>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,phase,event,eval_return,success_rate,train_return,labels,sessions,rho,critic_loss,actor_loss,alpha,warm_loss,trusted,flipped,discarded,tau_lower,flip_precision,flip_recall,trusted_corruption,reward_loss,reward_accuracy";

    pub fn csv_row(&self) -> String {
        fn o(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let s = self.session.as_ref();
        let q = s.and_then(|s| s.quality);
        [
            self.step.to_string(),
            self.phase.clone(),
            self.event.clone(),
            o(self.eval_return),
            o(self.success_rate),
            o(self.train_return),
            self.labels.to_string(),
            self.sessions.to_string(),
            o(self.rho),
            o(self.critic_loss),
            o(self.actor_loss),
            o(self.alpha),
            o(self.warm_loss),
            s.map(|s| s.trusted.to_string()).unwrap_or_default(),
            s.map(|s| s.flipped.to_string()).unwrap_or_default(),
            s.map(|s| s.discarded.to_string()).unwrap_or_default(),
            o(s.and_then(|s| s.tau_lower)),
            o(q.and_then(|q| q.flip_precision)),
            o(q.and_then(|q| q.flip_recall)),
            o(q.and_then(|q| q.trusted_corruption)),
            o(s.map(|s| s.reward_loss)),
            o(s.map(|s| s.reward_accuracy)),
        ]
        .join(",")
    }
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// JSON-lines and CSV files side by side.
pub struct FileSink {
    jsonl: std::io::BufWriter<std::fs::File>,
    csv: std::io::BufWriter<std::fs::File>,
}

impl FileSink {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
        writeln!(csv, "{}", MetricsRecord::CSV_HEADER)?;
        Ok(Self { jsonl, csv })
    }
}

impl MetricsSink for FileSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, rec)?;
        writeln!(self.jsonl)?;
        writeln!(self.csv, "{}", rec.csv_row())?;
        self.jsonl.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

/// Reads a metrics JSON-lines file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Evaluation return at the exploration switch minus the lowest evaluation
/// return within `window` steps after it. `None` without a transition record
/// or an evaluation inside the window.
pub fn transition_drop(records: &[MetricsRecord], window: usize) -> Option<f64> {
    let t = records.iter().find(|r| r.event == "transition")?;
    let at = t.eval_return?;
    records
        .iter()
        .filter(|r| r.step > t.step && r.step <= t.step + window)
        .filter_map(|r| r.eval_return)
        .reduce(f64::min)
        .map(|low| at - low)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_eval_return: f64,
    pub final_success_rate: Option<f64>,
    pub labels: usize,
    pub sessions: u64,
    pub steps: usize,
}

/// Everything a run needs to resume; serializable as a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trainer {
    pub config: RunConfig,
    pub agent: SacAgent,
    pub ensemble: RewardEnsemble,
    pub discriminator: Discriminator,
    pub buffer: ReplayBuffer,
    pub dataset: Vec<PreferenceTriple>,
    rollout: Rollout,
    intrinsic: Intrinsic,
    teacher: Option<ScriptedTeacher>,
    rng: ChaCha8Rng,
    /// Environment steps taken so far, exploration included.
    pub steps: usize,
    pub labels: usize,
    pub sessions: u64,
    reward_iterations: u64,
    next_query_id: u64,
    critics_reset: bool,
    last_train_return: Option<f64>,
    last_eval: Option<(f64, Option<f64>)>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    trainer: Trainer,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let env = Env::make(&config.env, &config.env_config, seed)?;
        let (sd, ad) = (env.state_dim(), env.action_dim());
        let agent = SacAgent::new(sd, ad, config.sac.clone(), seed.wrapping_mul(7919).wrapping_add(1))?;
        let ensemble = RewardEnsemble::new(sd, ad, config.reward.clone(), seed.wrapping_mul(7919).wrapping_add(2))?;
        let teacher = match config.teacher {
            TeacherKind::Human => None,
            kind => Some(ScriptedTeacher::new(
                kind,
                env.horizon(),
                seed.wrapping_mul(7919).wrapping_add(3),
            )?),
        };
        Ok(Self {
            agent,
            ensemble,
            discriminator: Discriminator::new(config.denoise.clone())?,
            buffer: ReplayBuffer::new(config.replay_capacity)?,
            dataset: Vec::new(),
            intrinsic: Intrinsic::new(sd, config.pretrain.intrinsic.clone())?,
            rollout: Rollout::new(env),
            teacher,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(4)),
            steps: 0,
            labels: 0,
            sessions: 0,
            reward_iterations: 0,
            next_query_id: 0,
            critics_reset: false,
            last_train_return: None,
            last_eval: None,
            config,
        })
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            trainer: self.clone(),
        })?)
    }

    pub fn from_checkpoint(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        Ok(c.trainer)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_checkpoint()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }

    pub fn in_exploration(&self) -> bool {
        self.steps < self.config.pretrain.steps
    }

    pub fn finished(&self) -> bool {
        self.steps >= self.config.total_steps
    }

    /// Mean ground-truth return and success rate of the deterministic policy.
    pub fn evaluate(&self) -> Result<(f64, Option<f64>)> {
        let n = self.config.eval_episodes.max(1);
        // Same start states at every evaluation.
        let mut env = Env::make(
            &self.config.env,
            &self.config.env_config,
            self.config.seed ^ 0x5eed_e7a1,
        )?;
        let mut total = 0.0;
        let mut successes = 0usize;
        let mut defined = false;
        for _ in 0..n {
            let mut s = env.reset();
            loop {
                let a = self.agent.act_mean(&s)?;
                let t = env.step(&a)?;
                total += t.reward;
                s = t.next_state;
                if t.done || t.terminal {
                    break;
                }
            }
            if let Some(ok) = env.success(&s) {
                defined = true;
                successes += ok as usize;
            }
        }
        Ok((total / n as f64, defined.then(|| successes as f64 / n as f64)))
    }

    fn base_record(&self, event: &str) -> MetricsRecord {
        MetricsRecord {
            step: self.steps,
            phase: if self.in_exploration() { "explore" } else { "online" }.into(),
            event: event.into(),
            labels: self.labels,
            sessions: self.sessions,
            rho: self.discriminator.rho,
            train_return: self.last_train_return,
            alpha: Some(self.agent.temperature()),
            ..MetricsRecord::default()
        }
    }

    fn eval_record(&mut self) -> Result<MetricsRecord> {
        let (ret, success) = self.evaluate()?;
        self.last_eval = Some((ret, success));
        let mut rec = self.base_record("eval");
        rec.eval_return = Some(ret);
        rec.success_rate = success;
        Ok(rec)
    }

    fn episode_finished(&mut self, ret: f64) {
        self.last_train_return = Some(ret);
        if let Some(t) = &mut self.teacher {
            t.update_running_return(ret);
        }
    }

    fn session_due(&self) -> bool {
        let online = self.steps - self.config.pretrain.steps;
        self.labels < self.config.schedule.total_budget && online.is_multiple_of(self.config.schedule.interval)
    }

    /// Runs to `total_steps`, writing metrics and, if `checkpoint` is set,
    /// a checkpoint after every session and at the end.
    pub fn run(
        &mut self,
        sink: &mut dyn MetricsSink,
        mut human: Option<&mut dyn HumanFeedback>,
        checkpoint: Option<&Path>,
    ) -> Result<RunSummary> {
        if self.config.teacher == TeacherKind::Human && human.is_none() {
            return Err(Error::Feedback(
                "human teacher configured but no feedback source given".into(),
            ));
        }
        let every = self.config.metrics_every;
        let mut last_warm = None;
        while !self.finished() {
            if self.in_exploration() {
                let i = self.steps;
                let out = pretrain_step(
                    &self.config.pretrain,
                    i,
                    &mut self.agent,
                    &mut self.rollout,
                    &mut self.ensemble,
                    &mut self.buffer,
                    &mut self.intrinsic,
                    &mut self.rng,
                )?;
                if let Some((_, ret)) = out.finished {
                    self.episode_finished(ret);
                }
                if out.warm_loss.is_some() {
                    last_warm = out.warm_loss;
                }
                self.steps += 1;
                if self.steps.is_multiple_of(every) && self.in_exploration() {
                    let mut rec = self.eval_record()?;
                    rec.warm_loss = last_warm;
                    sink.record(&rec)?;
                }
                continue;
            }

            if self.steps == self.config.pretrain.steps && !self.critics_reset {
                // Transition point: measure, then optionally drop the critics.
                let mut rec = self.eval_record()?;
                rec.event = "transition".into();
                rec.warm_loss = last_warm;
                sink.record(&rec)?;
                if !self.config.pretrain.warm_start && self.config.reset_critic_without_warm_start {
                    self.agent
                        .reset_critics(self.config.seed.wrapping_mul(7919).wrapping_add(5))?;
                }
                self.critics_reset = true;
            }

            if self.session_due() {
                let stats = self.session(human.as_deref_mut())?;
                let mut rec = self.base_record("session");
                rec.session = Some(stats);
                sink.record(&rec)?;
                if let Some(p) = checkpoint {
                    self.save_checkpoint(p)?;
                }
            }

            let state = self.rollout.state().to_vec();
            let action = self.agent.act(&state, false)?;
            let episode = self.rollout.episode;
            let (mut t, index, finished) = self.rollout.step(&action)?;
            let true_reward = t.reward;
            let mut input = t.state.clone();
            input.extend_from_slice(&t.action);
            t.reward = self.ensemble.mean_rewards(&input, 1)?[0];
            self.buffer.push(t, episode, index, true_reward);
            if let Some(ret) = finished {
                self.episode_finished(ret);
            }
            let batch = self.buffer.sample(&mut self.rng, self.config.sac.batch_size)?;
            let losses = self.agent.update(&batch)?;
            self.steps += 1;

            let online = self.steps - self.config.pretrain.steps;
            if online.is_multiple_of(every) || self.finished() {
                let mut rec = self.eval_record()?;
                rec.critic_loss = Some(losses.critic);
                rec.actor_loss = Some(losses.actor);
                sink.record(&rec)?;
            }
        }
        if self.last_eval.is_none() {
            let rec = self.eval_record()?;
            sink.record(&rec)?;
        }
        if let Some(p) = checkpoint {
            self.save_checkpoint(p)?;
        }
        let (ret, success) = self.last_eval.expect("evaluated above");
        Ok(RunSummary {
            final_eval_return: ret,
            final_success_rate: success,
            labels: self.labels,
            sessions: self.sessions,
            steps: self.steps,
        })
    }

    fn true_label(seg0: &Segment, seg1: &Segment) -> Label {
        compare(seg0.true_return(), seg1.true_return())
    }

    fn render(&self, seg: &Segment) -> Vec<[f64; 2]> {
        seg.states
            .chunks_exact(seg.state_dim)
            .map(|s| self.rollout.env.render_position(s))
            .collect()
    }

    /// Candidates ranked by disagreement.
    fn select_queries(&mut self, m: usize) -> Result<Vec<Candidate>> {
        let pool = self.config.schedule.pool().max(m);
        let candidates = sample_segment_pairs(&self.buffer, pool, self.config.schedule.segment_len, &mut self.rng)?;
        if candidates.len() < m {
            return Err(Error::InsufficientData(format!(
                "need {m} candidate pairs, found {}",
                candidates.len()
            )));
        }
        let idx = disagreement_select(&self.ensemble, &candidates, m)?;
        Ok(idx.into_iter().map(|i| candidates[i].clone()).collect())
    }

    fn gather_scripted(&mut self, quota: usize) -> Result<(Vec<PreferenceTriple>, usize)> {
        let mut out = Vec::with_capacity(quota);
        let mut skipped = 0;
        let mut pending = self.select_queries(quota)?;
        let max_asks = quota * self.config.max_resample_factor.max(1);
        let mut asked = 0;
        while out.len() < quota && asked < max_asks {
            let c = match pending.pop() {
                Some(c) => c,
                None => {
                    let need = quota - out.len();
                    pending = self.select_queries(need)?;
                    continue;
                }
            };
            asked += 1;
            let teacher = self.teacher.as_mut().expect("scripted teacher present");
            match teacher.label(&c.seg0, &c.seg1)? {
                Response::Skip => skipped += 1,
                Response::Label(label) => {
                    let mut t = PreferenceTriple::new(c.seg0, c.seg1, label, self.sessions)?;
                    t.true_label = Some(Self::true_label(&t.seg0, &t.seg1));
                    out.push(t);
                }
            }
        }
        if out.len() < quota {
            log::warn!(
                "session {} proceeds with {} of {quota} labels after {skipped} skips",
                self.sessions,
                out.len()
            );
        }
        // Selection order, most disputed first.
        out.reverse();
        Ok((out, skipped))
    }

    fn gather_human(&mut self, quota: usize, human: &mut dyn HumanFeedback) -> Result<Vec<PreferenceTriple>> {
        let chosen = self.select_queries(quota)?;
        let queries: Vec<Query> = chosen
            .into_iter()
            .map(|c| {
                let id = self.next_query_id;
                self.next_query_id += 1;
                Query {
                    id,
                    session: self.sessions,
                    render0: self.render(&c.seg0),
                    render1: self.render(&c.seg1),
                    seg0: c.seg0,
                    seg1: c.seg1,
                }
            })
            .collect();
        let answers = human.collect(self.sessions, &queries, quota)?;
        let mut out = Vec::with_capacity(answers.len());
        let mut seen = std::collections::HashSet::new();
        for (id, label) in answers {
            if !seen.insert(id) {
                continue;
            }
            let q = queries
                .iter()
                .find(|q| q.id == id)
                .ok_or_else(|| Error::Feedback(format!("label for unknown query {id}")))?;
            let mut t = PreferenceTriple::new(q.seg0.clone(), q.seg1.clone(), label, self.sessions)?;
            t.true_label = Some(Self::true_label(&q.seg0, &q.seg1));
            out.push(t);
        }
        if out.len() < quota {
            return Err(Error::Feedback(format!(
                "feedback source returned {} of {quota} labels",
                out.len()
            )));
        }
        out.truncate(quota);
        Ok(out)
    }

    /// One feedback session: query, label, filter, train, relabel, update rho.
    pub fn session(&mut self, human: Option<&mut (dyn HumanFeedback + '_)>) -> Result<SessionStats> {
        let quota = self.config.schedule.quota(self.labels);
        let (fresh, skipped) = match human {
            Some(h) if self.teacher.is_none() => (self.gather_human(quota, h)?, 0),
            _ => self.gather_scripted(quota)?,
        };
        self.labels += fresh.len();
        self.dataset.extend(fresh.iter().cloned());
        let mut stats = SessionStats {
            session: self.sessions,
            labels: fresh.len(),
            skipped,
            dataset: self.dataset.len(),
            rho_before: self.discriminator.rho,
            ..SessionStats::default()
        };
        if self.dataset.is_empty() {
            self.sessions += 1;
            return Ok(stats);
        }
        let wrong = self
            .dataset
            .iter()
            .filter(|t| t.true_label.is_some_and(|l| l != t.label))
            .count();
        stats.noise_rate = Some(wrong as f64 / self.dataset.len() as f64);
        let out = train_session(
            &mut self.ensemble,
            &mut self.discriminator,
            self.config.effective_strategy(),
            &self.dataset,
            SessionBudget {
                max_epochs: self.config.reward_epochs,
                early_stop_loss: self.config.early_stop_loss,
            },
            &mut self.rng,
            &mut self.reward_iterations,
        )?;
        match &out.report {
            Some(report) => {
                stats.trusted = report.trusted.len();
                stats.flipped = report.flipped.len();
                stats.discarded = report.discarded.len();
                stats.tau_lower = report.tau_lower.is_finite().then_some(report.tau_lower);
                stats.beta = Some(report.beta);
                stats.s_kl = Some(report.s_kl);
                stats.quality = Some(filter_quality(report, &self.dataset));
            }
            None => stats.trusted = self.dataset.len(),
        }
        stats.reward_epochs = out.epochs;
        stats.reward_loss = out.loss;
        stats.rho_after = out.rho_after;
        self.ensemble.relabel(&mut self.buffer)?;
        let truth: Vec<PreferenceTriple> = self
            .dataset
            .iter()
            .filter_map(|t| t.true_label.map(|l| t.with_label(l)))
            .collect();
        stats.reward_accuracy = self.ensemble.accuracy(&truth)?;
        self.sessions += 1;
        Ok(stats)
    }
}
