//! Advantage actor-critic training.
//!
//! Actors roll out episodes against parameter snapshots, cut them into
//! N-step groups with bootstrapped returns and hand them to a single
//! learner, which batches tuples, applies Adam and republishes parameters.
//! With one actor everything runs in lockstep on the calling thread.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{reset, step, EnvParams, GroundingTask};
use crate::error::{Error, Result};
use crate::geometry::Action;
use crate::network::linalg::entropy;
use crate::network::{Adam, AdamConfig, LossConfig, LstmState, NetworkDims, NetworkParams, Segment, TrainingTuple};
use crate::observation::{ContextMode, EpisodeFeatures, FeatureProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub actor_count: usize,
    /// Steps per return group.
    pub n_step: usize,
    pub entropy_beta: f64,
    pub adam: AdamConfig,
    /// Environment steps to run.
    pub total_steps: usize,
    /// Fraction of `total_steps` after which the learning rate is halved.
    pub lr_halving_fraction: f64,
    pub seed: u64,
    /// Tuples per learner update.
    pub batch_size: usize,
    /// Episode batches the collector queue holds before actors block.
    pub queue_capacity: usize,
    pub metrics_every: usize,
    pub context_mode: ContextMode,
    pub env: EnvParams,
    pub fc1: usize,
    pub fc2: usize,
    pub lstm: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            actor_count: 8,
            n_step: 5,
            entropy_beta: 1e-2,
            adam: AdamConfig::default(),
            total_steps: 200_000,
            lr_halving_fraction: 0.5,
            seed: 0,
            batch_size: 20,
            queue_capacity: 64,
            metrics_every: 1000,
            context_mode: ContextMode::Full,
            env: EnvParams::default(),
            fc1: 128,
            fc2: 128,
            lstm: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.actor_count == 0 {
            return bad("actor_count must be at least 1");
        }
        if self.n_step == 0 {
            return bad("n_step must be at least 1");
        }
        if self.batch_size == 0 || self.queue_capacity == 0 || self.metrics_every == 0 {
            return bad("batch_size, queue_capacity and metrics_every must be positive");
        }
        if !(self.adam.lr > 0.0 && self.entropy_beta >= 0.0 && self.adam.eps > 0.0) {
            return bad("learning rate and epsilon must be positive, entropy_beta non-negative");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lr_halving_fraction) {
            return bad("lr_halving_fraction must lie in [0, 1]");
        }
        if self.fc1 == 0 || self.fc2 == 0 || self.lstm == 0 {
            return bad("network widths must be positive");
        }
        self.env.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network_dims(&self, query_dim: usize, channels: usize) -> NetworkDims {
        NetworkDims {
            query_dim,
            visual_dim: 2 * channels,
            extra_dim: crate::observation::EXTRA_DIM,
            fc1: self.fc1,
            fc2: self.fc2,
            lstm: self.lstm,
        }
    }

    fn halving_step(&self) -> usize {
        (self.lr_halving_fraction * self.total_steps as f64).round() as usize
    }
}

/// Group end for step `t`: the first index past the N-group holding `t`.
pub fn group_end(t: usize, n: usize) -> usize {
    n * (t / n + 1)
}

/// Bootstrapped N-step targets for one finished episode.
///
/// `rewards[t]` is `r_t` for `t = 0..=T`; `values[t]` is `V(s_t)` for the
/// same indices. A group ending inside the episode bootstraps from the value
/// at its end; the last group sums rewards to termination.
pub fn n_step_returns(rewards: &[f64], values: &[f64], gamma: f64, n: usize) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "one value per step");
    assert!(n >= 1, "group length must be positive");
    let len = rewards.len();
    let mut out = vec![0.0; len];
    let mut start = 0;
    while start < len {
        let end = group_end(start, n);
        let mut acc = if end < len { values[end] } else { 0.0 };
        for t in (start..end.min(len)).rev() {
            acc = rewards[t] + gamma * acc;
            out[t] = acc;
        }
        start = end;
    }
    out
}

/// Index ranges of the N-step groups of an episode with `len` steps.
pub fn group_ranges(len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    (0..len).step_by(n).map(|s| s..(s + n).min(len)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub total_reward: f64,
    pub length: usize,
    /// Ended by Trigger with the box above the IoU threshold.
    pub success: bool,
    pub entropy_sum: f64,
}

/// One finished episode cut into training groups.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub segments: Vec<Segment>,
    pub rewards: Vec<f64>,
    pub summary: EpisodeSummary,
}

/// Read side of the published parameters.
pub struct SnapshotCell {
    inner: RwLock<Arc<NetworkParams>>,
}

impl SnapshotCell {
    pub fn new(params: NetworkParams) -> Self {
        Self {
            inner: RwLock::new(Arc::new(params)),
        }
    }

    pub fn load(&self) -> Arc<NetworkParams> {
        Arc::clone(&self.inner.read().unwrap())
    }

    pub fn publish(&self, params: NetworkParams) {
        *self.inner.write().unwrap() = Arc::new(params);
    }
}

pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::ALL[i];
        }
    }
    // rounding left the draw past the last bucket
    let last = probs.iter().rposition(|p| *p > 0.0).unwrap_or(Action::COUNT - 1);
    Action::ALL[last]
}

/// Runs one episode, refreshing the snapshot at every group boundary.
pub fn run_episode(
    task: &Arc<GroundingTask>,
    provider: &dyn FeatureProvider,
    snapshots: &SnapshotCell,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeBatch> {
    let episode = EpisodeFeatures::load(task, provider, config.context_mode)?;
    let mut state = reset(Arc::clone(task));
    let mut params = snapshots.load();
    let mut lstm = params.initial_state();
    let mut inputs = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut values = Vec::new();
    let mut group_starts: Vec<LstmState> = Vec::new();
    let mut entropy_sum = 0.0;
    let triggered = loop {
        let t = rewards.len();
        if t % config.n_step == 0 {
            if t > 0 {
                params = snapshots.load();
            }
            group_starts.push(lstm.clone());
        }
        let inp = episode.inputs(&state);
        let out = params.forward_inputs(&inp, &lstm);
        let action = sample_action(&out.probs, rng);
        entropy_sum += entropy(&out.probs);
        let (tr, next) = step(&state, action, &config.env)?;
        inputs.push(inp);
        actions.push(action);
        rewards.push(tr.reward);
        values.push(out.value);
        lstm = out.state;
        state = next;
        if tr.done {
            break action == Action::Trigger;
        }
    };
    let targets = n_step_returns(&rewards, &values, config.env.reward.gamma, config.n_step);
    let mut tuples = inputs
        .into_iter()
        .zip(actions)
        .zip(targets)
        .map(|((inputs, action), target)| TrainingTuple { inputs, action, target });
    let segments = group_ranges(rewards.len(), config.n_step)
        .into_iter()
        .zip(group_starts)
        .map(|(r, initial)| Segment {
            initial,
            tuples: tuples.by_ref().take(r.len()).collect(),
        })
        .collect();
    let summary = EpisodeSummary {
        total_reward: rewards.iter().sum(),
        length: rewards.len(),
        success: triggered && state.iou() > config.env.reward.tau,
        entropy_sum,
    };
    Ok(EpisodeBatch {
        segments,
        rewards,
        summary,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub success_rate: f64,
    pub entropy: f64,
    pub alpha: f64,
}

impl MetricsRecord {
    pub const FIELDS: [&'static str; 7] = [
        "step",
        "episodes",
        "mean_reward",
        "mean_length",
        "success_rate",
        "entropy",
        "alpha",
    ];
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} episodes={} mean_reward={} mean_length={} success_rate={} entropy={} alpha={}",
            self.step, self.episodes, self.mean_reward, self.mean_length, self.success_rate, self.entropy, self.alpha
        )
    }
}

impl FromStr for MetricsRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("metrics record", reason);
        let mut vals = [None::<&str>; 7];
        for pair in line.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad(format!("{pair:?} is not key=value")))?;
            let i = Self::FIELDS
                .iter()
                .position(|f| *f == k)
                .ok_or_else(|| bad(format!("unknown field {k:?}")))?;
            vals[i] = Some(v);
        }
        let get = |i: usize| vals[i].ok_or_else(|| bad(format!("missing field {}", Self::FIELDS[i])));
        let int = |i: usize| get(i)?.parse::<usize>().map_err(|e| bad(e.to_string()));
        let real = |i: usize| get(i)?.parse::<f64>().map_err(|e| bad(e.to_string()));
        Ok(Self {
            step: int(0)?,
            episodes: int(1)?,
            mean_reward: real(2)?,
            mean_length: real(3)?,
            success_rate: real(4)?,
            entropy: real(5)?,
            alpha: real(6)?,
        })
    }
}

#[derive(Debug, Default)]
struct Window {
    episodes: usize,
    reward: f64,
    length: usize,
    successes: usize,
    entropy: f64,
}

/// Master parameters, optimizer and bookkeeping.
struct Learner<'a> {
    config: &'a TrainConfig,
    params: NetworkParams,
    adam: Adam,
    loss: LossConfig,
    pending: Vec<Segment>,
    pending_tuples: usize,
    env_steps: usize,
    tuples: usize,
    updates: usize,
    episodes: usize,
    halved: bool,
    window: Window,
    next_report: usize,
    metrics: Vec<MetricsRecord>,
    on_metrics: &'a mut dyn FnMut(&MetricsRecord),
}

impl Learner<'_> {
    fn ingest(&mut self, batch: EpisodeBatch, snapshots: &SnapshotCell) {
        let s = batch.summary;
        self.env_steps += s.length;
        self.episodes += 1;
        self.window.episodes += 1;
        self.window.reward += s.total_reward;
        self.window.length += s.length;
        self.window.successes += s.success as usize;
        self.window.entropy += s.entropy_sum;
        for seg in batch.segments {
            self.pending_tuples += seg.tuples.len();
            self.pending.push(seg);
            if self.pending_tuples >= self.config.batch_size {
                self.update(snapshots);
            }
        }
        if self.env_steps >= self.next_report {
            self.report();
        }
    }

    fn update(&mut self, snapshots: &SnapshotCell) {
        if self.pending.is_empty() {
            return;
        }
        let (grads, stats) = self.params.compute_update(&self.pending, &self.loss);
        self.adam.update(self.params.as_mut_slice(), grads.as_slice());
        self.tuples += stats.tuples;
        self.updates += 1;
        self.pending.clear();
        self.pending_tuples = 0;
        if !self.halved && self.tuples >= self.config.halving_step() {
            self.adam.set_lr(self.adam.lr() / 2.0);
            self.halved = true;
        }
        snapshots.publish(self.params.clone());
    }

    fn report(&mut self) {
        let w = std::mem::take(&mut self.window);
        let n = w.episodes.max(1) as f64;
        let rec = MetricsRecord {
            step: self.env_steps,
            episodes: self.episodes,
            mean_reward: w.reward / n,
            mean_length: w.length as f64 / n,
            success_rate: w.successes as f64 / n,
            entropy: if w.length > 0 { w.entropy / w.length as f64 } else { 0.0 },
            alpha: self.adam.lr(),
        };
        (self.on_metrics)(&rec);
        self.metrics.push(rec);
        while self.next_report <= self.env_steps {
            self.next_report += self.config.metrics_every;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub metrics: Vec<MetricsRecord>,
    pub env_steps: usize,
    /// Tuples consumed by the learner; equals `env_steps`.
    pub tuples: usize,
    pub updates: usize,
    pub episodes: usize,
    pub skipped_tasks: usize,
}

/// Probes one task to learn the query and channel dims.
pub fn probe_dims(config: &TrainConfig, provider: &dyn FeatureProvider, task: &GroundingTask) -> Result<NetworkDims> {
    let f = provider.features(task)?;
    Ok(config.network_dims(f.query.len(), f.map.channels()))
}

pub fn train(config: &TrainConfig, provider: &dyn FeatureProvider, tasks: &[Arc<GroundingTask>]) -> Result<TrainOutcome> {
    train_with(config, provider, tasks, None, &mut |_| {})
}

/// Trains from `init` (or fresh parameters) and calls `on_metrics` for every
/// metrics record as it is produced.
pub fn train_with(
    config: &TrainConfig,
    provider: &dyn FeatureProvider,
    tasks: &[Arc<GroundingTask>],
    init: Option<NetworkParams>,
    on_metrics: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("training needs at least one task".into()));
    }
    let params = match init {
        Some(p) => p,
        None => {
            let dims = tasks
                .iter()
                .find_map(|t| probe_dims(config, provider, t).ok())
                .ok_or_else(|| Error::Config("no task could be loaded".into()))?;
            NetworkParams::init(dims, config.context_mode, config.seed)?
        }
    };
    if params.mode() != config.context_mode {
        return Err(Error::Config("initial parameters use a different context mode".into()));
    }
    let snapshots = SnapshotCell::new(params.clone());
    let mut learner = Learner {
        config,
        adam: Adam::new(config.adam, params.len()),
        params,
        loss: LossConfig::new(config.entropy_beta),
        pending: Vec::new(),
        pending_tuples: 0,
        env_steps: 0,
        tuples: 0,
        updates: 0,
        episodes: 0,
        halved: false,
        window: Window::default(),
        next_report: config.metrics_every,
        metrics: Vec::new(),
        on_metrics,
    };
    let skipped = AtomicUsize::new(0);
    if config.actor_count == 1 {
        let mut rng = actor_rng(config.seed, 0);
        while learner.env_steps < config.total_steps {
            let task = &tasks[rng.gen_range(0..tasks.len())];
            match run_episode(task, provider, &snapshots, config, &mut rng) {
                Ok(batch) => learner.ingest(batch, &snapshots),
                Err(Error::TaskLoad { .. }) => {
                    if skipped.fetch_add(1, Ordering::Relaxed) + 1 > 10 * tasks.len() + 100 {
                        return Err(Error::Config("too many tasks failed to load".into()));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    } else {
        run_parallel(config, provider, tasks, &snapshots, &mut learner, &skipped)?;
    }
    learner.update(&snapshots);
    if !learner.env_steps.is_multiple_of(config.metrics_every) && learner.window.episodes > 0 {
        learner.report();
    }
    debug_assert_eq!(learner.tuples, learner.env_steps);
    Ok(TrainOutcome {
        params: learner.params,
        metrics: learner.metrics,
        env_steps: learner.env_steps,
        tuples: learner.tuples,
        updates: learner.updates,
        episodes: learner.episodes,
        skipped_tasks: skipped.into_inner(),
    })
}

fn actor_rng(seed: u64, actor: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(actor as u64 + 1);
    rng
}

fn run_parallel(
    config: &TrainConfig,
    provider: &dyn FeatureProvider,
    tasks: &[Arc<GroundingTask>],
    snapshots: &SnapshotCell,
    learner: &mut Learner<'_>,
    skipped: &AtomicUsize,
) -> Result<()> {
    let claimed = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::sync_channel::<EpisodeBatch>(config.queue_capacity);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for actor in 0..config.actor_count {
            let tx = tx.clone();
            let (claimed, stop) = (&claimed, &stop);
            handles.push(scope.spawn(move || -> Result<()> {
                let mut rng = actor_rng(config.seed, actor);
                while !stop.load(Ordering::Relaxed) && claimed.load(Ordering::Relaxed) < config.total_steps {
                    let task = &tasks[rng.gen_range(0..tasks.len())];
                    match run_episode(task, provider, snapshots, config, &mut rng) {
                        Ok(batch) => {
                            claimed.fetch_add(batch.summary.length, Ordering::Relaxed);
                            if tx.send(batch).is_err() {
                                break;
                            }
                        }
                        Err(Error::TaskLoad { .. }) => {
                            if skipped.fetch_add(1, Ordering::Relaxed) + 1 > 10 * tasks.len() + 100 {
                                stop.store(true, Ordering::Relaxed);
                                return Err(Error::Config("too many tasks failed to load".into()));
                            }
                        }
                        Err(e) => {
                            stop.store(true, Ordering::Relaxed);
                            return Err(e);
                        }
                    }
                }
                Ok(())
            }));
        }
        drop(tx);
        // drain until every actor has hung up
        for batch in rx {
            learner.ingest(batch, snapshots);
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("actor thread panicked"))
            .collect::<Result<Vec<()>>>()
            .map(|_| ())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_without_bootstrap() {
        let r = n_step_returns(&[0.1, 0.2, 1.0], &[9.0, 9.0, 9.0], 0.99, 5);
        assert!((r[0] - 1.2781).abs() < 1e-12);
    }

    #[test]
    fn returns_with_bootstrap() {
        let rewards = [0.0, 0.0, 0.0, 0.0, 0.1, 5.0];
        let values = [0.0, 0.0, 0.0, 0.0, 0.0, 0.2];
        let r = n_step_returns(&rewards, &values, 0.99, 5);
        let want = 0.99f64.powi(4) * 0.1 + 0.99f64.powi(5) * 0.2;
        assert!((r[0] - want).abs() < 1e-12);
        assert!((r[0] - 0.28625761).abs() < 1e-8);
        assert_eq!(r[5], 5.0);
    }

    #[test]
    fn undiscounted_zero_rewards_pass_value_through() {
        let values = [0.0, 1.0, 2.0, 3.0, 4.0, 0.75, 6.0];
        let r = n_step_returns(&[0.0; 7], &values, 1.0, 5);
        assert!(r[..5].iter().all(|v| *v == 0.75));
    }

    #[test]
    fn groups_of_an_eight_step_episode() {
        assert_eq!(group_ranges(8, 5), vec![0..5, 5..8]);
        assert_eq!(group_end(4, 5), 5);
        assert_eq!(group_end(5, 5), 10);
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = MetricsRecord {
            step: 3000,
            episodes: 41,
            mean_reward: -0.125,
            mean_length: 72.5,
            success_rate: 0.1,
            entropy: 2.19,
            alpha: 1e-4,
        };
        let line = m.to_string();
        assert!(line.starts_with("step=3000 episodes=41 "));
        assert_eq!(line.parse::<MetricsRecord>().unwrap(), m);
        assert!("step=1 episodes=2".parse::<MetricsRecord>().is_err());
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = [0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.25];
        let mut counts = [0usize; 9];
        for _ in 0..4000 {
            counts[sample_action(&probs, &mut rng).index()] += 1;
        }
        assert_eq!(counts[0] + counts[2], 0);
        assert!((counts[1] as f64 / 4000.0 - 0.5).abs() < 0.03);
        assert!((counts[8] as f64 / 4000.0 - 0.25).abs() < 0.03);
    }
}
