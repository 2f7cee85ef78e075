//! The bilevel outer loop: warm-up at a fixed σ, then repeated rounds of
//! K-sample σ exploration, independent inner training of K clones, best
//! model broadcast, per-landmark σ selection, controller updates and the
//! variance-based early stop. The fixed, decay and coordinate-regression
//! baselines run through the same epoch bookkeeping.

use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{compute_reward, sample_action, Controller, PolicyShape, Trajectory};
use crate::error::{Error, Result};
use crate::heatmap::{SigmaBounds, SigmaVector};
use crate::learner::{Architecture, Decode, Network, Precision, TrainSettings};
use crate::metrics::{summarize, Summary};
use crate::rundir::mean_traces;
use crate::synthdata::{DatasetSplit, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Laoml,
    Fixed,
    Decay,
    Coordreg,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Laoml => "laoml",
            Mode::Fixed => "fixed",
            Mode::Decay => "decay",
            Mode::Coordreg => "coordreg",
        })
    }
}

/// Where each landmark's next σ comes from after a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaBroadcast {
    /// σ_i from the sample with the best error on landmark i.
    #[default]
    PerLandmark,
    /// The whole σ-set of the broadcast model.
    Global,
}

/// Every run constant. Keys are flat so a config file is a single JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// K, σ-sets explored per round.
    pub samples: usize,
    /// t′, inner epochs per round; also the controller input length.
    pub inner_epochs: usize,
    pub epochs: usize,
    /// W; `None` means 30 scaled to the epoch budget.
    pub warmup: Option<usize>,
    pub sigma_init: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub reward_c: f64,
    pub early_stop: bool,
    /// M, in epochs.
    pub early_stop_window: usize,
    pub early_stop_threshold: f64,
    /// `None` means 100 scaled to the epoch budget.
    pub early_stop_start: Option<usize>,
    pub lr: f64,
    pub coordreg_lr: f64,
    pub controller_lr: f64,
    pub batch: usize,
    pub augment: bool,
    pub seed: u64,
    pub pck: Vec<f64>,
    pub sigma_broadcast: SigmaBroadcast,
    pub precision: Precision,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub controller_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Laoml,
            samples: 10,
            inner_epochs: 5,
            epochs: 250,
            warmup: None,
            sigma_init: 5.0,
            sigma_min: 1.0,
            sigma_max: 20.0,
            reward_c: 25.0,
            early_stop: true,
            early_stop_window: 30,
            early_stop_threshold: 0.01,
            early_stop_start: None,
            lr: 2e-4,
            coordreg_lr: 1e-3,
            controller_lr: 1e-3,
            batch: 8,
            augment: true,
            seed: 0,
            pck: vec![2.0, 3.0, 5.0],
            sigma_broadcast: SigmaBroadcast::PerLandmark,
            precision: Precision::F64,
            depth: 3,
            widths: vec![8, 16, 32],
            controller_hidden: vec![64, 32],
        }
    }
}

pub const REFERENCE_EPOCHS: usize = 250;
pub const REFERENCE_WARMUP: usize = 30;
pub const REFERENCE_EARLY_STOP_START: usize = 100;

/// `value * epochs / 250` rounded to the nearest multiple of `step` when the
/// budget is below 250 epochs; `value` otherwise.
pub fn scale_to_budget(value: usize, epochs: usize, step: usize) -> usize {
    if epochs >= REFERENCE_EPOCHS || step == 0 {
        return value;
    }
    let scaled = value as f64 * epochs as f64 / REFERENCE_EPOCHS as f64;
    ((scaled / step as f64).round() as usize) * step
}

impl TrainConfig {
    pub fn warmup_epochs(&self) -> usize {
        self.warmup
            .unwrap_or_else(|| scale_to_budget(REFERENCE_WARMUP, self.epochs, self.inner_epochs))
    }

    pub fn early_stop_start_epoch(&self) -> usize {
        self.early_stop_start
            .unwrap_or_else(|| scale_to_budget(REFERENCE_EARLY_STOP_START, self.epochs, self.inner_epochs))
    }

    /// The same config with the scaled defaults written out.
    pub fn resolved(&self) -> Self {
        Self {
            warmup: Some(self.warmup_epochs()),
            early_stop_start: Some(self.early_stop_start_epoch()),
            ..self.clone()
        }
    }

    pub fn bounds(&self) -> SigmaBounds {
        SigmaBounds {
            min: self.sigma_min,
            max: self.sigma_max,
        }
    }

    /// Number of outer rounds in laoml mode.
    pub fn iterations(&self) -> usize {
        match self.mode {
            Mode::Laoml => self.epochs.saturating_sub(self.warmup_epochs()) / self.inner_epochs.max(1),
            _ => 0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let t = self.inner_epochs;
        if self.samples == 0 {
            v.push("samples (K) must be at least 1".to_string());
        }
        if t == 0 {
            v.push("inner_epochs must be at least 1".to_string());
        }
        if self.epochs == 0 {
            v.push("epochs must be at least 1".to_string());
        }
        let w = self.warmup_epochs();
        if self.mode == Mode::Laoml {
            if w > self.epochs {
                v.push(format!("warm-up ({w}) exceeds the epoch budget ({})", self.epochs));
            }
            if w == 0 {
                v.push("laoml needs at least one warm-up epoch to seed the controller inputs".to_string());
            }
            if t > 0 && w % t != 0 {
                v.push(format!("warm-up ({w}) must be a multiple of inner_epochs ({t})"));
            }
            let s = self.early_stop_start_epoch();
            if t > 0 && s % t != 0 {
                v.push(format!("early_stop_start ({s}) must be a multiple of inner_epochs ({t})"));
            }
            if t > 0 && (self.early_stop_window == 0 || self.early_stop_window % t != 0) {
                v.push(format!(
                    "early_stop_window ({}) must be a positive multiple of inner_epochs ({t})",
                    self.early_stop_window
                ));
            }
        }
        let finite = |x: f64| x.is_finite();
        if !(finite(self.sigma_min) && self.sigma_min > 0.0) {
            v.push(format!("sigma_min must be positive, got {}", self.sigma_min));
        }
        if !(finite(self.sigma_max) && self.sigma_min <= self.sigma_init && self.sigma_init <= self.sigma_max) {
            v.push(format!(
                "need sigma_min <= sigma_init <= sigma_max, got {} <= {} <= {}",
                self.sigma_min, self.sigma_init, self.sigma_max
            ));
        }
        if !(finite(self.early_stop_threshold) && self.early_stop_threshold >= 0.0) {
            v.push("early_stop_threshold must be finite and non-negative".to_string());
        }
        if !finite(self.reward_c) {
            v.push("reward_c must be finite".to_string());
        }
        for (name, lr) in [("lr", self.lr), ("coordreg_lr", self.coordreg_lr), ("controller_lr", self.controller_lr)] {
            if !(finite(lr) && lr >= 0.0) {
                v.push(format!("{name} must be finite and non-negative, got {lr}"));
            }
        }
        if self.batch == 0 {
            v.push("batch must be at least 1".to_string());
        }
        if let Some(r) = self.pck.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            v.push(format!("PCK thresholds must be positive, got {r}"));
        }
        if self.depth == 0 || self.widths.len() != self.depth || self.widths.contains(&0) {
            v.push(format!(
                "depth {} needs that many positive widths, got {:?}",
                self.depth, self.widths
            ));
        }
        if self.controller_hidden.contains(&0) {
            v.push("controller_hidden sizes must be positive".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("\n")))
        }
    }

    fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lr: if self.mode == Mode::Coordreg { self.coordreg_lr } else { self.lr },
            batch: self.batch,
            augment: self.augment,
        }
    }

    pub fn decode(&self) -> Decode {
        if self.mode == Mode::Coordreg {
            Decode::SoftArgmax
        } else {
            Decode::Argmax
        }
    }

    fn policy_shape(&self) -> PolicyShape {
        PolicyShape {
            input: self.inner_epochs,
            hidden: self.controller_hidden.clone(),
        }
    }
}

const TAG_LEARNER: u64 = 1;
const TAG_CONTROLLER: u64 = 2;
const TAG_ACTIONS: u64 = 3;
const TAG_EPOCH: u64 = 4;

/// Independent stream for `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_mut(8).zip([seed, tag, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream used for epoch `epoch` of sample `sample`. Single-lineage training
/// uses sample 0, so a K = 1 round replays plain training exactly.
pub fn epoch_stream(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    stream(seed, TAG_EPOCH, epoch as u64, sample as u64)
}

pub fn learner_seed(seed: u64) -> u64 {
    let mut key = stream(seed, TAG_LEARNER, 0, 0);
    rand::Rng::gen(&mut key)
}

/// One epoch of inner training: per-landmark training loss and, after the
/// epoch, per-landmark validation MRE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_mse: Vec<f64>,
    pub val_mre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: Vec<f64>,
    pub val_mre: Vec<f64>,
}

impl EpochRecord {
    pub fn mean_val_mre(&self) -> f64 {
        self.val_mre.iter().sum::<f64>() / self.val_mre.len().max(1) as f64
    }
}

/// The inner level as seen by the outer loop.
pub trait InnerModel: Clone + Send + Sync {
    fn landmarks(&self) -> usize;
    /// Trains one epoch with the given σ-set (ignored by models that do not
    /// use heatmap targets) and validates afterwards.
    fn train_epoch(&mut self, sigmas: &SigmaVector, rng: &mut ChaCha8Rng) -> Result<EpochStats>;
    fn same_weights(&self, other: &Self) -> bool;
}

/// The real learner bound to its training and validation data.
#[derive(Debug, Clone)]
pub struct HeatmapModel<'a> {
    pub net: Network,
    train: &'a [Sample],
    validation: &'a [Sample],
    settings: TrainSettings,
    coordinates: bool,
}

impl<'a> HeatmapModel<'a> {
    pub fn new(net: Network, data: &'a DatasetSplit, config: &TrainConfig) -> Self {
        Self {
            net,
            train: &data.train,
            validation: &data.validation,
            settings: config.train_settings(),
            coordinates: config.mode == Mode::Coordreg,
        }
    }
}

impl InnerModel for HeatmapModel<'_> {
    fn landmarks(&self) -> usize {
        self.net.architecture().landmarks
    }

    fn train_epoch(&mut self, sigmas: &SigmaVector, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
        let (train_mse, decode) = if self.coordinates {
            (self.net.train_coordreg_epoch(self.train, self.settings, rng)?, Decode::SoftArgmax)
        } else {
            (self.net.train_one_epoch(self.train, sigmas, self.settings, rng)?, Decode::Argmax)
        };
        let val_mre = self.net.validate(self.validation, decode)?;
        Ok(EpochStats { train_mse, val_mre })
    }

    fn same_weights(&self, other: &Self) -> bool {
        self.net.params_bitwise_eq(&other.net)
    }
}

/// Per-landmark ring buffers of the broadcast lineage's validation errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    window: usize,
    records: Vec<VecDeque<f64>>,
    pub frozen: Vec<bool>,
    pub variance: Vec<Option<f64>>,
}

impl EarlyStopState {
    /// `window` is the number of records (M / t′).
    pub fn new(landmarks: usize, window: usize) -> Self {
        Self {
            window,
            records: vec![VecDeque::with_capacity(window); landmarks],
            frozen: vec![false; landmarks],
            variance: vec![None; landmarks],
        }
    }

    pub fn push(&mut self, errors: &[f64]) {
        for (buf, &e) in self.records.iter_mut().zip(errors) {
            if buf.len() == self.window {
                buf.pop_front();
            }
            buf.push_back(e);
        }
    }

    /// Population variance of each full window; freezes landmarks whose
    /// variance is below `threshold`. Returns the newly frozen landmarks.
    pub fn check(&mut self, threshold: f64) -> Vec<usize> {
        let mut newly = Vec::new();
        for (i, buf) in self.records.iter().enumerate() {
            if buf.len() < self.window || self.window == 0 {
                continue;
            }
            let n = buf.len() as f64;
            let mean = buf.iter().sum::<f64>() / n;
            let var = buf.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            self.variance[i] = Some(var);
            if !self.frozen[i] && var < threshold {
                self.frozen[i] = true;
                newly.push(i);
            }
        }
        newly
    }
}

/// Broadcast model index (lowest mean error) and per-landmark σ sources
/// (lowest error on that landmark). `errors[j][i]` is ε of landmark i in
/// sample j. Ties go to the lowest index.
pub fn select_best(errors: &[Vec<f64>]) -> Result<(usize, Vec<usize>)> {
    let Some(first) = errors.first() else {
        return Err(Error::config("selection needs at least one sample"));
    };
    let n = first.len();
    if errors.iter().any(|row| row.len() != n || row.iter().any(|e| !e.is_finite())) {
        return Err(Error::Numerical("validation error matrix is ragged or non-finite".into()));
    }
    let argmin = |f: &dyn Fn(usize) -> f64| {
        (1..errors.len()).fold(0, |best, j| if f(j) < f(best) { j } else { best })
    };
    let best = argmin(&|j| errors[j].iter().sum::<f64>() / n as f64);
    let sources = (0..n).map(|i| argmin(&|j| errors[j][i])).collect();
    Ok((best, sources))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub iteration: usize,
    pub sample: usize,
    pub landmark: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPoint {
    pub iteration: usize,
    pub landmark: usize,
    pub sigma: f64,
}

/// Self-checks made while the loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantChecks {
    pub clones_identical: bool,
    pub broadcast_bitwise: bool,
    pub sigma_in_bounds: bool,
}

impl Default for InvariantChecks {
    fn default() -> Self {
        Self {
            clones_identical: true,
            broadcast_bitwise: true,
            sigma_in_bounds: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup_secs: f64,
    pub search_secs: f64,
    pub evaluation_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub sigma: Vec<SigmaPoint>,
    pub rewards: Vec<RewardRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Round at which each landmark froze.
    pub frozen_at: Vec<Option<usize>>,
    pub checks: InvariantChecks,
    pub summary: Option<Summary>,
    pub timing: Timing,
}

impl PartialEq for RunArtifacts {
    /// Wall-clock timing is not part of a run's result.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.sigma == other.sigma
            && self.rewards == other.rewards
            && self.epochs == other.epochs
            && self.frozen_at == other.frozen_at
            && self.checks == other.checks
            && self.summary == other.summary
    }
}

impl RunArtifacts {
    /// Mean reward over samples for each round, one trace per landmark.
    pub fn reward_traces(&self) -> Vec<Vec<f64>> {
        mean_traces(self.rewards.iter().map(|r| (r.iteration, r.landmark, r.reward)))
    }

    /// σ of each landmark at each recorded point.
    pub fn sigma_traces(&self) -> Vec<Vec<f64>> {
        mean_traces(self.sigma.iter().map(|p| (p.iteration, p.landmark, p.sigma)))
    }
}

/// Everything the outer loop carries between rounds.
#[derive(Debug, Clone)]
pub struct LoopState<M> {
    pub learner: M,
    pub controllers: Vec<Controller>,
    pub sigma: SigmaVector,
    pub early: EarlyStopState,
    pub iteration: usize,
    /// Epochs completed by the broadcast lineage.
    pub epoch: usize,
    action_rng: ChaCha8Rng,
}

impl<M: InnerModel> LoopState<M> {
    pub fn new(config: &TrainConfig, learner: M) -> Result<Self> {
        let n = learner.landmarks();
        let controllers = (0..n)
            .map(|i| {
                let mut key = stream(config.seed, TAG_CONTROLLER, i as u64, 0);
                Controller::new(config.policy_shape(), config.controller_lr, rand::Rng::gen(&mut key))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            learner,
            controllers,
            sigma: SigmaVector::uniform(n, config.sigma_init, config.bounds())?,
            early: EarlyStopState::new(n, config.early_stop_window / config.inner_epochs.max(1)),
            iteration: 0,
            epoch: 0,
            action_rng: stream(config.seed, TAG_ACTIONS, 0, 0),
        })
    }

    pub fn frozen(&self) -> Vec<bool> {
        self.controllers.iter().map(|c| c.frozen).collect()
    }
}

/// K σ-sets drawn from the controllers around the current σ, with the
/// action index of every unfrozen (sample, landmark) pair.
pub fn sample_sigma_sets(
    controllers: &[Controller],
    current: &SigmaVector,
    k: usize,
    bounds: SigmaBounds,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SigmaVector>, Vec<Vec<Option<usize>>>)> {
    let probs = controllers
        .iter()
        .map(|c| {
            if c.frozen {
                Ok(None)
            } else {
                c.policy_forward(&c.history.as_input()?).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sets = Vec::with_capacity(k);
    let mut actions = Vec::with_capacity(k);
    for _ in 0..k {
        let mut deltas = vec![0.0; controllers.len()];
        let mut idx = vec![None; controllers.len()];
        for (i, p) in probs.iter().enumerate() {
            if let Some(p) = p {
                let a = sample_action(*p, rng);
                deltas[i] = a.delta;
                idx[i] = Some(a.index);
            }
        }
        sets.push(current.stepped(&deltas, bounds));
        actions.push(idx);
    }
    Ok((sets, actions))
}

/// Result of one outer round.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub rewards: Vec<RewardRecord>,
    /// Lineage epoch records (the broadcast model's).
    pub epochs: Vec<EpochRecord>,
    pub broadcast: usize,
    pub sources: Vec<usize>,
    pub newly_frozen: Vec<usize>,
    pub checks: InvariantChecks,
}

fn train_clone<M: InnerModel>(
    mut clone: M,
    sigmas: &SigmaVector,
    seed: u64,
    first_epoch: usize,
    epochs: usize,
    sample: usize,
) -> Result<(M, Vec<EpochStats>)> {
    let stats = (0..epochs)
        .map(|k| clone.train_epoch(sigmas, &mut epoch_stream(seed, first_epoch + k, sample)))
        .collect::<Result<Vec<_>>>()?;
    Ok((clone, stats))
}

/// One round: sample, train K clones, reward, broadcast, update σ and the
/// controllers, then the early-stop bookkeeping.
pub fn run_iteration<M: InnerModel>(
    state: &mut LoopState<M>,
    config: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<IterationReport> {
    let k = config.samples;
    let t = config.inner_epochs;
    let n = state.learner.landmarks();
    let bounds = config.bounds();
    let inputs = state
        .controllers
        .iter()
        .map(|c| c.history.as_input())
        .collect::<Result<Vec<_>>>()?;
    let (sets, actions) = sample_sigma_sets(&state.controllers, &state.sigma, k, bounds, &mut state.action_rng)?;

    let mut checks = InvariantChecks {
        sigma_in_bounds: sets.iter().all(|s| s.as_slice().iter().all(|&v| bounds.contains(v))),
        ..InvariantChecks::default()
    };
    let clones: Vec<M> = (0..k).map(|_| state.learner.clone()).collect();
    checks.clones_identical = clones.iter().all(|c| c.same_weights(&state.learner));

    let first_epoch = state.epoch;
    let job = |(j, (clone, sigmas)): (usize, (M, &SigmaVector))| {
        train_clone(clone, sigmas, config.seed, first_epoch, t, j)
            .map_err(|e| Error::Numerical(format!("round {} sample {j}: {e}", state.iteration)))
    };
    let jobs = clones.into_iter().zip(sets.iter()).enumerate();
    let trained: Vec<(M, Vec<EpochStats>)> = match pool {
        Some(pool) => pool.install(|| jobs.collect::<Vec<_>>().into_par_iter().map(job).collect::<Result<_>>())?,
        None => jobs.map(job).collect::<Result<_>>()?,
    };

    let errors: Vec<Vec<f64>> = trained
        .iter()
        .map(|(_, stats)| stats.last().expect("t' >= 1").val_mre.clone())
        .collect();
    let mut rewards = Vec::with_capacity(k * n);
    for (j, row) in errors.iter().enumerate() {
        for (i, &eps) in row.iter().enumerate() {
            rewards.push(RewardRecord {
                iteration: state.iteration,
                sample: j,
                landmark: i,
                sigma: sets[j].as_slice()[i],
                epsilon: eps,
                reward: compute_reward(eps, config.reward_c),
            });
        }
    }

    let (best, sources) = select_best(&errors)?;
    let sources: Vec<usize> = match config.sigma_broadcast {
        SigmaBroadcast::PerLandmark => sources,
        SigmaBroadcast::Global => vec![best; n],
    };
    let winner = &trained[best];
    state.learner = winner.0.clone();
    checks.broadcast_bitwise = state.learner.same_weights(&winner.0);

    let mut next = state.sigma.as_slice().to_vec();
    for (i, c) in state.controllers.iter_mut().enumerate() {
        if !c.frozen {
            next[i] = sets[sources[i]].as_slice()[i];
            let trajectories: Vec<Trajectory> = (0..k)
                .map(|j| Trajectory {
                    history: inputs[i].clone(),
                    index: actions[j][i].expect("unfrozen landmarks are sampled"),
                    reward: rewards[j * n + i].reward,
                })
                .collect();
            c.reinforce_update(&trajectories)?;
        }
        // the next inputs are the losses this landmark's σ was credited with
        let src = if c.frozen { best } else { sources[i] };
        c.history.extend(trained[src].1.iter().map(|s| s.train_mse[i]));
    }
    state.sigma = SigmaVector::new(next, bounds)?;
    checks.sigma_in_bounds &= state.sigma.as_slice().iter().all(|&v| bounds.contains(v));

    let epochs: Vec<EpochRecord> = winner
        .1
        .iter()
        .enumerate()
        .map(|(kk, s)| EpochRecord {
            epoch: first_epoch + kk,
            train_mse: s.train_mse.clone(),
            val_mre: s.val_mre.clone(),
        })
        .collect();
    state.epoch += t;

    let mut newly_frozen = Vec::new();
    if config.early_stop {
        state.early.push(&errors[best]);
        if state.epoch >= config.early_stop_start_epoch() {
            newly_frozen = state.early.check(config.early_stop_threshold);
            for &i in &newly_frozen {
                state.controllers[i].frozen = true;
            }
        }
    }
    state.iteration += 1;
    Ok(IterationReport {
        rewards,
        epochs,
        broadcast: best,
        sources,
        newly_frozen,
        checks,
    })
}

/// σ used at `epoch` by the non-searching modes.
pub fn scheduled_sigma(config: &TrainConfig, epoch: usize) -> f64 {
    match config.mode {
        Mode::Decay if config.epochs > 1 => {
            let f = epoch as f64 / (config.epochs - 1) as f64;
            config.sigma_init + (config.sigma_min - config.sigma_init) * f
        }
        _ => config.sigma_init,
    }
}

/// Final state of a run alongside its artifacts.
pub struct RunOutcome<M> {
    pub artifacts: RunArtifacts,
    pub learner: M,
    pub controllers: Vec<Controller>,
}

/// Runs the configured schedule on any inner model. `threads > 1` trains
/// the K clones of a round concurrently; results do not depend on it.
pub fn run_loop<M: InnerModel>(
    config: &TrainConfig,
    learner: M,
    threads: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunOutcome<M>> {
    config.validate()?;
    let config = config.resolved();
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Numerical(format!("cannot start thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut state = LoopState::new(&config, learner)?;
    let n = state.learner.landmarks();
    let bounds = config.bounds();
    let mut artifacts = RunArtifacts {
        config: config.clone(),
        sigma: Vec::new(),
        rewards: Vec::new(),
        epochs: Vec::new(),
        frozen_at: vec![None; n],
        checks: InvariantChecks::default(),
        summary: None,
        timing: Timing::default(),
    };
    let start = Instant::now();
    match config.mode {
        Mode::Laoml => {
            for _ in 0..config.warmup_epochs() {
                let sigma = state.sigma.clone();
                lineage_epoch(&config, &mut state, &mut artifacts, &sigma, on_epoch)?;
            }
            artifacts.timing.warmup_secs = start.elapsed().as_secs_f64();
            let search = Instant::now();
            push_sigma(&mut artifacts, 0, &state.sigma);
            for _ in 0..config.iterations() {
                let report = run_iteration(&mut state, &config, pool.as_ref())?;
                for rec in &report.epochs {
                    on_epoch(rec);
                }
                artifacts.epochs.extend(report.epochs);
                artifacts.rewards.extend(report.rewards);
                for &i in &report.newly_frozen {
                    artifacts.frozen_at[i] = Some(state.iteration - 1);
                }
                let c = &mut artifacts.checks;
                c.clones_identical &= report.checks.clones_identical;
                c.broadcast_bitwise &= report.checks.broadcast_bitwise;
                c.sigma_in_bounds &= report.checks.sigma_in_bounds;
                push_sigma(&mut artifacts, state.iteration, &state.sigma);
            }
            // budget left over after the last full round
            while state.epoch < config.epochs {
                let sigma = state.sigma.clone();
                lineage_epoch(&config, &mut state, &mut artifacts, &sigma, on_epoch)?;
            }
            artifacts.timing.search_secs = search.elapsed().as_secs_f64();
        }
        Mode::Fixed | Mode::Decay | Mode::Coordreg => {
            for e in 0..config.epochs {
                let sigma = SigmaVector::uniform(n, bounds.clamp(scheduled_sigma(&config, e)), bounds)?;
                if config.mode != Mode::Coordreg {
                    push_sigma(&mut artifacts, e, &sigma);
                }
                lineage_epoch(&config, &mut state, &mut artifacts, &sigma, on_epoch)?;
            }
            artifacts.timing.warmup_secs = start.elapsed().as_secs_f64();
        }
    }
    artifacts.checks.sigma_in_bounds &= artifacts.sigma.iter().all(|p| bounds.contains(p.sigma));
    Ok(RunOutcome {
        artifacts,
        learner: state.learner,
        controllers: state.controllers,
    })
}

/// One plain epoch of the single lineage (warm-up, leftover epochs and the
/// non-searching modes).
fn lineage_epoch<M: InnerModel>(
    config: &TrainConfig,
    state: &mut LoopState<M>,
    artifacts: &mut RunArtifacts,
    sigma: &SigmaVector,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    let e = state.epoch;
    let s = state
        .learner
        .train_epoch(sigma, &mut epoch_stream(config.seed, e, 0))
        .map_err(|err| Error::Numerical(format!("epoch {e}: {err}")))?;
    if config.mode == Mode::Laoml {
        for (c, &l) in state.controllers.iter_mut().zip(&s.train_mse) {
            c.history.push(l);
        }
    }
    let rec = EpochRecord {
        epoch: e,
        train_mse: s.train_mse,
        val_mre: s.val_mre,
    };
    on_epoch(&rec);
    artifacts.epochs.push(rec);
    state.epoch += 1;
    Ok(())
}

fn push_sigma(artifacts: &mut RunArtifacts, iteration: usize, sigma: &SigmaVector) {
    artifacts
        .sigma
        .extend(sigma.as_slice().iter().enumerate().map(|(landmark, &sigma)| SigmaPoint {
            iteration,
            landmark,
            sigma,
        }));
}

/// Test-split summary of a trained network.
pub fn evaluate_network(net: &Network, data: &[Sample], decode: Decode, pck: &[f64]) -> Result<Summary> {
    let preds = net.predict_all(data, decode)?;
    let gts: Vec<_> = data.iter().map(|s| s.landmarks.coords.clone()).collect();
    summarize(&crate::metrics::radial_errors(&preds, &gts, 1.0)?, pck)
}

/// End-to-end run on a dataset: builds the learner, runs the configured
/// mode and evaluates the final network on the test split.
pub fn run_training(
    config: &TrainConfig,
    data: &DatasetSplit,
    threads: usize,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunOutcome<Network>> {
    config.validate()?;
    data.check_disjoint()?;
    if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
        return Err(Error::config("train, validation and test splits must all be non-empty"));
    }
    let arch = Architecture {
        height: data.meta.height,
        width: data.meta.width,
        in_channels: 1,
        depth: config.depth,
        widths: config.widths.clone(),
        landmarks: data.meta.landmarks,
    };
    let net = Network::build(arch, config.precision, learner_seed(config.seed))?;
    let model = HeatmapModel::new(net, data, config);
    let out = run_loop(config, model, threads, on_epoch)?;
    let mut artifacts = out.artifacts;
    let start = Instant::now();
    let summary = evaluate_network(&out.learner.net, &data.test, config.decode(), &config.pck)?;
    artifacts.timing.evaluation_secs = start.elapsed().as_secs_f64();
    artifacts.summary = Some(summary);
    Ok(RunOutcome {
        artifacts,
        learner: out.learner.net,
        controllers: out.controllers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::{Surrogate, SurrogateParams};
    use crate::synthdata::gen_dataset;

    #[test]
    fn default_schedule_scaling() {
        let c = TrainConfig::default();
        assert_eq!((c.warmup_epochs(), c.early_stop_start_epoch()), (30, 100));
        let c = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        assert_eq!((c.warmup_epochs(), c.early_stop_start_epoch()), (10, 40));
        assert_eq!(c.iterations(), 18);
        let c = TrainConfig {
            epochs: 30,
            warmup: Some(40),
            ..TrainConfig::default()
        };
        assert!(c.violations().iter().any(|v| v.contains("exceeds the epoch budget")));
    }

    #[test]
    fn config_violations_are_listed_separately() {
        let c = TrainConfig {
            samples: 0,
            sigma_init: 30.0,
            batch: 0,
            pck: vec![0.0],
            ..TrainConfig::default()
        };
        assert_eq!(c.violations().len(), 4);
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig {
            mode: Mode::Coordreg,
            precision: Precision::F32,
            ..TrainConfig::default()
        }
        .resolved();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"samples": 4}"#).unwrap();
        assert_eq!(partial.samples, 4);
        assert_eq!(partial.epochs, 250);
    }

    #[test]
    fn select_best_examples() {
        assert_eq!(select_best(&[vec![2.0, 4.0], vec![3.0, 1.0]]).unwrap(), (1, vec![0, 1]));
        assert_eq!(select_best(&vec![vec![1.0; 3]; 4]).unwrap(), (0, vec![0; 3]));
        assert_eq!(select_best(&[vec![3.0], vec![2.0]]).unwrap(), (1, vec![1]));
        let (j, src) = select_best(&[vec![5.0], vec![4.0], vec![6.0]]).unwrap();
        assert_eq!(src, vec![j]);
        assert!(select_best(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn early_stop_examples() {
        let mut s = EarlyStopState::new(2, 6);
        for k in 0..5 {
            s.push(&[2.0, if k % 2 == 0 { 1.0 } else { 3.0 }]);
        }
        assert!(s.check(0.01).is_empty());
        assert_eq!(s.variance, vec![None, None]);
        s.push(&[2.0, 3.0]);
        assert_eq!(s.check(0.01), vec![0]);
        assert_eq!(s.variance, vec![Some(0.0), Some(1.0)]);
        assert_eq!(s.frozen, vec![true, false]);
        // once frozen, never reverts
        for _ in 0..6 {
            s.push(&[10.0, 3.0]);
        }
        s.check(0.01);
        assert!(s.frozen[0]);
    }

    fn ctrls(n: usize) -> Vec<Controller> {
        (0..n)
            .map(|i| {
                let mut c = Controller::new(PolicyShape::default(), 1e-3, i as u64).unwrap();
                c.history.push(0.1);
                c
            })
            .collect()
    }

    #[test]
    fn sigma_sets_step_and_clamp() {
        let b = SigmaBounds::default();
        let cur = SigmaVector::new(vec![1.0, 5.0, 20.0], b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (sets, acts) = sample_sigma_sets(&ctrls(3), &cur, 50, b, &mut rng).unwrap();
        for (s, a) in sets.iter().zip(&acts) {
            for i in 0..3 {
                let d = [-1.0, 0.0, 1.0][a[i].unwrap()];
                assert_eq!(s.as_slice()[i], b.clamp(cur.as_slice()[i] + d));
            }
        }
        let mut frozen = ctrls(3);
        frozen.iter_mut().for_each(|c| c.frozen = true);
        let (sets, acts) = sample_sigma_sets(&frozen, &cur, 5, b, &mut rng).unwrap();
        assert!(sets.iter().all(|s| s == &cur));
        assert!(acts.iter().flatten().all(Option::is_none));
    }

    #[test]
    fn decay_schedule_is_linear() {
        let c = TrainConfig {
            mode: Mode::Decay,
            epochs: 5,
            ..TrainConfig::default()
        };
        let s: Vec<f64> = (0..5).map(|e| scheduled_sigma(&c, e)).collect();
        assert_eq!(s, vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    fn stub_config() -> TrainConfig {
        TrainConfig {
            samples: 4,
            epochs: 60,
            warmup: Some(10),
            early_stop_start: Some(20),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pure_warmup_has_constant_sigma() {
        let c = TrainConfig {
            epochs: 10,
            warmup: Some(10),
            ..stub_config()
        };
        let out = run_loop(&c, Surrogate::new(3, SurrogateParams::default()), 1, &mut |_| {}).unwrap();
        assert!(out.artifacts.rewards.is_empty());
        assert!(out.artifacts.sigma.iter().all(|p| p.sigma == 5.0));
        assert_eq!(out.artifacts.epochs.len(), 10);
    }

    #[test]
    fn stub_run_bookkeeping() {
        let c = stub_config();
        let out = run_loop(&c, Surrogate::new(3, SurrogateParams::default()), 1, &mut |_| {}).unwrap();
        let a = &out.artifacts;
        assert_eq!(a.epochs.len(), 60);
        assert!(a.epochs.iter().enumerate().all(|(e, r)| r.epoch == e));
        assert_eq!(a.rewards.len(), 10 * 4 * 3);
        assert!(a.rewards.iter().all(|r| r.reward == c.reward_c - r.epsilon));
        assert_eq!(a.sigma.len(), 11 * 3);
        assert_eq!(a.checks, InvariantChecks::default());
        // frozen σ stays put
        for (i, f) in a.frozen_at.iter().enumerate() {
            if let Some(t) = f {
                let trace = &a.sigma_traces()[i];
                assert!(trace[t + 1..].iter().all(|&s| s == trace[t + 1]));
                assert!(out.controllers[i].frozen);
            }
        }
    }

    #[test]
    fn serial_and_parallel_rounds_agree() {
        let c = stub_config();
        let a = run_loop(&c, Surrogate::new(3, SurrogateParams::default()), 1, &mut |_| {}).unwrap();
        let b = run_loop(&c, Surrogate::new(3, SurrogateParams::default()), 3, &mut |_| {}).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
    }

    fn tiny_data() -> DatasetSplit {
        gen_dataset(10, 16, 16, 2, 4).unwrap()
    }

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            samples: 1,
            epochs: 4,
            inner_epochs: 1,
            warmup: Some(1),
            early_stop_window: 2,
            early_stop_start: Some(2),
            depth: 2,
            widths: vec![2, 3],
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn laoml_with_pinned_sigma_replays_fixed_training() {
        // K = 1 and a zero-width σ range: every round keeps σ = σ_init, so
        // the lineage must match plain fixed-σ training bit for bit
        let d = tiny_data();
        let pin = |mode| TrainConfig {
            sigma_min: 5.0,
            sigma_max: 5.0,
            ..tiny(mode)
        };
        let a = run_training(&pin(Mode::Laoml), &d, 1, &mut |_| {}).unwrap();
        let b = run_training(&pin(Mode::Fixed), &d, 1, &mut |_| {}).unwrap();
        assert!(a.learner.params_bitwise_eq(&b.learner));
        assert_eq!(a.artifacts.epochs, b.artifacts.epochs);
        assert_eq!(a.artifacts.summary, b.artifacts.summary);
    }

    #[test]
    fn every_mode_runs_and_replays() {
        let d = tiny_data();
        for mode in [Mode::Laoml, Mode::Fixed, Mode::Decay, Mode::Coordreg] {
            let mut lines = 0;
            let a = run_training(&tiny(mode), &d, 1, &mut |_| lines += 1).unwrap();
            assert_eq!(lines, 4, "{mode}");
            let b = run_training(&tiny(mode), &d, 1, &mut |_| {}).unwrap();
            assert_eq!(a.artifacts, b.artifacts, "{mode}");
            assert!(a.artifacts.summary.is_some());
        }
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut d = tiny_data();
        d.test[0].id = d.train[0].id.clone();
        assert!(matches!(
            run_training(&tiny(Mode::Fixed), &d, 1, &mut |_| {}),
            Err(Error::Config(_) | Error::Validation(_))
        ));
    }
}
