//! Training: utility-weighted series sampling, HSR context/target assembly,
//! decay-weighted Huber loss, warmup + cosine schedule, percentile gradient
//! clipping, Adam, metrics logging and checkpoints.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::{self, Dataset, TimeValueSeries, UtilityNormalization};
use crate::error::{DamError, Result};
use crate::hsr::{self, HsrConfig};
use crate::model::{DamModel, ForwardOptions, ModelInput};
use crate::numerics::{huber, Real, Tape};
use crate::par::Exec;
use crate::stats;

/// Element weight `2^(-|x| / halflife)` for a target `x` steps from "now".
pub fn loss_weight(x: i64, halflife: f64) -> f64 {
    (-(x.unsigned_abs() as f64) / halflife).exp2()
}

/// Decay-weighted mean Huber loss.
pub fn weighted_loss(pred: &[f64], target: &[f64], steps: &[i64], halflife: f64, delta: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != steps.len() {
        return Err(DamError::LengthMismatch {
            left: pred.len(),
            right: target.len().min(steps.len()),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .zip(steps)
        .map(|((&p, &t), &x)| loss_weight(x, halflife) * huber(p - t, delta))
        .sum();
    Ok(total / pred.len() as f64)
}

/// One warmup + cosine phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub iterations: usize,
    pub warmup: usize,
    pub peak: f64,
    pub floor: f64,
}

impl LrPhase {
    fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.iterations.saturating_sub(self.warmup);
        if span == 0 || step >= self.iterations {
            return self.floor;
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Learning-rate schedule: phases run back to back, each restarting its warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub phases: Vec<LrPhase>,
}

impl LrSchedule {
    pub fn single(iterations: usize, warmup: usize, peak: f64, floor: f64) -> Self {
        Self {
            phases: vec![LrPhase {
                iterations,
                warmup,
                peak,
                floor,
            }],
        }
    }

    /// 1,000,000 iterations (10k warmup, 1e-3 down to 1e-14), then 50,000
    /// more (2k warmup, 1e-3 down to 0).
    pub fn two_phase() -> Self {
        Self {
            phases: vec![
                LrPhase {
                    iterations: 1_000_000,
                    warmup: 10_000,
                    peak: 1e-3,
                    floor: 1e-14,
                },
                LrPhase {
                    iterations: 50_000,
                    warmup: 2_000,
                    peak: 1e-3,
                    floor: 0.0,
                },
            ],
        }
    }

    pub fn iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let mut offset = 0;
        for p in &self.phases {
            if step < offset + p.iterations {
                return p.at(step - offset);
            }
            offset += p.iterations;
        }
        self.phases.last().map_or(0.0, |p| p.floor)
    }

    fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(DamError::Config("schedule has no phases".into()));
        }
        for p in &self.phases {
            if p.iterations == 0 || p.warmup > p.iterations || !(p.peak > 0.0) || p.floor < 0.0 {
                return Err(DamError::Config(format!("invalid schedule phase {p:?}")));
            }
        }
        Ok(())
    }
}

/// Percentile-based clipping over a ring buffer of recent gradient norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipState {
    norms: VecDeque<f64>,
    capacity: usize,
    percentile: f64,
    min_fill: usize,
}

/// What [`ClipState::clip`] did to one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    /// Global norm before clipping.
    pub norm: f64,
    /// The percentile threshold, once the buffer is warm.
    pub threshold: Option<f64>,
    /// Factor applied to every gradient.
    pub scale: f64,
}

impl ClipState {
    pub fn new(capacity: usize, percentile: f64, min_fill: usize) -> Self {
        Self {
            norms: VecDeque::with_capacity(capacity),
            capacity,
            percentile,
            min_fill,
        }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Current threshold, `None` until the buffer holds `min_fill` norms.
    pub fn threshold(&self) -> Option<f64> {
        if self.norms.len() < self.min_fill.max(1) {
            return None;
        }
        let v: Vec<f64> = self.norms.iter().copied().collect();
        Some(stats::quantile(&v, self.percentile))
    }

    /// Records the norm without touching any gradients.
    pub fn observe(&mut self, norm: f64) {
        if self.norms.len() == self.capacity {
            self.norms.pop_front();
        }
        self.norms.push_back(norm);
    }

    /// Scales `grads` by `threshold / norm` when the global norm exceeds the
    /// threshold, then records the pre-clip norm.
    pub fn clip<T: Real>(&mut self, grads: &mut [Vec<T>]) -> ClipOutcome {
        let norm = global_norm(grads);
        let threshold = self.threshold();
        let mut scale = 1.0;
        if let Some(th) = threshold {
            if norm > th && norm > 0.0 {
                scale = th / norm;
                let s = T::from_f64(scale);
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.observe(norm);
        ClipOutcome {
            norm,
            threshold,
            scale,
        }
    }
}

pub fn global_norm<T: Real>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new<U: Real>(cfg: AdamConfig, model: &DamModel<U>) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            model
                .params
                .tensors
                .iter()
                .map(|t| vec![T::ZERO; t.numel()])
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut DamModel<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        for (((p, g), m), v) in model
            .params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                if c.weight_decay > 0.0 {
                    *p *= decay;
                }
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub context_points: usize,
    pub target_points: usize,
    pub sigma: f64,
    /// Steps over which the loss weight halves.
    pub decay_halflife: f64,
    pub huber_delta: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub clip_buffer: usize,
    pub clip_percentile: f64,
    /// Norms needed in the buffer before clipping starts.
    pub clip_min_fill: usize,
    pub adam: AdamConfig,
    /// Validation every this many steps (0 disables).
    pub validation_every: usize,
    pub validation_samples: usize,
    /// Checkpoint every this many steps (0 disables intermediate ones).
    pub checkpoint_every: usize,
    pub utility_normalization: UtilityNormalization,
    /// Optional cap on how far back contexts and targets reach.
    pub max_lookback: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch: 32,
            context_points: 540,
            target_points: 540,
            sigma: 720.0,
            decay_halflife: 360.0,
            huber_delta: 1.0,
            schedule: LrSchedule::two_phase(),
            seed: 42,
            clip_buffer: 1000,
            clip_percentile: 0.9,
            clip_min_fill: 100,
            adam: AdamConfig::default(),
            validation_every: 1000,
            validation_samples: 64,
            checkpoint_every: 10_000,
            utility_normalization: UtilityNormalization::Global,
            max_lookback: None,
        }
    }
}

impl TrainConfig {
    /// Short adaptation run from an existing checkpoint: 10,000 iterations
    /// annealed from 1e-5 to 1e-14 with no warmup.
    pub fn fine_tune() -> Self {
        Self {
            schedule: LrSchedule::single(10_000, 0, 1e-5, 1e-14),
            ..Self::default()
        }
    }

    /// Desk-scale settings paired with [`crate::model::ModelConfig::toy`].
    pub fn toy() -> Self {
        Self {
            minibatch: 2,
            context_points: 128,
            target_points: 128,
            sigma: 256.0,
            schedule: LrSchedule::single(5_000, 250, 1e-3, 1e-5),
            validation_every: 500,
            validation_samples: 16,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn iterations(&self) -> usize {
        self.schedule.iterations()
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 || self.context_points == 0 || self.target_points == 0 {
            return Err(DamError::Config("minibatch and point counts must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.decay_halflife > 0.0 && self.huber_delta > 0.0) {
            return Err(DamError::Config("sigma, halflife and huber delta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.clip_percentile) || self.clip_buffer == 0 {
            return Err(DamError::Config("invalid clipping settings".into()));
        }
        self.schedule.validate()
    }

    fn context_cfg(&self) -> HsrConfig {
        HsrConfig {
            max_lookback: self.max_lookback,
            ..HsrConfig::new(self.context_points, self.sigma)
        }
    }

    fn target_cfg(&self) -> HsrConfig {
        HsrConfig {
            max_lookback: self.max_lookback,
            ..HsrConfig::new(self.target_points, self.sigma)
        }
    }
}

/// A series available for sampling: anchors are drawn from `anchors`, and
/// targets may reach up to (excluding) `end`.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub series: TimeValueSeries,
    pub anchors: Range<usize>,
    pub end: usize,
    pub weight: f64,
}

/// Sampling pool of univariate series.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

/// Which split a corpus is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Valid,
}

impl Corpus {
    /// Builds a corpus from datasets, weighting channels by utility (computed
    /// on the training split).
    pub fn from_datasets(datasets: &[Dataset], role: SplitRole, mode: UtilityNormalization) -> Self {
        let utilities: Vec<Vec<f64>> = datasets
            .iter()
            .map(|d| {
                d.series
                    .iter()
                    .map(|s| data::compute_utility(&s.slice(d.split.train.clone())))
                    .collect()
            })
            .collect();
        let weights = data::sampling_weights(&utilities, mode);
        let mut entries = Vec::new();
        for (d, w) in datasets.iter().zip(weights) {
            for (s, w) in d.series.iter().zip(w) {
                let (series, anchors, end) = match role {
                    SplitRole::Train => {
                        let r = d.split.train.clone();
                        (s.slice(r.clone()), 0..r.len(), r.len())
                    }
                    SplitRole::Valid => {
                        let end = d.split.valid.end;
                        (s.slice(0..end), d.split.valid.clone(), end)
                    }
                };
                entries.push(CorpusEntry {
                    series,
                    anchors,
                    end,
                    weight: w,
                });
            }
        }
        Self { entries }
    }

    /// One series, all of it, weight 1.
    pub fn single(series: TimeValueSeries) -> Self {
        let n = series.len();
        Self {
            entries: vec![CorpusEntry {
                series,
                anchors: 0..n,
                end: n,
                weight: 1.0,
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDatum {
    pub entry: usize,
    pub now: usize,
    pub input: ModelInput,
    /// Target times in days from "now".
    pub target_times: Vec<f64>,
    /// Targets standardised with the context's robust norm.
    pub target_values: Vec<f64>,
    /// Target offsets in steps from "now".
    pub target_steps: Vec<i64>,
}

/// Anchors of `entry` with at least `needed` valid points before them.
fn eligible_anchors(entry: &CorpusEntry, needed: usize) -> Option<Range<usize>> {
    let mut seen = 0;
    let mut first = None;
    for i in 0..entry.anchors.end.min(entry.series.len()) {
        if seen >= needed && i >= entry.anchors.start {
            first = Some(i);
            break;
        }
        if entry.series.valid[i] {
            seen += 1;
        }
    }
    let first = first?;
    let last = entry.anchors.end.min(entry.series.len());
    (first < last).then_some(first..last)
}

/// Draws a minibatch: series with replacement in proportion to their
/// weight, a uniform anchor with enough valid past, HSR context and target
/// draws, and the initial coefficient fit of each context.
pub fn sample_training_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    cfg: &TrainConfig,
    spec: &BasisSpec,
    lambda: f64,
    rng: &mut R,
    exec: Exec,
) -> Result<Vec<TrainingDatum>> {
    let needed = cfg.context_points;
    let eligible: Vec<(usize, Range<usize>)> = corpus
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.weight > 0.0)
        .filter_map(|(i, e)| eligible_anchors(e, needed).map(|r| (i, r)))
        .collect();
    if eligible.is_empty() {
        return Err(DamError::InsufficientHistory { needed });
    }
    let weights: Vec<f64> = eligible.iter().map(|(i, _)| corpus.entries[*i].weight).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| DamError::Config(format!("bad sampling weights: {e}")))?;
    let picks: Vec<(usize, usize, u64)> = (0..cfg.minibatch)
        .map(|_| {
            let (entry, anchors) = &eligible[dist.sample(rng)];
            let now = rng.random_range(anchors.clone());
            (*entry, now, rng.next_u64())
        })
        .collect();
    let built = exec.map(&picks, |&(entry, now, seed)| {
        build_datum(corpus, entry, now, seed, cfg, spec, lambda)
    });
    built.into_iter().collect()
}

fn build_datum(
    corpus: &Corpus,
    entry: usize,
    now: usize,
    seed: u64,
    cfg: &TrainConfig,
    spec: &BasisSpec,
    lambda: f64,
) -> Result<TrainingDatum> {
    let e = &corpus.entries[entry];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = hsr::sample_context(&e.series, now, &cfg.context_cfg(), &mut rng)?;
    let mut tcfg = cfg.target_cfg();
    let lb = tcfg.max_lookback.map_or(0, |l| now.saturating_sub(l));
    let available = hsr::support_offsets(&e.series, now, lb, e.end).len();
    tcfg.n_points = tcfg.n_points.min(available);
    let tgt = hsr::sample_targets(&e.series, now, e.end, &tcfg, &mut rng)?;
    let input = ModelInput::from_draw(&ctx, spec, lambda)?;
    let target_values = tgt.values.iter().map(|&v| input.norm.standardize(v)).collect();
    Ok(TrainingDatum {
        entry,
        now,
        input,
        target_times: tgt.times,
        target_values,
        target_steps: tgt.indices,
    })
}

/// Loss and parameter gradients of one datum.
pub fn datum_gradients<T: Real>(
    model: &DamModel<T>,
    datum: &TrainingDatum,
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        dropout_seed,
        ..ForwardOptions::default()
    };
    let g = model.build(&mut tape, &datum.input, &opts)?;
    let pred = g.forecast(&mut tape, &model.spec, &datum.target_times)?;
    let target: Vec<T> = datum.target_values.iter().map(|&v| T::from_f64(v)).collect();
    let weight: Vec<T> = datum
        .target_steps
        .iter()
        .map(|&x| T::from_f64(loss_weight(x, cfg.decay_halflife)))
        .collect();
    let loss = tape.weighted_huber(pred, &target, &weight, cfg.huber_delta)?;
    let value = tape.scalar(loss).to_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let mut grads: Vec<Option<Vec<T>>> = vec![None; model.params.len()];
    for (id, g) in tape.param_grads() {
        grads[id] = Some(g.to_vec());
    }
    Ok((value, grads))
}

/// Mean loss and summed-then-averaged gradients over a batch, reduced in
/// batch order.
pub fn batch_gradients<T: Real>(
    model: &DamModel<T>,
    batch: &[TrainingDatum],
    cfg: &TrainConfig,
    dropout_seeds: &[Option<u64>],
    exec: Exec,
) -> Result<(f64, Vec<Vec<T>>)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let results = exec.map(&idx, |&i| datum_gradients(model, &batch[i], cfg, dropout_seeds[i]));
    let mut total = vec![Vec::new(); model.params.len()];
    let mut loss = 0.0;
    let inv = T::from_f64(1.0 / batch.len() as f64);
    for (i, r) in results.into_iter().enumerate() {
        let (l, grads) = r?;
        if !l.is_finite() {
            return Err(DamError::Diverged {
                step: 0,
                message: format!("non-finite loss {l} on batch item {i} (series {}, now {})", batch[i].entry, batch[i].now),
            });
        }
        loss += l;
        for (slot, g) in total.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if slot.is_empty() {
                *slot = g;
            } else {
                slot.iter_mut().zip(&g).for_each(|(s, &x)| *s += x);
            }
        }
    }
    for (slot, t) in total.iter_mut().zip(&model.params.tensors) {
        if slot.is_empty() {
            *slot = vec![T::ZERO; t.numel()];
        } else {
            slot.iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok((loss / batch.len() as f64, total))
}

/// Validation MSE (standardised units) on a fixed-seed set of draws.
pub fn validation_mse<T: Real>(
    model: &DamModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vcfg = TrainConfig {
        minibatch: cfg.validation_samples,
        ..cfg.clone()
    };
    let batch = sample_training_batch(corpus, &vcfg, &model.spec, model.config.lambda, &mut rng, exec)?;
    let errs = exec.map(&batch, |d| -> Result<(f64, usize)> {
        let out = model.forward(&d.input, &ForwardOptions::default())?;
        let f = out.forecast_function(&model.spec);
        let se = d
            .target_times
            .iter()
            .zip(&d.target_values)
            .map(|(&t, &v)| (f.standardized(t) - v).powi(2))
            .sum::<f64>();
        Ok((se, d.target_times.len()))
    });
    let (mut se, mut n) = (0.0, 0);
    for e in errs {
        let (a, b) = e?;
        se += a;
        n += b;
    }
    Ok(se / n.max(1) as f64)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub val_mse: Option<f64>,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step,loss,lr,grad_norm,val_mse";

    pub fn to_csv_row(&self) -> String {
        let val = self.val_mse.map_or(String::new(), |v| format!("{v:.9e}"));
        format!(
            "{},{:.9e},{:.9e},{:.9e},{}",
            self.step, self.loss, self.lr, self.grad_norm, val
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub model: DamModel<T>,
    pub history: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Runs the training loop. With `out`, writes `metrics.csv`, periodic
/// `ckpt-NNNNNNN` directories and a `final` checkpoint.
pub fn train<T: Real>(
    mut model: DamModel<T>,
    corpus: &Corpus,
    valid: Option<&Corpus>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(DamError::InsufficientHistory {
            needed: cfg.context_points,
        });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| DamError::io(dir, e))?;
    }
    let mut root = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(root.next_u64());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(root.next_u64());
    let val_seed = root.next_u64();
    let mut adam = Adam::<T>::new(cfg.adam, &model);
    let mut clip = ClipState::new(cfg.clip_buffer, cfg.clip_percentile, cfg.clip_min_fill);
    let mut history = Vec::with_capacity(cfg.iterations());
    let mut checkpoints = Vec::new();
    let mut log = String::new();
    log.push_str(StepMetrics::HEADER);
    log.push('\n');
    let use_dropout = model.config.dropout > 0.0;
    let spec = model.spec.clone();
    let lambda = model.config.lambda;

    for step in 0..cfg.iterations() {
        let batch = sample_training_batch(corpus, cfg, &spec, lambda, &mut batch_rng, exec)?;
        let seeds: Vec<Option<u64>> = (0..batch.len())
            .map(|_| use_dropout.then(|| dropout_rng.next_u64()))
            .collect();
        let (loss, mut grads) = batch_gradients(&model, &batch, cfg, &seeds, exec).map_err(|e| match e {
            DamError::Diverged { message, .. } => DamError::Diverged { step, message },
            other => other,
        })?;
        let clipped = clip.clip(&mut grads);
        if !clipped.norm.is_finite() {
            return Err(DamError::Diverged {
                step,
                message: format!("gradient norm {} (loss {loss})", clipped.norm),
            });
        }
        let lr = cfg.schedule.lr_at(step);
        adam.step(&mut model, &grads, lr);

        let done = step + 1;
        let val_mse = match valid {
            Some(v) if cfg.validation_every > 0 && (done % cfg.validation_every == 0 || done == cfg.iterations()) => {
                Some(validation_mse(&model, v, cfg, val_seed, exec)?)
            }
            _ => None,
        };
        let m = StepMetrics {
            step: done,
            loss,
            lr,
            grad_norm: clipped.norm,
            val_mse,
        };
        let _ = writeln!(log, "{}", m.to_csv_row());
        history.push(m);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("ckpt-{done:07}"));
                model.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = out {
        let p = dir.join("final");
        model.save(&p)?;
        checkpoints.push(p);
        let mpath = dir.join(METRICS_FILE);
        fs::write(&mpath, &log).map_err(|e| DamError::io(&mpath, e))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
    })
}
