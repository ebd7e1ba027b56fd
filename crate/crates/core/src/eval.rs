//! Evaluation protocols: sliding-window forecasting metrics, HSR grid
//! tuning, imputation, inference-cost sweeps and component ablations.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{self, ForecastFunction, ImputationPoints};
use crate::data::{Dataset, TimeValueSeries};
use crate::error::{DamError, Result};
use crate::hsr::{self, HsrConfig};
use crate::model::{DamModel, DamOutput, ForwardOptions, ModelInput, Skip};
use crate::numerics::Real;
use crate::par::Exec;
use crate::stats;
use crate::svg;

/// Anything that can forecast a series from an anchor.
pub trait Forecaster: Sync {
    /// Predictions at `query_times` (days relative to `series.times[now]`),
    /// using only data strictly before `now`.
    fn predict(&self, series: &TimeValueSeries, now: usize, query_times: &[f64], seed: u64) -> Result<Vec<f64>>;
}

/// Seed for one window: a fixed mix of the run seed and the anchor.
pub fn window_seed(seed: u64, now: usize) -> u64 {
    seed ^ (now as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn draw_context(series: &TimeValueSeries, now: usize, context: usize, sigma: f64, seed: u64) -> Result<hsr::HsrDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(window_seed(seed, now));
    hsr::sample_context(series, now, &HsrConfig::new(context, sigma), &mut rng)
}

/// The backbone with an HSR context draw per window.
#[derive(Debug, Clone)]
pub struct DamForecaster<'a, T: Real> {
    pub model: &'a DamModel<T>,
    pub context_size: usize,
    pub sigma: f64,
    pub skip: Skip,
    pub tome_target: Option<usize>,
}

impl<'a, T: Real> DamForecaster<'a, T> {
    pub fn new(model: &'a DamModel<T>, context_size: usize, sigma: f64) -> Self {
        Self {
            model,
            context_size,
            sigma,
            skip: Skip::none(),
            tome_target: None,
        }
    }

    /// Full forward output for the window at `now`.
    pub fn output(&self, series: &TimeValueSeries, now: usize, seed: u64) -> Result<DamOutput> {
        let draw = draw_context(series, now, self.context_size, self.sigma, seed)?;
        let input = ModelInput::from_draw(&draw, &self.model.spec, self.model.config.lambda)?;
        let opts = ForwardOptions {
            skip: self.skip,
            tome_target: self.tome_target,
            ..ForwardOptions::inference()
        };
        self.model.forward(&input, &opts)
    }
}

impl<T: Real> Forecaster for DamForecaster<'_, T> {
    fn predict(&self, series: &TimeValueSeries, now: usize, query_times: &[f64], seed: u64) -> Result<Vec<f64>> {
        Ok(self
            .output(series, now, seed)?
            .forecast(&self.model.spec, query_times))
    }
}

/// The initial coefficient fit alone, with no backbone.
#[derive(Debug, Clone)]
pub struct Theta0Forecaster {
    pub context_size: usize,
    pub sigma: f64,
    pub lambda: f64,
}

impl Theta0Forecaster {
    pub fn function(&self, series: &TimeValueSeries, now: usize, seed: u64) -> Result<(ForecastFunction, hsr::HsrDraw)> {
        let draw = draw_context(series, now, self.context_size, self.sigma, seed)?;
        let spec = basis::build_frequency_set();
        let input = ModelInput::from_draw(&draw, &spec, self.lambda)?;
        Ok((ForecastFunction::new(spec, input.theta0, input.norm), draw))
    }
}

impl Forecaster for Theta0Forecaster {
    fn predict(&self, series: &TimeValueSeries, now: usize, query_times: &[f64], seed: u64) -> Result<Vec<f64>> {
        Ok(self.function(series, now, seed)?.0.evaluate(query_times))
    }
}

/// Wraps a closure as a [`Forecaster`] (oracles, naive baselines).
pub struct FnForecaster<F>(pub F);

impl<F> Forecaster for FnForecaster<F>
where
    F: Fn(&TimeValueSeries, usize, &[f64]) -> Vec<f64> + Sync,
{
    fn predict(&self, series: &TimeValueSeries, now: usize, query_times: &[f64], _seed: u64) -> Result<Vec<f64>> {
        Ok((self.0)(series, now, query_times))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub horizons: Vec<usize>,
    pub context_size: usize,
    pub sigma: f64,
    /// Absolute merge target; `None` keeps the trained ratio.
    pub tome_target: Option<usize>,
    pub stride: usize,
    pub seeds: Vec<u64>,
    /// Z-score every channel with its training-split mean and deviation
    /// before computing errors.
    pub standardize: bool,
    /// Evaluate at most this many windows, spread evenly over the span.
    pub max_windows: Option<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            horizons: vec![96, 192, 336, 720],
            context_size: 720,
            sigma: 720.0,
            tome_target: None,
            stride: 1,
            seeds: vec![42, 43, 44],
            standardize: true,
            max_windows: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(DamError::Config("horizons must be positive".into()));
        }
        if self.stride == 0 {
            return Err(DamError::Config("stride must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(DamError::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }
}

/// Metrics for one dataset and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub nmse: f64,
    pub nmae: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    /// One CSV row per dataset, horizon and metric.
    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let seeds = seeds.join(";");
        let mut out = String::from("dataset,horizon,metric,value,windows,seeds\n");
        for r in &self.rows {
            for (name, v) in [("mse", r.mse), ("mae", r.mae), ("nmse", r.nmse), ("nmae", r.nmae)] {
                let _ = writeln!(out, "{},{},{name},{v:.9e},{},{seeds}", r.dataset, r.horizon, r.windows);
            }
        }
        out
    }

    pub fn row(&self, horizon: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }

    pub fn mean_mse(&self) -> f64 {
        stats::mean(&self.rows.iter().map(|r| r.mse).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    se: f64,
    ae: f64,
    v2: f64,
    v1: f64,
    n: usize,
}

/// Forecast metrics on the test split.
pub fn evaluate_forecast(
    forecaster: &dyn Forecaster,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    exec: Exec,
) -> Result<MetricReport> {
    evaluate_span(forecaster, dataset, dataset.split.test.clone(), protocol, exec)
}

/// Forecast metrics with anchors in `span`: windows `[now, now + H)` for
/// every `now` in `span` (stepping by the stride) with `now + H_max <= span.end`.
/// One prediction of length `H_max` per window serves every horizon.
pub fn evaluate_span(
    forecaster: &dyn Forecaster,
    dataset: &Dataset,
    span: Range<usize>,
    protocol: &EvalProtocol,
    exec: Exec,
) -> Result<MetricReport> {
    protocol.validate()?;
    let hmax = protocol.max_horizon();
    if span.len() < hmax + 1 {
        return Err(DamError::InsufficientTestLength {
            needed: hmax + 1,
            available: span.len(),
        });
    }
    let mut anchors: Vec<usize> = (span.start..=span.end - hmax).step_by(protocol.stride).collect();
    if let Some(cap) = protocol.max_windows {
        if cap > 0 && anchors.len() > cap {
            let step = anchors.len() as f64 / cap as f64;
            anchors = (0..cap).map(|i| anchors[(i as f64 * step) as usize]).collect();
        }
    }
    let mut jobs = Vec::new();
    for c in 0..dataset.series.len() {
        for &now in &anchors {
            for &seed in &protocol.seeds {
                jobs.push((c, now, seed));
            }
        }
    }
    let scales: Vec<(f64, f64)> = dataset
        .series
        .iter()
        .map(|s| {
            if !protocol.standardize {
                return (0.0, 1.0);
            }
            let train: Vec<f64> = dataset
                .split
                .train
                .clone()
                .filter(|&i| s.valid[i])
                .map(|i| s.values[i])
                .collect();
            if train.len() < 2 {
                return (0.0, 1.0);
            }
            let sd = stats::std(&train);
            (stats::mean(&train), if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let results = exec.map(&jobs, |&(c, now, seed)| -> Result<Vec<Acc>> {
        let s = &dataset.series[c];
        let times: Vec<f64> = (0..hmax).map(|h| s.times[now + h] - s.times[now]).collect();
        let pred = forecaster.predict(s, now, &times, seed)?;
        let (mu, sd) = scales[c];
        let mut per_h = Vec::with_capacity(protocol.horizons.len());
        for &h in &protocol.horizons {
            let mut a = Acc::default();
            for k in 0..h {
                let i = now + k;
                if !s.valid[i] {
                    continue;
                }
                let v = (s.values[i] - mu) / sd;
                let e = (pred[k] - mu) / sd - v;
                a.se += e * e;
                a.ae += e.abs();
                a.v2 += v * v;
                a.v1 += v.abs();
                a.n += 1;
            }
            per_h.push(a);
        }
        Ok(per_h)
    });
    let n_h = protocol.horizons.len();
    let mut acc = vec![vec![Acc::default(); n_h]; dataset.series.len()];
    for (job, r) in jobs.iter().zip(results) {
        for (slot, a) in acc[job.0].iter_mut().zip(r?) {
            slot.se += a.se;
            slot.ae += a.ae;
            slot.v2 += a.v2;
            slot.v1 += a.v1;
            slot.n += a.n;
        }
    }
    let rows = protocol
        .horizons
        .iter()
        .enumerate()
        .map(|(hi, &h)| {
            let per: Vec<&Acc> = acc.iter().map(|a| &a[hi]).filter(|a| a.n > 0).collect();
            let avg = |f: &dyn Fn(&Acc) -> f64| stats::mean(&per.iter().map(|a| f(a)).collect::<Vec<_>>());
            MetricRow {
                dataset: dataset.name.clone(),
                horizon: h,
                mse: avg(&|a| a.se / a.n as f64),
                mae: avg(&|a| a.ae / a.n as f64),
                nmse: avg(&|a| if a.v2 > 0.0 { a.se / a.v2 } else { 0.0 }),
                nmae: avg(&|a| if a.v1 > 0.0 { a.ae / a.v1 } else { 0.0 }),
                windows: anchors.len() * protocol.seeds.len(),
            }
        })
        .collect();
    Ok(MetricReport {
        rows,
        seeds: protocol.seeds.clone(),
    })
}

/// MSE per `(context size, sigma)` cell, rows are context sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct HsrTuning {
    pub contexts: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub mse: Vec<Vec<f64>>,
    pub best: (usize, f64),
}

impl HsrTuning {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("context");
        for s in &self.sigmas {
            let _ = write!(out, ",sigma={s}");
        }
        out.push('\n');
        for (c, row) in self.contexts.iter().zip(&self.mse) {
            let _ = write!(out, "{c}");
            for v in row {
                let _ = write!(out, ",{v:.9e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self, title: &str) -> String {
        svg::heatmap(
            title,
            &self.contexts.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
            &self.sigmas.iter().map(|s| format!("{s}")).collect::<Vec<_>>(),
            &self.mse,
        )
    }
}

/// Picks the cell with the lowest MSE; ties go to the smaller context,
/// then the smaller sigma.
pub fn argmin_cell(contexts: &[usize], sigmas: &[f64], mse: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    for (i, &c) in contexts.iter().enumerate() {
        for (j, &s) in sigmas.iter().enumerate() {
            let v = mse[i][j];
            let better = match best {
                None => true,
                Some((bv, bc, bs)) => v < bv || (v == bv && (c < bc || (c == bc && s < bs))),
            };
            if better {
                best = Some((v, c, s));
            }
        }
    }
    best.map(|(_, c, s)| (c, s))
}

/// Grid search over HSR settings on the validation split. `make` builds a
/// forecaster for one `(context size, sigma)` cell. Each cell is scored by
/// the mean MSE over the protocol's horizons.
pub fn tune_hsr<'f, F>(
    make: F,
    dataset: &Dataset,
    contexts: &[usize],
    sigmas: &[f64],
    protocol: &EvalProtocol,
    exec: Exec,
) -> Result<HsrTuning>
where
    F: Fn(usize, f64) -> Box<dyn Forecaster + 'f> + Sync,
{
    if contexts.is_empty() || sigmas.is_empty() {
        return Err(DamError::Config("HSR grid is empty".into()));
    }
    let mut contexts = contexts.to_vec();
    contexts.sort_unstable();
    contexts.dedup();
    let mut sigmas = sigmas.to_vec();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let cells: Vec<(usize, f64)> = contexts
        .iter()
        .flat_map(|&c| sigmas.iter().map(move |&s| (c, s)))
        .collect();
    let scores = exec.map(&cells, |&(c, s)| -> Result<f64> {
        let f = make(c, s);
        let report = evaluate_span(f.as_ref(), dataset, dataset.split.valid.clone(), protocol, Exec::Sequential)?;
        Ok(report.mean_mse())
    });
    let mut mse = vec![vec![0.0; sigmas.len()]; contexts.len()];
    for (k, r) in scores.into_iter().enumerate() {
        mse[k / sigmas.len()][k % sigmas.len()] = r?;
    }
    let best = argmin_cell(&contexts, &sigmas, &mse).expect("grid is non-empty");
    Ok(HsrTuning {
        contexts,
        sigmas,
        mse,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputationConfig {
    /// Fractions of time steps to mask, in percent.
    pub rates: Vec<f64>,
    pub lambda: f64,
    pub window: usize,
    /// Masks are drawn from the central `window - 2 * margin` steps.
    pub margin: usize,
    pub seed: u64,
    /// Z-score channels (full-series mean and deviation) before scoring.
    pub standardize: bool,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            rates: vec![12.5, 25.0, 37.5, 50.0],
            lambda: 1.0,
            window: 1440,
            margin: 360,
            seed: 42,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationRow {
    pub rate: f64,
    pub method: &'static str,
    pub mse: f64,
    pub mae: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationReport {
    pub rows: Vec<ImputationRow>,
    /// Rates that produced no masked cells.
    pub skipped: Vec<f64>,
}

pub const METHOD_BASIS: &str = "basis";
pub const METHOD_LINEAR: &str = "linear";

impl ImputationReport {
    pub fn get(&self, rate: f64, method: &str) -> Option<&ImputationRow> {
        self.rows.iter().find(|r| r.rate == rate && r.method == method)
    }

    /// Rates as rows, `(method, metric)` pairs as columns, plus an average row.
    pub fn to_csv(&self) -> String {
        let mut rates: Vec<f64> = self.rows.iter().map(|r| r.rate).collect();
        rates.dedup();
        let methods = [METHOD_BASIS, METHOD_LINEAR];
        let mut out = String::from("rate");
        for m in methods {
            let _ = write!(out, ",{m}_mse,{m}_mae");
        }
        out.push('\n');
        let mut sums = vec![0.0; 2 * methods.len()];
        for &rate in &rates {
            let _ = write!(out, "{rate}");
            for (k, m) in methods.iter().enumerate() {
                let r = self.get(rate, m);
                let (mse, mae) = r.map_or((f64::NAN, f64::NAN), |r| (r.mse, r.mae));
                sums[2 * k] += mse;
                sums[2 * k + 1] += mae;
                let _ = write!(out, ",{mse:.9e},{mae:.9e}");
            }
            out.push('\n');
        }
        if !rates.is_empty() {
            out.push_str("avg");
            for s in sums {
                let _ = write!(out, ",{:.9e}", s / rates.len() as f64);
            }
            out.push('\n');
        }
        out
    }
}

/// Linear interpolation between the nearest unmasked neighbours inside
/// `window`; edges copy the nearest observed value.
pub fn linear_interpolate(series: &TimeValueSeries, mask: &[bool], window: Range<usize>) -> Vec<f64> {
    let observed: Vec<usize> = window.clone().filter(|&i| series.valid[i] && !mask[i]).collect();
    window
        .map(|i| {
            if series.valid[i] && !mask[i] {
                return series.values[i];
            }
            let pos = observed.partition_point(|&j| j < i);
            match (pos.checked_sub(1).map(|p| observed[p]), observed.get(pos)) {
                (Some(a), Some(&b)) => {
                    let w = (series.times[i] - series.times[a]) / (series.times[b] - series.times[a]);
                    series.values[a] + w * (series.values[b] - series.values[a])
                }
                (Some(a), None) => series.values[a],
                (None, Some(&b)) => series.values[b],
                (None, None) => f64::NAN,
            }
        })
        .collect()
}

/// Column-masking imputation benchmark: at each rate, the same time steps
/// are masked in every channel; the basis fit on the remaining points of
/// each window fills them in, compared against linear interpolation.
pub fn evaluate_imputation(series: &[TimeValueSeries], cfg: &ImputationConfig, exec: Exec) -> Result<ImputationReport> {
    let len = series.first().map_or(0, TimeValueSeries::len);
    if series.iter().any(|s| s.len() != len) {
        return Err(DamError::Config("channels must share a time axis".into()));
    }
    if let Some(&bad) = cfg.rates.iter().find(|&&r| !(0.0..100.0).contains(&r)) {
        return Err(DamError::Config(format!("mask rate {bad}% must lie in [0, 100)")));
    }
    let window = cfg.window.min(len);
    if window == 0 {
        return Err(DamError::InsufficientTestLength {
            needed: cfg.window,
            available: len,
        });
    }
    let margin = if window == cfg.window { cfg.margin } else { window / 4 };
    let windows: Vec<Range<usize>> = (0..len / window).map(|w| w * window..(w + 1) * window).collect();
    let scales: Vec<(f64, f64)> = series
        .iter()
        .map(|s| {
            let obs: Vec<f64> = s.values.iter().zip(&s.valid).filter(|p| *p.1).map(|p| *p.0).collect();
            if !cfg.standardize || obs.len() < 2 {
                return (0.0, 1.0);
            }
            let sd = stats::std(&obs);
            (stats::mean(&obs), if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (ri, &rate) in cfg.rates.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ri as u64));
        let mut mask = vec![false; len];
        for w in &windows {
            let span = w.start + margin..w.end - margin;
            let k = (rate / 100.0 * span.len() as f64).round() as usize;
            for off in index::sample(&mut rng, span.len(), k) {
                mask[span.start + off] = true;
            }
        }
        if !mask.iter().any(|&m| m) {
            skipped.push(rate);
            continue;
        }
        let jobs: Vec<(usize, usize)> = (0..series.len())
            .flat_map(|c| (0..windows.len()).map(move |w| (c, w)))
            .collect();
        let results = exec.map(&jobs, |&(c, w)| -> Result<[Acc; 2]> {
            let s = &series[c];
            let win = windows[w].clone();
            let f = basis::imputation_fit_with(s, &mask, win.clone(), cfg.lambda, ImputationPoints::All)?;
            let lin = linear_interpolate(s, &mask, win.clone());
            let origin = s.times[win.start];
            let (mu, sd) = scales[c];
            let mut out = [Acc::default(); 2];
            for (k, i) in win.enumerate() {
                if !mask[i] || !s.valid[i] {
                    continue;
                }
                let truth = (s.values[i] - mu) / sd;
                for (slot, pred) in out.iter_mut().zip([f.at(s.times[i] - origin), lin[k]]) {
                    let e = (pred - mu) / sd - truth;
                    slot.se += e * e;
                    slot.ae += e.abs();
                    slot.n += 1;
                }
            }
            Ok(out)
        });
        let mut tot = [Acc::default(); 2];
        for r in results {
            for (t, a) in tot.iter_mut().zip(r?) {
                t.se += a.se;
                t.ae += a.ae;
                t.n += a.n;
            }
        }
        for (t, method) in tot.iter().zip([METHOD_BASIS, METHOD_LINEAR]) {
            let n = t.n.max(1) as f64;
            rows.push(ImputationRow {
                rate,
                method,
                mse: t.se / n,
                mae: t.ae / n,
                cells: t.n,
            });
        }
    }
    Ok(ImputationReport { rows, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub context_size: usize,
    /// Median wall time of one minibatch forward + forecast, in seconds.
    pub median_seconds: f64,
    pub mse: f64,
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("context_size,median_seconds,mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9e},{:.9e}", r.context_size, r.median_seconds, r.mse);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub context_sizes: Vec<usize>,
    pub minibatch: usize,
    pub runs: usize,
    pub horizon: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            context_sizes: vec![64, 128, 256, 512, 1024],
            minibatch: 8,
            runs: 20,
            horizon: 96,
            sigma: 720.0,
            seed: 42,
        }
    }
}

/// Times forward + forecast per context size over a fixed minibatch of
/// anchors (the last ones that leave room for the horizon) and reports the
/// horizon MSE of those windows in dataset units.
pub fn cost_sweep<T: Real>(model: &DamModel<T>, series: &TimeValueSeries, cfg: &CostConfig) -> Result<Vec<CostRow>> {
    let need = cfg.context_sizes.iter().copied().max().unwrap_or(0);
    let last = series.len().saturating_sub(cfg.horizon);
    let anchors: Vec<usize> = (0..cfg.minibatch)
        .map(|k| last.saturating_sub(1 + k * cfg.horizon.max(1)))
        .filter(|&a| series.valid[..a].iter().filter(|&&v| v).count() >= need)
        .collect();
    if anchors.is_empty() {
        return Err(DamError::InsufficientHistory { needed: need });
    }
    let mut rows = Vec::with_capacity(cfg.context_sizes.len());
    for &c in &cfg.context_sizes {
        let inputs: Vec<ModelInput> = anchors
            .iter()
            .map(|&now| {
                let draw = draw_context(series, now, c, cfg.sigma, cfg.seed)?;
                ModelInput::from_draw(&draw, &model.spec, model.config.lambda)
            })
            .collect::<Result<_>>()?;
        let horizon_times: Vec<Vec<f64>> = anchors
            .iter()
            .map(|&now| (0..cfg.horizon).map(|h| series.times[now + h] - series.times[now]).collect())
            .collect();
        let mut times = Vec::with_capacity(cfg.runs);
        let mut preds = Vec::new();
        for _ in 0..cfg.runs.max(1) {
            let t0 = Instant::now();
            preds = inputs
                .iter()
                .zip(&horizon_times)
                .map(|(inp, q)| Ok(model.forward(inp, &ForwardOptions::inference())?.forecast(&model.spec, q)))
                .collect::<Result<Vec<_>>>()?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let (mut se, mut n) = (0.0, 0);
        for (&now, p) in anchors.iter().zip(&preds) {
            for (h, &v) in p.iter().enumerate() {
                if series.valid[now + h] {
                    se += (v - series.values[now + h]).powi(2);
                    n += 1;
                }
            }
        }
        rows.push(CostRow {
            context_size: c,
            median_seconds: stats::median(&mut times),
            mse: se / n.max(1) as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub component: String,
    pub report: MetricReport,
    /// Mean-over-horizons MSE minus the baseline's.
    pub delta_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub baseline: MetricReport,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,mean_mse,delta_mse\n");
        let _ = writeln!(out, "none,{:.9e},0", self.baseline.mean_mse());
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.9e},{:.9e}", r.component, r.report.mean_mse(), r.delta_mse);
        }
        out
    }
}

/// Evaluates the model with each named component skipped in turn.
pub fn ablate<T: Real>(
    model: &DamModel<T>,
    components: &[&str],
    dataset: &Dataset,
    protocol: &EvalProtocol,
    exec: Exec,
) -> Result<AblationReport> {
    let skips: Vec<(String, Skip)> = components
        .iter()
        .map(|&c| Skip::from_names(&[c]).map(|s| (c.to_string(), s)))
        .collect::<Result<_>>()?;
    let run = |skip: Skip| {
        let f = DamForecaster {
            skip,
            tome_target: protocol.tome_target,
            ..DamForecaster::new(model, protocol.context_size, protocol.sigma)
        };
        evaluate_forecast(&f, dataset, protocol, exec)
    };
    let baseline = run(Skip::none())?;
    let base = baseline.mean_mse();
    let rows = skips
        .into_iter()
        .map(|(component, skip)| {
            let report = run(skip)?;
            Ok(AblationRow {
                component,
                delta_mse: report.mean_mse() - base,
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport { baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSplit;

    fn dataset(values: Vec<f64>) -> Dataset {
        let n = values.len();
        Dataset {
            name: "toy".into(),
            series: vec![TimeValueSeries::regular("a", values, 1.0 / 24.0)],
            split: DatasetSplit::from_fractions(n, 0.6, 0.2).unwrap(),
        }
    }

    fn oracle() -> FnForecaster<impl Fn(&TimeValueSeries, usize, &[f64]) -> Vec<f64> + Sync> {
        FnForecaster(|s: &TimeValueSeries, now: usize, q: &[f64]| (0..q.len()).map(|h| s.values[now + h]).collect())
    }

    #[test]
    fn perfect_oracle_scores_zero() {
        let d = dataset((0..600).map(|i| (i as f64 * 0.1).sin()).collect());
        let p = EvalProtocol {
            horizons: vec![4, 8],
            seeds: vec![1],
            ..EvalProtocol::default()
        };
        let r = evaluate_forecast(&oracle(), &d, &p, Exec::Sequential).unwrap();
        for row in &r.rows {
            assert_eq!((row.mse, row.mae, row.nmse, row.nmae), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn predict_zero_gives_mean_square() {
        let vals: Vec<f64> = (0..300).map(|i| 1.0 + (i % 7) as f64).collect();
        let d = dataset(vals.clone());
        let p = EvalProtocol {
            horizons: vec![5],
            seeds: vec![0],
            standardize: false,
            ..EvalProtocol::default()
        };
        let zero = FnForecaster(|_: &TimeValueSeries, _: usize, q: &[f64]| vec![0.0; q.len()]);
        let r = evaluate_forecast(&zero, &d, &p, Exec::Sequential).unwrap();
        let test = d.split.test.clone();
        let (mut sq, mut ab, mut n) = (0.0, 0.0, 0);
        for now in test.start..=test.end - 5 {
            for h in 0..5 {
                sq += vals[now + h].powi(2);
                ab += vals[now + h].abs();
                n += 1;
            }
        }
        let row = r.row(5).unwrap();
        assert!((row.mse - sq / n as f64).abs() < 1e-9);
        assert!((row.mae - ab / n as f64).abs() < 1e-9);
        assert!((row.nmse - 1.0).abs() < 1e-12);
        assert!((row.nmae - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_test_split_is_rejected() {
        let d = dataset(vec![0.0; 100]);
        let p = EvalProtocol::default();
        assert!(matches!(
            evaluate_forecast(&oracle(), &d, &p, Exec::Sequential),
            Err(DamError::InsufficientTestLength { .. })
        ));
    }

    #[test]
    fn argmin_prefers_smaller_context_on_ties() {
        let mse = vec![vec![1.0, 0.5], vec![0.5, 2.0]];
        assert_eq!(argmin_cell(&[100, 200], &[10.0, 20.0], &mse), Some((100, 20.0)));
        assert_eq!(argmin_cell(&[7], &[3.0], &[vec![9.0]]), Some((7, 3.0)));
    }

    #[test]
    fn linear_interpolation_fills_gaps() {
        let s = TimeValueSeries::regular("x", vec![0.0, 1.0, 2.0, 3.0, 4.0], 1.0);
        let mask = vec![true, false, true, false, true];
        assert_eq!(linear_interpolate(&s, &mask, 0..5), vec![1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn imputation_rejects_full_masking_and_skips_zero() {
        let s = vec![TimeValueSeries::regular("x", vec![1.0; 100], 1.0)];
        let bad = ImputationConfig {
            rates: vec![100.0],
            ..ImputationConfig::default()
        };
        assert!(evaluate_imputation(&s, &bad, Exec::Sequential).is_err());
        let zero = ImputationConfig {
            rates: vec![0.0],
            ..ImputationConfig::default()
        };
        let r = evaluate_imputation(&s, &zero, Exec::Sequential).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.skipped, vec![0.0]);
    }
}
