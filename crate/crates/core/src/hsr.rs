//! History sampling regime.
//!
//! Time-step offsets `x` relative to "now" (`x < 0` is the past) are drawn
//! with probability proportional to `1 / (1 + (x/sigma)^2)`: recent history
//! dominates, but a long tail still reaches distant history.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeValueSeries;
use crate::error::{DamError, Result};

/// Unnormalised HSR weight of offset `x`.
pub fn hsr_weight(x: i64, sigma: f64) -> f64 {
    let r = x as f64 / sigma;
    1.0 / (1.0 + r * r)
}

/// Normalisation constant: the sum of [`hsr_weight`] over the support.
pub fn hsr_normalizer(support: &[i64], sigma: f64) -> Result<f64> {
    if support.is_empty() {
        return Err(DamError::EmptySupport);
    }
    Ok(support.iter().map(|&x| hsr_weight(x, sigma)).sum())
}

/// HSR probability of `x` within `support`.
pub fn hsr_probability(x: i64, support: &[i64], sigma: f64) -> Result<f64> {
    Ok(hsr_weight(x, sigma) / hsr_normalizer(support, sigma)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsrConfig {
    /// Distribution width in time steps.
    pub sigma: f64,
    /// Number of points to draw.
    pub n_points: usize,
    /// Optional cap on how far into the past the support reaches.
    #[serde(default)]
    pub max_lookback: Option<usize>,
}

impl HsrConfig {
    pub fn new(n_points: usize, sigma: f64) -> Self {
        Self {
            sigma,
            n_points,
            max_lookback: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(DamError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.n_points == 0 {
            return Err(DamError::Config("n_points must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled set of time-value pairs, ordered by time.
#[derive(Debug, Clone, PartialEq)]
pub struct HsrDraw {
    /// Offsets from "now" in time steps.
    pub indices: Vec<i64>,
    /// Times relative to "now", in days.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl HsrDraw {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Builds a draw from explicit offsets (sorted on construction).
    pub fn from_offsets(series: &TimeValueSeries, now_index: usize, offsets: &[i64]) -> Self {
        let mut indices = offsets.to_vec();
        indices.sort_unstable();
        let now_t = series.times[now_index];
        let abs = |x: i64| (now_index as i64 + x) as usize;
        Self {
            times: indices.iter().map(|&x| series.times[abs(x)] - now_t).collect(),
            values: indices.iter().map(|&x| series.values[abs(x)]).collect(),
            indices,
        }
    }
}

/// Valid offsets for absolute indices in `[start, end)`.
pub fn support_offsets(
    series: &TimeValueSeries,
    now_index: usize,
    start: usize,
    end: usize,
) -> Vec<i64> {
    let end = end.min(series.len());
    (start..end)
        .filter(|&i| series.valid[i])
        .map(|i| i as i64 - now_index as i64)
        .collect()
}

fn lookback_start(now_index: usize, cfg: &HsrConfig) -> usize {
    cfg.max_lookback
        .map_or(0, |lb| now_index.saturating_sub(lb))
}

/// Context draw from the valid strict past (`x < 0`).
pub fn sample_context<R: Rng + ?Sized>(
    series: &TimeValueSeries,
    now_index: usize,
    cfg: &HsrConfig,
    rng: &mut R,
) -> Result<HsrDraw> {
    check_now(series, now_index)?;
    let support = support_offsets(series, now_index, lookback_start(now_index, cfg), now_index);
    let picked = draw_without_replacement(&support, cfg, rng)?;
    Ok(HsrDraw::from_offsets(series, now_index, &picked))
}

/// Target draw over past and future: valid absolute indices below `end`.
pub fn sample_targets<R: Rng + ?Sized>(
    series: &TimeValueSeries,
    now_index: usize,
    end: usize,
    cfg: &HsrConfig,
    rng: &mut R,
) -> Result<HsrDraw> {
    check_now(series, now_index)?;
    let support = support_offsets(series, now_index, lookback_start(now_index, cfg), end);
    let picked = draw_without_replacement(&support, cfg, rng)?;
    Ok(HsrDraw::from_offsets(series, now_index, &picked))
}

fn check_now(series: &TimeValueSeries, now_index: usize) -> Result<()> {
    if now_index >= series.len() {
        return Err(DamError::IndexOutOfRange {
            index: now_index,
            len: series.len(),
        });
    }
    Ok(())
}

/// Weighted sampling without replacement by exponential keys: each offset
/// gets `ln(u) / w(x)` and the largest `n_points` keys win.
pub fn draw_without_replacement<R: Rng + ?Sized>(
    support: &[i64],
    cfg: &HsrConfig,
    rng: &mut R,
) -> Result<Vec<i64>> {
    cfg.validate()?;
    let k = cfg.n_points;
    if support.len() < k {
        return Err(DamError::InsufficientPoints {
            needed: k,
            available: support.len(),
        });
    }
    // One uniform per support element keeps the stream position independent of k.
    let mut keyed: Vec<(f64, i64)> = support
        .iter()
        .map(|&x| {
            let u = 1.0 - rng.random::<f64>();
            (u.ln() / hsr_weight(x, cfg.sigma), x)
        })
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
        keyed.truncate(k);
    }
    let mut out: Vec<i64> = keyed.into_iter().map(|(_, x)| x).collect();
    out.sort_unstable();
    Ok(out)
}

/// Reference sampler: `n_points` successive weighted draws, renormalising
/// over the remaining support each time. Quadratic; used to validate
/// [`draw_without_replacement`].
pub fn draw_sequential<R: Rng + ?Sized>(
    support: &[i64],
    cfg: &HsrConfig,
    rng: &mut R,
) -> Result<Vec<i64>> {
    cfg.validate()?;
    if support.len() < cfg.n_points {
        return Err(DamError::InsufficientPoints {
            needed: cfg.n_points,
            available: support.len(),
        });
    }
    let mut remaining: Vec<(i64, f64)> = support
        .iter()
        .map(|&x| (x, hsr_weight(x, cfg.sigma)))
        .collect();
    let mut out = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        let total: f64 = remaining.iter().map(|r| r.1).sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (i, r) in remaining.iter().enumerate() {
            if target < r.1 {
                pick = i;
                break;
            }
            target -= r.1;
        }
        out.push(remaining.swap_remove(pick).0);
    }
    out.sort_unstable();
    Ok(out)
}

/// Diagnostic sampling with replacement from the HSR distribution.
pub fn draw_with_replacement<R: Rng + ?Sized>(
    support: &[i64],
    sigma: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<i64>> {
    if support.is_empty() {
        return Err(DamError::EmptySupport);
    }
    let weights: Vec<f64> = support.iter().map(|&x| hsr_weight(x, sigma)).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| DamError::Config(format!("bad hsr weights: {e}")))?;
    Ok((0..n).map(|_| support[dist.sample(rng)]).collect())
}
