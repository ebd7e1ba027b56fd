//! The DAM backbone.
//!
//! Context pairs become TV-tokens, the initial coefficient fit becomes one
//! B-token per frequency, and 50 context percentiles become the affine token.
//! Each layer runs self-attention over `[affine; tv]`, merges TV-tokens with
//! bipartite soft matching, lets B-tokens cross-attend to `[affine; tv]`, and
//! mixes B-tokens across the frequency axis. Collapse heads then produce the
//! basis coefficients (cosine in column 0, sine in column 1) and the affine
//! `(offset, scale)` pair.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{
    self, AffineParams, BasisSpec, CoefficientVector, ForecastFunction, RobustNorm,
    FREQUENCY_SET_VERSION,
};
use crate::error::{DamError, Result};
use crate::hsr::HsrDraw;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::stats;

/// Number of interior percentiles embedded into the affine token.
pub const N_QUANTILES: usize = 50;
/// Damping factor for the coefficient embedding, `asinh(k x) / k`.
pub const COEFF_DAMPING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// TV-token count left after all merging, at `tome_reference_context`.
    pub n_tome: usize,
    /// Context size at which `n_tome` applies; other sizes keep the ratio.
    pub tome_reference_context: usize,
    /// Absolute merge target overriding the ratio rule.
    pub tome_override: Option<usize>,
    pub dropout: f64,
    /// Ridge strength of the initial coefficient fit.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_ff: 256,
            n_layers: 4,
            n_heads: 4,
            n_tome: 250,
            tome_reference_context: 540,
            tome_override: None,
            dropout: 0.1,
            lambda: 1.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            d_model: 32,
            d_ff: 32,
            n_layers: 2,
            n_heads: 4,
            n_tome: 64,
            tome_reference_context: 128,
            tome_override: None,
            dropout: 0.0,
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DamError::Config(m));
        if self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("model sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_tome == 0 || self.n_tome > self.tome_reference_context {
            return bad(format!(
                "n_tome {} must lie in 1..={}",
                self.n_tome, self.tome_reference_context
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        Ok(())
    }

    /// Merge target for a context of `n` tokens.
    pub fn tome_target(&self, n: usize) -> usize {
        let target = match self.tome_override {
            Some(t) => t,
            None => {
                let ratio = self.n_tome as f64 / self.tome_reference_context as f64;
                (n as f64 * ratio).round() as usize
            }
        };
        target.clamp(1, n.max(1))
    }
}

/// Python-style rounding (half to even).
fn round_half_even(x: f64) -> i64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && r as i64 % 2 != 0 {
        (r - x.signum()) as i64
    } else {
        r as i64
    }
}

/// Per-layer merge amounts taking `n` tokens to `target` over `n_layers`.
///
/// Every layer but the last removes `round((n - target) / n_layers)`; the last
/// layer removes whatever is left so the final count is exactly `target`.
/// Each amount is clamped to what is left above `target` and to the
/// bipartite limit `floor(count / 2)`.
pub fn tome_schedule(n: usize, target: usize, n_layers: usize) -> Vec<usize> {
    let base = round_half_even((n as f64 - target as f64) / n_layers as f64).max(0) as usize;
    let mut count = n;
    let mut out = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let left = count.saturating_sub(target);
        let want = if li + 1 == n_layers { left } else { base.min(left) };
        let r = want.min(count / 2);
        out.push(r);
        count -= r;
    }
    out
}

/// Bipartite soft matching over row-major `metric` (`n x dim`).
///
/// Even positions form set A, odd positions set B. Each A token finds its
/// most cosine-similar B token; the `r` A tokens with the highest such
/// similarity are merged (by unweighted mean) into their match. Ties prefer
/// the lower index. Returns the row groups of the merged sequence, ordered by
/// the smallest `order_key` of each group.
pub fn bipartite_soft_matching(
    metric: &[f64],
    n: usize,
    dim: usize,
    r: usize,
    order_key: &[usize],
) -> Result<Vec<Vec<usize>>> {
    if metric.len() != n * dim || order_key.len() != n {
        return Err(DamError::ShapeMismatch {
            op: "bipartite_soft_matching",
            lhs: vec![n, dim],
            rhs: vec![metric.len(), order_key.len()],
        });
    }
    if r > 0 && r >= n {
        return Err(DamError::Config(format!(
            "cannot merge {r} of {n} tokens"
        )));
    }
    let r = r.min(n / 2);
    if r == 0 {
        return Ok((0..n).map(|i| vec![i]).collect());
    }
    let unit: Vec<Vec<f64>> = metric
        .chunks_exact(dim)
        .map(|row| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                vec![0.0; dim]
            }
        })
        .collect();
    let a: Vec<usize> = (0..n).step_by(2).collect();
    let b: Vec<usize> = (1..n).step_by(2).collect();
    let best: Vec<(f64, usize)> = a
        .iter()
        .map(|&i| {
            let mut top = (f64::NEG_INFINITY, 0);
            for (bj, &j) in b.iter().enumerate() {
                let s: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
                if s > top.0 {
                    top = (s, bj);
                }
            }
            top
        })
        .collect();
    let mut rank: Vec<usize> = (0..a.len()).collect();
    rank.sort_by(|&x, &y| best[y].0.total_cmp(&best[x].0).then(x.cmp(&y)));
    let mut groups: Vec<Vec<usize>> = b.iter().map(|&j| vec![j]).collect();
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(n - r);
    for (pos, &ai) in rank.iter().enumerate() {
        if pos < r {
            groups[best[ai].1].push(a[ai]);
        } else {
            out.push(vec![a[ai]]);
        }
    }
    out.extend(groups);
    for g in &mut out {
        g.sort_unstable();
    }
    out.sort_by_key(|g| g.iter().map(|&i| order_key[i]).min());
    Ok(out)
}

/// Components that can be bypassed during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Skip {
    pub self_attn: bool,
    pub cross_attn: bool,
    pub ff_tv: bool,
    pub ff_b: bool,
    pub ff_b_cross: bool,
    pub tome: bool,
}

impl Skip {
    pub const COMPONENTS: [&'static str; 6] =
        ["self-attn", "cross-attn", "ff_tv", "ff_b", "ff_b_cross", "tome"];

    pub fn none() -> Self {
        Self::default()
    }

    /// Parses component names (see [`Skip::COMPONENTS`]).
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut s = Self::default();
        for n in names {
            s.set(n.as_ref())?;
        }
        Ok(s)
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        let slot = match name.trim() {
            "self-attn" | "self_attn" => &mut self.self_attn,
            "cross-attn" | "cross_attn" => &mut self.cross_attn,
            "ff_tv" | "ff-tv" => &mut self.ff_tv,
            "ff_b" | "ff-b" => &mut self.ff_b,
            "ff_b_cross" | "ff-b-cross" => &mut self.ff_b_cross,
            "tome" => &mut self.tome,
            other => return Err(DamError::UnknownComponent(other.to_string())),
        };
        *slot = true;
        Ok(())
    }
}

/// Per-call forward settings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    pub skip: Skip,
    /// Keep attention matrices and merge provenance.
    pub record: bool,
    /// Seed for dropout masks; `None` runs in inference mode.
    pub dropout_seed: Option<u64>,
    /// Verify every layer's outputs are finite.
    pub check_finite: bool,
    /// Absolute merge target replacing the configured ratio rule.
    pub tome_target: Option<usize>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }
}

/// Standardised context ready for the backbone, sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Days relative to "now".
    pub times: Vec<f64>,
    /// Robust-standardised values.
    pub values: Vec<f64>,
    pub norm: RobustNorm,
    pub theta0: CoefficientVector,
}

impl ModelInput {
    /// Standardises raw `(time, value)` pairs and fits the initial
    /// coefficients on them.
    pub fn from_pairs(times: &[f64], values: &[f64], spec: &BasisSpec, lambda: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(DamError::LengthMismatch {
                left: times.len(),
                right: values.len(),
            });
        }
        if times.is_empty() {
            return Err(DamError::InsufficientPoints {
                needed: 1,
                available: 0,
            });
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let times: Vec<f64> = order.iter().map(|&i| times[i]).collect();
        let raw: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let (values, norm) = basis::robust_standardize(&raw);
        let theta0 = basis::init_theta(&times, &values, spec, lambda)?;
        Ok(Self {
            times,
            values,
            norm,
            theta0,
        })
    }

    pub fn from_draw(draw: &HsrDraw, spec: &BasisSpec, lambda: f64) -> Result<Self> {
        Self::from_pairs(&draw.times, &draw.values, spec, lambda)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The 50 interior percentiles of the standardised values.
    pub fn percentiles(&self) -> Vec<f64> {
        percentile_vector(&self.values)
    }
}

/// Interior percentiles `linspace(0, 1, 52)[1..51]`.
pub fn percentile_vector(values: &[f64]) -> Vec<f64> {
    let qs: Vec<f64> = (1..=N_QUANTILES)
        .map(|i| i as f64 / (N_QUANTILES + 1) as f64)
        .collect();
    stats::quantiles(values, &qs)
}

/// `asinh(k x) / k`, the damping applied before embedding coefficients.
pub fn damp_coefficient(x: f64) -> f64 {
    (COEFF_DAMPING * x).asinh() / COEFF_DAMPING
}

/// Dense row-major matrix of recorded values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Attention captured for one layer.
///
/// Key columns are ordered `[affine, tv_0 .. tv_{n-1}, zero slot]`. Self
/// attention queries are `[affine, tv...]`; cross attention queries are the
/// B-tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    /// Original context indices covered by each TV-token entering the layer.
    pub provenance: Vec<Vec<usize>>,
    /// Provenance after this layer's merge (keys of the cross attention).
    pub merged_provenance: Vec<Vec<usize>>,
    pub self_attn: Vec<Matrix>,
    pub cross_attn: Vec<Matrix>,
}

/// Which attention block a cumulative profile refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

impl LayerAttention {
    /// Total attention received by each TV-token, per head, scaled so the
    /// largest entry of every head is 1.
    pub fn cumulative(&self, kind: AttentionKind) -> Vec<Vec<f64>> {
        let mats = match kind {
            AttentionKind::SelfAttention => &self.self_attn,
            AttentionKind::CrossAttention => &self.cross_attn,
        };
        mats.iter()
            .map(|m| {
                let n_tv = m.cols - 2;
                let mut acc = vec![0.0; n_tv];
                for i in 0..m.rows {
                    for (a, &p) in acc.iter_mut().zip(&m.row(i)[1..=n_tv]) {
                        *a += p;
                    }
                }
                let max = acc.iter().cloned().fold(0.0, f64::max);
                if max > 0.0 {
                    acc.iter_mut().for_each(|a| *a /= max);
                }
                acc
            })
            .collect()
    }

    /// [`LayerAttention::cumulative`] spread back onto original context
    /// indices through the merge provenance.
    pub fn cumulative_by_original(&self, kind: AttentionKind, n_context: usize) -> Vec<Vec<f64>> {
        let prov = match kind {
            AttentionKind::SelfAttention => &self.provenance,
            AttentionKind::CrossAttention => &self.merged_provenance,
        };
        self.cumulative(kind)
            .into_iter()
            .map(|per_token| {
                let mut out = vec![0.0; n_context];
                for (v, group) in per_token.iter().zip(prov) {
                    for &i in group {
                        out[i] = *v;
                    }
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DamOutput {
    pub theta: CoefficientVector,
    pub affine: AffineParams,
    pub norm: RobustNorm,
    /// TV-token count entering each layer, then the final count.
    pub token_counts: Vec<usize>,
    pub attention: Option<AttentionRecord>,
}

impl DamOutput {
    pub fn forecast_function(&self, spec: &BasisSpec) -> ForecastFunction {
        let mut f = ForecastFunction::new(spec.clone(), self.theta.clone(), self.norm);
        f.affine = self.affine;
        f
    }

    /// Predictions in original units at arbitrary times (days from "now").
    pub fn forecast(&self, spec: &BasisSpec, query_times: &[f64]) -> Vec<f64> {
        self.forecast_function(spec).evaluate(query_times)
    }

    pub fn attention(&self) -> Result<&AttentionRecord> {
        self.attention.as_ref().ok_or(DamError::RecordingDisabled)
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, rows: usize, cols: usize, data: Vec<T>) -> usize {
        self.names.push(name);
        self.tensors.push(Tensor {
            shape: vec![rows, cols],
            data,
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FfIds {
    l1: LinearIds,
    l2: LinearIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LnIds {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerIds {
    mhsa: AttnIds,
    cross: AttnIds,
    ff_tv: FfIds,
    ff_b: FfIds,
    ff_b_cross: FfIds,
    ff_aff: FfIds,
    ln: [LnIds; 7],
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ModelIds {
    temporal: LinearIds,
    value: LinearIds,
    period: LinearIds,
    coeffs: LinearIds,
    affine: LinearIds,
    layers: Vec<LayerIds>,
    basis_collapsor: LinearIds,
    affine_collapser: LinearIds,
}

/// Parameter initialisation in the style of common deep-learning defaults.
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weight and bias.
    Default,
    /// Glorot-uniform weight (over the fused q/k/v shape), zero bias.
    AttnInProj,
    /// Default weight, zero bias.
    AttnOutProj,
    Zero,
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<T> {
        (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-bound..=bound)))
            .collect()
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> LinearIds {
        let default_bound = 1.0 / (fan_in as f64).sqrt();
        let (w, b) = match init {
            Init::Default => (
                self.uniform(fan_in * fan_out, default_bound),
                self.uniform(fan_out, default_bound),
            ),
            Init::AttnInProj => {
                let bound = (6.0 / (fan_in + 3 * fan_out) as f64).sqrt();
                (self.uniform(fan_in * fan_out, bound), vec![T::ZERO; fan_out])
            }
            Init::AttnOutProj => (
                self.uniform(fan_in * fan_out, default_bound),
                vec![T::ZERO; fan_out],
            ),
            Init::Zero => (vec![T::ZERO; fan_in * fan_out], vec![T::ZERO; fan_out]),
        };
        LinearIds {
            w: self.store.add(format!("{name}.weight"), fan_in, fan_out, w),
            b: self.store.add(format!("{name}.bias"), 1, fan_out, b),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q_proj"), d, d, Init::AttnInProj),
            k: self.linear(&format!("{name}.k_proj"), d, d, Init::AttnInProj),
            v: self.linear(&format!("{name}.v_proj"), d, d, Init::AttnInProj),
            o: self.linear(&format!("{name}.out_proj"), d, d, Init::AttnOutProj),
        }
    }

    fn ff(&mut self, name: &str, d_in: usize, d_hidden: usize) -> FfIds {
        FfIds {
            l1: self.linear(&format!("{name}.0"), d_in, d_hidden, Init::Default),
            l2: self.linear(&format!("{name}.2"), d_hidden, d_in, Init::Default),
        }
    }

    fn layernorm(&mut self, name: &str, d: usize) -> LnIds {
        LnIds {
            g: self.store.add(format!("{name}.weight"), 1, d, vec![T::ONE; d]),
            b: self.store.add(format!("{name}.bias"), 1, d, vec![T::ZERO; d]),
        }
    }
}

/// The backbone with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DamModel<T: Real> {
    pub config: ModelConfig,
    pub spec: BasisSpec,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Real> DamModel<T> {
    /// Randomly initialised model.
    ///
    /// The affine collapser starts at zero weight with bias `(0, 1)`, i.e. the
    /// identity adjustment, so an untrained model never divides by a
    /// near-zero scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = basis::build_frequency_set();
        let f = spec.len();
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let temporal = b.linear("temporal_embedding", f, d, Init::Default);
        let value = b.linear("value_embedding", 1, d, Init::Default);
        let period = b.linear("btoken_period_embedder", 2, d, Init::Default);
        let coeffs = b.linear("btoken_coeffs_embedder", 2, d, Init::Default);
        let affine = b.linear("affine_embedding", N_QUANTILES, d, Init::Default);
        let layers = (0..config.n_layers)
            .map(|li| {
                let p = format!("layers.{li}");
                LayerIds {
                    mhsa: b.attention(&format!("{p}.mhsa_tv"), d),
                    cross: b.attention(&format!("{p}.cross_attention"), d),
                    ff_tv: b.ff(&format!("{p}.feed_forward_tv"), d, config.d_ff),
                    ff_b: b.ff(&format!("{p}.feed_forward_b"), d, config.d_ff),
                    ff_b_cross: b.ff(&format!("{p}.feed_forward_b_cross"), f, 2 * f),
                    ff_aff: b.ff(&format!("{p}.feed_forward_aff"), d, config.d_ff),
                    ln: std::array::from_fn(|i| b.layernorm(&format!("{p}.layernorm{}", i + 1), d)),
                }
            })
            .collect();
        let basis_collapsor = b.linear("basis_collapsor", d, 2, Init::Default);
        let affine_collapser = b.linear("affine_collapser", d, 2, Init::Zero);
        let mut store = b.store;
        store.tensors[affine_collapser.b].data[1] = T::ONE;
        Ok(Self {
            config,
            spec,
            params: store,
            ids: ModelIds {
                temporal,
                value,
                period,
                coeffs,
                affine,
                layers,
                basis_collapsor,
                affine_collapser,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> DamModel<U> {
        DamModel {
            config: self.config.clone(),
            spec: self.spec.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                tensors: self
                    .params
                    .tensors
                    .iter()
                    .map(|t| Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
                    })
                    .collect(),
            },
            ids: self.ids.clone(),
        }
    }

    /// Inference forward pass.
    pub fn forward(&self, input: &ModelInput, opts: &ForwardOptions) -> Result<DamOutput> {
        let mut tape = Tape::new();
        let g = self.build(&mut tape, input, opts)?;
        Ok(g.output(&tape, input.norm))
    }

    /// Forward pass with attention recording on.
    pub fn export_attention(&self, input: &ModelInput) -> Result<AttentionRecord> {
        let opts = ForwardOptions {
            record: true,
            ..ForwardOptions::inference()
        };
        let out = self.forward(input, &opts)?;
        out.attention().cloned()
    }

    /// Records the forward pass on `tape`. Parameters enter as leaves keyed by
    /// their store index; `input` enters as constants.
    pub fn build(&self, tape: &mut Tape<T>, input: &ModelInput, opts: &ForwardOptions) -> Result<Graph> {
        let n = input.len();
        if n == 0 || input.values.len() != n || input.theta0.len() != self.spec.len() {
            return Err(DamError::ShapeMismatch {
                op: "embed",
                lhs: vec![n, input.values.len()],
                rhs: vec![input.theta0.len(), self.spec.len()],
            });
        }
        let mut cx = Ctx {
            tape,
            store: &self.params,
            cache: vec![None; self.params.len()],
            dropout: self.config.dropout,
            rng: opts.dropout_seed.map(ChaCha8Rng::seed_from_u64),
        };
        let (mut tv, mut bt, mut aff, theta0) = self.embed(&mut cx, input)?;
        let target = opts
            .tome_target
            .map_or_else(|| self.config.tome_target(n), |t| t.clamp(1, n));
        let schedule = if opts.skip.tome {
            vec![0; self.config.n_layers]
        } else {
            tome_schedule(n, target, self.config.n_layers)
        };
        let mut provenance: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let mut token_counts = vec![n];
        let mut records = Vec::new();
        for (li, ids) in self.ids.layers.iter().enumerate() {
            let step = self.layer(&mut cx, ids, tv, bt, aff, schedule[li], &provenance, opts)?;
            tv = step.tv;
            bt = step.b;
            aff = step.aff;
            if opts.record {
                records.push(LayerAttention {
                    provenance: provenance.clone(),
                    merged_provenance: step.provenance.clone(),
                    self_attn: step.self_attn,
                    cross_attn: step.cross_attn,
                });
            }
            provenance = step.provenance;
            token_counts.push(cx.tape.shape(tv).0);
            if opts.check_finite {
                for (v, what) in [(tv, "tv tokens"), (bt, "b tokens"), (aff, "affine token")] {
                    if !cx.tape.all_finite(v) {
                        return Err(DamError::NonFinite { layer: li, what });
                    }
                }
            }
        }
        let theta = cx.linear(bt, self.ids.basis_collapsor)?;
        let affine = cx.linear(aff, self.ids.affine_collapser)?;
        if opts.check_finite && !(cx.tape.all_finite(theta) && cx.tape.all_finite(affine)) {
            return Err(DamError::NonFinite {
                layer: self.config.n_layers,
                what: "collapse heads",
            });
        }
        Ok(Graph {
            theta0,
            theta,
            affine,
            token_counts,
            attention: opts.record.then_some(AttentionRecord { layers: records }),
            params: cx.cache,
        })
    }

    fn embed(&self, cx: &mut Ctx<'_, T>, input: &ModelInput) -> Result<(Var, Var, Var, Var)> {
        let f = self.spec.len();
        let n = input.len();
        let c = |x: f64| T::from_f64(x);
        let mut sines = Vec::with_capacity(n * f);
        for &t in &input.times {
            sines.extend(
                self.spec
                    .frequencies
                    .iter()
                    .map(|&nu| c((2.0 * std::f64::consts::PI * nu * t).sin())),
            );
        }
        let sines = cx.tape.constant(n, f, sines)?;
        let vals = cx.tape.constant(n, 1, input.values.iter().map(|&v| c(v)).collect())?;
        let te = cx.linear(sines, self.ids.temporal)?;
        let ve = cx.linear(vals, self.ids.value)?;
        let tv = cx.tape.add(ve, te)?;

        let periods: Vec<T> = self
            .spec
            .frequencies
            .iter()
            .flat_map(|&nu| {
                let a = 2.0 * std::f64::consts::PI / nu;
                [c(a.sin()), c(a.cos())]
            })
            .collect();
        let periods = cx.tape.constant(f, 2, periods)?;
        let coeffs: Vec<T> = input
            .theta0
            .to_cos_sin_rows()
            .into_iter()
            .map(|x| c(damp_coefficient(x)))
            .collect();
        let coeffs = cx.tape.constant(f, 2, coeffs)?;
        let pe = cx.linear(periods, self.ids.period)?;
        let ce = cx.linear(coeffs, self.ids.coeffs)?;
        let bt = cx.tape.add(ce, pe)?;

        let q = cx
            .tape
            .constant(1, N_QUANTILES, input.percentiles().into_iter().map(c).collect())?;
        let aff = cx.linear(q, self.ids.affine)?;
        Ok((tv, bt, aff, coeffs))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        cx: &mut Ctx<'_, T>,
        ids: &LayerIds,
        tv: Var,
        b: Var,
        aff: Var,
        r: usize,
        provenance: &[Vec<usize>],
        opts: &ForwardOptions,
    ) -> Result<LayerStep> {
        let skip = opts.skip;
        let heads = self.config.n_heads;
        let n = cx.tape.shape(tv).0;

        let (attn_tv, attn_aff, self_attn) = if skip.self_attn {
            (None, None, Vec::new())
        } else {
            let tokens = cx.tape.concat_rows(&[aff, tv])?;
            let (out, probs) = cx.attention(tokens, tokens, ids.mhsa, heads, opts.record)?;
            let a_aff = cx.tape.slice_rows(out, 0, 1)?;
            let a_tv = cx.tape.slice_rows(out, 1, n)?;
            (Some(a_tv), Some(a_aff), probs)
        };

        let mut tv = tv;
        let mut attn_tv = attn_tv;
        let mut merged_prov = provenance.to_vec();
        if r > 0 {
            let metric_var = attn_tv.unwrap_or(tv);
            let d = cx.tape.shape(metric_var).1;
            let metric: Vec<f64> = cx.tape.value(metric_var).iter().map(|x| x.to_f64()).collect();
            let keys: Vec<usize> = provenance.iter().map(|p| p[0]).collect();
            let groups = bipartite_soft_matching(&metric, n, d, r, &keys)?;
            merged_prov = groups
                .iter()
                .map(|g| {
                    let mut p: Vec<usize> = g.iter().flat_map(|&i| provenance[i].iter().copied()).collect();
                    p.sort_unstable();
                    p
                })
                .collect();
            let groups = Arc::new(groups);
            tv = cx.tape.mean_merge(tv, groups.clone())?;
            if let Some(a) = attn_tv {
                attn_tv = Some(cx.tape.mean_merge(a, groups)?);
            }
        }

        let mut aff = aff;
        if let (Some(a_tv), Some(a_aff)) = (attn_tv, attn_aff) {
            let s = cx.tape.add(tv, a_tv)?;
            tv = cx.layernorm(s, ids.ln[0])?;
            let s = cx.tape.add(aff, a_aff)?;
            aff = cx.layernorm(s, ids.ln[2])?;
        }
        if !skip.ff_tv {
            let f = cx.ff(tv, ids.ff_tv)?;
            let s = cx.tape.add(f, tv)?;
            tv = cx.layernorm(s, ids.ln[1])?;
        }
        let f = cx.ff(aff, ids.ff_aff)?;
        let s = cx.tape.add(f, aff)?;
        aff = cx.layernorm(s, ids.ln[3])?;

        let mut b = b;
        let mut cross_attn = Vec::new();
        if !skip.cross_attn {
            let kv = cx.tape.concat_rows(&[aff, tv])?;
            let (out, probs) = cx.attention(b, kv, ids.cross, heads, opts.record)?;
            cross_attn = probs;
            let s = cx.tape.add(b, out)?;
            b = cx.layernorm(s, ids.ln[4])?;
        }
        if !skip.ff_b {
            let f = cx.ff(b, ids.ff_b)?;
            let s = cx.tape.add(f, b)?;
            b = cx.layernorm(s, ids.ln[5])?;
        }
        if !skip.ff_b_cross {
            let bt = cx.tape.transpose(b);
            let f = cx.ff(bt, ids.ff_b_cross)?;
            let ft = cx.tape.transpose(f);
            let s = cx.tape.add(ft, b)?;
            b = cx.layernorm(s, ids.ln[6])?;
        }
        Ok(LayerStep {
            tv,
            b,
            aff,
            provenance: merged_prov,
            self_attn,
            cross_attn,
        })
    }

    /// Writes a checkpoint directory: `manifest.toml` plus `weights.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DamError::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.param_count() * T::BYTES);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset: bytes.len(),
            });
            for &x in &t.data {
                x.write_le(&mut bytes);
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            precision: T::NAME.to_string(),
            frequency_set: FREQUENCY_SET_VERSION.to_string(),
            weights: WEIGHTS_FILE.to_string(),
            config: self.config.clone(),
            tensors,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| DamError::Checkpoint(format!("cannot encode manifest: {e}")))?;
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, bytes).map_err(|e| DamError::io(&weights, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, text).map_err(|e| DamError::io(&mpath, e))?;
        Ok(())
    }

    /// Loads a checkpoint, converting precision if needed. Tensor names and
    /// shapes must match those implied by the stored configuration.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| DamError::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text)
            .map_err(|e| DamError::Checkpoint(format!("bad manifest {}: {e}", mpath.display())))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(DamError::Checkpoint(format!(
                "unsupported format `{}`",
                manifest.format
            )));
        }
        if manifest.frequency_set != FREQUENCY_SET_VERSION {
            return Err(DamError::Checkpoint(format!(
                "frequency set `{}` does not match `{FREQUENCY_SET_VERSION}`",
                manifest.frequency_set
            )));
        }
        let width = match manifest.precision.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(DamError::Checkpoint(format!("unknown precision `{other}`"))),
        };
        let wpath = dir.join(&manifest.weights);
        let bytes = fs::read(&wpath).map_err(|e| DamError::io(&wpath, e))?;
        let mut model = Self::new(manifest.config.clone(), 0)?;
        if manifest.tensors.len() != model.params.len() {
            return Err(DamError::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                manifest.tensors.len()
            )));
        }
        for (i, entry) in manifest.tensors.iter().enumerate() {
            let t = &mut model.params.tensors[i];
            if entry.name != model.params.names[i] || entry.shape != t.shape {
                return Err(DamError::Checkpoint(format!(
                    "tensor {i} is `{}` {:?}, expected `{}` {:?}",
                    entry.name, entry.shape, model.params.names[i], t.shape
                )));
            }
            let end = entry.offset + t.numel() * width;
            let raw = bytes.get(entry.offset..end).ok_or_else(|| {
                DamError::Checkpoint(format!("weights truncated in `{}`", entry.name))
            })?;
            for (dst, chunk) in t.data.iter_mut().zip(raw.chunks_exact(width)) {
                *dst = if width == T::BYTES {
                    T::read_le(chunk)
                } else if width == 4 {
                    T::from_f64(f32::read_le(chunk) as f64)
                } else {
                    T::from_f64(f64::read_le(chunk))
                };
            }
        }
        Ok(model)
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";
const CHECKPOINT_FORMAT: &str = "dam-checkpoint-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    precision: String,
    frequency_set: String,
    weights: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Weights are stored `[in, out]`; `offset` is in bytes into the payload.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

struct LayerStep {
    tv: Var,
    b: Var,
    aff: Var,
    provenance: Vec<Vec<usize>>,
    self_attn: Vec<Matrix>,
    cross_attn: Vec<Matrix>,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Graph {
    /// The damped initial coefficients, a constant input.
    pub theta0: Var,
    /// `[437, 2]`, cosine in column 0.
    pub theta: Var,
    /// `[1, 2]` as `(offset, scale)`.
    pub affine: Var,
    pub token_counts: Vec<usize>,
    pub attention: Option<AttentionRecord>,
    /// Tape leaf of each parameter that took part, by store index.
    pub params: Vec<Option<Var>>,
}

impl Graph {
    pub fn output<T: Real>(&self, tape: &Tape<T>, norm: RobustNorm) -> DamOutput {
        let th: Vec<f64> = tape.value(self.theta).iter().map(|x| x.to_f64()).collect();
        let af = tape.value(self.affine);
        DamOutput {
            theta: CoefficientVector::from_cos_sin_rows(&th),
            affine: AffineParams {
                offset: af[0].to_f64(),
                scale: af[1].to_f64(),
            },
            norm,
            token_counts: self.token_counts.clone(),
            attention: self.attention.clone(),
        }
    }

    /// Standardised-space predictions at `times` as a `[m, 1]` tape node.
    pub fn forecast<T: Real>(&self, tape: &mut Tape<T>, spec: &BasisSpec, times: &[f64]) -> Result<Var> {
        let f = spec.len();
        let mut design = Vec::with_capacity(times.len() * 2 * f);
        for &t in times {
            for &nu in &spec.frequencies {
                let (s, c) = (2.0 * std::f64::consts::PI * nu * t).sin_cos();
                design.push(T::from_f64(c));
                design.push(T::from_f64(s));
            }
        }
        let design = tape.constant(times.len(), 2 * f, design)?;
        let flat = tape.reshape(self.theta, 2 * f, 1)?;
        let raw = tape.matmul(design, flat)?;
        tape.affine_out(raw, self.affine)
    }
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    cache: Vec<Option<Var>>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, id: usize) -> Result<Var> {
        if let Some(v) = self.cache[id] {
            return Ok(v);
        }
        let t = &self.store.tensors[id];
        let (r, c) = t.dims2();
        let v = self.tape.param(id, r, c, t.data.clone())?;
        self.cache[id] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, x: Var, ids: LinearIds) -> Result<Var> {
        let w = self.p(ids.w)?;
        let b = self.p(ids.b)?;
        self.tape.linear(x, w, b)
    }

    fn layernorm(&mut self, x: Var, ids: LnIds) -> Result<Var> {
        let g = self.p(ids.g)?;
        let b = self.p(ids.b)?;
        self.tape.layernorm(x, g, b)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let (r, c) = self.tape.shape(x);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
            .collect();
        let m = self.tape.constant(r, c, mask)?;
        self.tape.mul(x, m)
    }

    fn ff(&mut self, x: Var, ids: FfIds) -> Result<Var> {
        let h = self.linear(x, ids.l1)?;
        let h = self.tape.gelu(h);
        let y = self.linear(h, ids.l2)?;
        self.dropout(y)
    }

    /// Multi-head attention with a zero key/value slot appended after
    /// projection.
    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        ids: AttnIds,
        heads: usize,
        record: bool,
    ) -> Result<(Var, Vec<Matrix>)> {
        let d = self.tape.shape(q_in).1;
        let dh = d / heads;
        let q = self.linear(q_in, ids.q)?;
        let q = self.tape.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.linear(kv_in, ids.k)?;
        let v = self.linear(kv_in, ids.v)?;
        let zero = self.tape.zeros(1, d);
        let k = self.tape.concat_rows(&[k, zero])?;
        let v = self.tape.concat_rows(&[v, zero])?;
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::new();
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt)?;
            let p = self.tape.softmax(scores);
            if record {
                let (rows, cols) = self.tape.shape(p);
                probs.push(Matrix {
                    rows,
                    cols,
                    data: self.tape.value(p).iter().map(|x| x.to_f64()).collect(),
                });
            }
            let p = self.dropout(p)?;
            outs.push(self.tape.matmul(p, vh)?);
        }
        let cat = self.tape.concat_cols(&outs)?;
        Ok((self.linear(cat, ids.o)?, probs))
    }
}
