//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order; [`Tape::backward`] walks it in
//! reverse and visits each node once. Everything is a row-major matrix; a
//! scalar is `1 x 1`. Precision is generic over [`Real`] (f32 for training,
//! f64 for gradient checks).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use crate::basis::SCALE_FLOOR;
use crate::error::{DamError, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Floating point element type.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    /// Tag written to checkpoints.
    const NAME: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` over strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );
}

fn check_view(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm view out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $erf:path, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NAME: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn erf(self) -> Self {
                $erf(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
            ) {
                check_view(a.len(), m, k, rsa, csa);
                check_view(b.len(), k, n, rsb, csb);
                check_view(c.len(), m, n, rsc, 1);
                // SAFETY: all three views were bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, "f32", libm::erff, matrixmultiply::sgemm);
impl_real!(f64, "f64", libm::erf, matrixmultiply::dgemm);

/// An owned dense tensor (parameters, checkpoints).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DamError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Shape as `(rows, cols)`, treating a vector as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row groups for a mean merge: output row `j` averages input rows `groups[j]`.
pub type MergeGroups = Arc<Vec<Vec<usize>>>;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm(Var, Var, Var),
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MergeRows(Var, MergeGroups),
    AffineOut(Var, Var),
    WeightedHuber(Var, f64),
    Sum(Var),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    /// Op-specific cache (layer-norm statistics, loss targets and weights).
    aux: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> DamError {
    DamError::ShapeMismatch {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            aux: Vec::new(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_aux(&mut self, rows: usize, cols: usize, value: Vec<T>, aux: Vec<T>, op: Op, ng: bool) -> Var {
        let v = self.push(rows, cols, value, op, ng);
        self.nodes[v.0].aux = aux;
        v
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(mismatch("constant", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push(rows, cols, data, Op::Constant, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![T::ZERO; rows * cols], Op::Constant, false)
    }

    /// A differentiable leaf tied to parameter `id`.
    pub fn param(&mut self, id: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(mismatch("param", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push(rows, cols, data, Op::Param(id), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa.0, sa.1, sb.1);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, T::ONE, self.value(a), k, 1, self.value(b), n, 1, T::ZERO, &mut out, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `x W + b` with `W: [in, out]` and `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.1 != sw.0 {
            return Err(mismatch("linear", sx, sw));
        }
        if sb != (1, sw.1) {
            return Err(mismatch("linear bias", sb, (1, sw.1)));
        }
        let (m, k, n) = (sx.0, sx.1, sw.1);
        let bias = self.value(b);
        let mut out: Vec<T> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(m, k, n, T::ONE, self.value(x), k, 1, self.value(w), n, 1, T::ONE, &mut out, n);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(m, n, out, Op::Linear(x, w, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(sa.0, sa.1, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let out = self.value(a).iter().map(|&x| x * cc).collect();
        let (r, k) = self.shape(a);
        let ng = self.ng(&[a]);
        self.push(r, k, out, Op::Scale(a, c), ng)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, k) = self.shape(a);
        let ng = self.ng(&[a]);
        self.push(r, k, out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalisation with gain `g` and bias `b` (both `[1, cols]`).
    pub fn layernorm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        for v in [g, b] {
            if self.shape(v) != (1, c) {
                return Err(mismatch("layernorm", self.shape(v), (1, c)));
            }
        }
        let eps = T::from_f64(LAYERNORM_EPS);
        let inv_c = T::from_f64(1.0 / c as f64);
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let mut out = Vec::with_capacity(r * c);
        let mut aux = Vec::with_capacity(2 * r);
        for row in xv.chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::ONE / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(gv.iter().zip(bv))
                    .map(|(&v, (&gg, &bb))| (v - mean) * rstd * gg + bb),
            );
            aux.push(mean);
            aux.push(rstd);
        }
        let ng = self.ng(&[x, g, b]);
        Ok(self.push_aux(r, c, out, aux, Op::LayerNorm(x, g, b), ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks_exact(c) {
            let max = row
                .iter()
                .copied()
                .fold(row[0], |m, v| if v > m { v } else { m });
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - max).exp()));
            let total: T = out[start..].iter().copied().sum();
            let inv = T::ONE / total;
            out[start..].iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(&[a]);
        self.push(r, c, out, Op::Softmax(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(mismatch("reshape", (r, c), (rows, cols)));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(rows, cols, out, Op::Reshape(a), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != c {
                return Err(mismatch("concat_rows", s, (s.0, c)));
            }
            rows += s.0;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != r {
                return Err(mismatch("concat_cols", s, (r, s.1)));
            }
            cols += s.1;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(mismatch("slice_rows", (r, c), (start + len, c)));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(mismatch("slice_cols", (r, c), (r, start + len)));
        }
        let v = self.value(a);
        let out = (0..r)
            .flat_map(|i| v[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    /// Averages groups of rows (token merging).
    pub fn mean_merge(&mut self, a: Var, groups: MergeGroups) -> Result<Var> {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(groups.len() * c);
        for g in groups.iter() {
            if g.is_empty() || g.iter().any(|&i| i >= r) {
                return Err(mismatch("mean_merge", (r, c), (g.len(), c)));
            }
            let inv = T::from_f64(1.0 / g.len() as f64);
            let start = out.len();
            out.extend_from_slice(&v[g[0] * c..(g[0] + 1) * c]);
            for &i in &g[1..] {
                for (o, &x) in out[start..].iter_mut().zip(&v[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
            out[start..].iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(&[a]);
        let n = groups.len();
        Ok(self.push(n, c, out, Op::MergeRows(a, groups), ng))
    }

    /// `(raw - offset) / scale` with `affine = [offset, scale]` and the scale
    /// magnitude floored at [`SCALE_FLOOR`].
    pub fn affine_out(&mut self, raw: Var, affine: Var) -> Result<Var> {
        if self.shape(affine) != (1, 2) {
            return Err(mismatch("affine_out", self.shape(affine), (1, 2)));
        }
        let (off, s) = (self.value(affine)[0], safe_scale(self.value(affine)[1]));
        let out = self.value(raw).iter().map(|&x| (x - off) / s).collect();
        let (r, c) = self.shape(raw);
        let ng = self.ng(&[raw, affine]);
        Ok(self.push(r, c, out, Op::AffineOut(raw, affine), ng))
    }

    /// Mean over elements of `weight * huber(pred - target)`.
    pub fn weighted_huber(&mut self, pred: Var, target: &[T], weight: &[T], delta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.len() != weight.len() {
            return Err(DamError::LengthMismatch {
                left: p.len(),
                right: target.len().min(weight.len()),
            });
        }
        let total: f64 = p
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&a, &b), &w)| w.to_f64() * huber((a - b).to_f64(), delta))
            .sum();
        let loss = T::from_f64(total / p.len() as f64);
        let mut aux = target.to_vec();
        aux.extend_from_slice(weight);
        let ng = self.ng(&[pred]);
        Ok(self.push_aux(1, 1, vec![loss], aux, Op::WeightedHuber(pred, delta), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn all_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    /// Gradient of node `v` after [`Tape::backward`]; `None` when no gradient
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter id, gradient)` for every parameter leaf reached by backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => self.grads[i].as_deref().map(|g| (id, g)),
            _ => None,
        })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(DamError::Detached("non-scalar loss"));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(DamError::Detached("loss with no differentiable inputs"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shape = |v: Var| (self.nodes[v.0].rows, self.nodes[v.0].cols);
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let (m, k) = shape(*a);
                let n = shape(*b).1;
                if wants(*a) {
                    // dA += dC B'
                    acc(*a, &mut |da| {
                        T::gemm(m, n, k, T::ONE, g, n, 1, val(*b), 1, n, T::ONE, da, k)
                    });
                }
                if wants(*b) {
                    // dB += A' dC
                    acc(*b, &mut |db| {
                        T::gemm(k, m, n, T::ONE, val(*a), 1, k, g, n, 1, T::ONE, db, n)
                    });
                }
                if let Op::Linear(_, _, bias) = &node.op {
                    acc(*bias, &mut |db| {
                        for row in g.chunks_exact(n) {
                            db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = T::from_f64(*c);
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c));
            }
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for ((d, &x), &gx) in d.iter_mut().zip(va).zip(g) {
                        *d += gx * gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm(x, gain, _bias) => {
                let (r, c) = shape(*x);
                let (xv, gv) = (val(*x), val(*gain));
                let aux = &node.aux;
                let inv_c = T::from_f64(1.0 / c as f64);
                let xhat = |row: usize, j: usize| (xv[row * c + j] - aux[2 * row]) * aux[2 * row + 1];
                if wants(*x) {
                    acc(*x, &mut |dx| {
                        for row in 0..r {
                            let gr = &g[row * c..(row + 1) * c];
                            let mut m1 = T::ZERO;
                            let mut m2 = T::ZERO;
                            for j in 0..c {
                                let dxh = gr[j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat(row, j);
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            let rstd = aux[2 * row + 1];
                            for j in 0..c {
                                let dxh = gr[j] * gv[j];
                                dx[row * c + j] += rstd * (dxh - m1 - xhat(row, j) * m2);
                            }
                        }
                    });
                }
                acc(*gain, &mut |dg| {
                    for row in 0..r {
                        for j in 0..c {
                            dg[j] += g[row * c + j] * xhat(row, j);
                        }
                    }
                });
                if let Op::LayerNorm(_, _, bias) = &node.op {
                    acc(*bias, &mut |db| {
                        for row in g.chunks_exact(c) {
                            db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let c = node.cols;
                let y = &node.value;
                acc(*a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dd, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *dd += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = shape(*a);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let seg = &g[off..off + n];
                    acc(p, &mut |d| d.iter_mut().zip(seg).for_each(|(d, &x)| *d += x));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut off = 0;
                for &p in parts {
                    let (r, c) = shape(p);
                    acc(p, &mut |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                let s = *start;
                acc(*a, &mut |d| {
                    d[s * c..s * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &x)| *d += x)
                });
            }
            Op::SliceCols(a, start) => {
                let c = shape(*a).1;
                let len = node.cols;
                let s = *start;
                acc(*a, &mut |d| {
                    for (i, gr) in g.chunks_exact(len).enumerate() {
                        d[i * c + s..i * c + s + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::MergeRows(a, groups) => {
                let c = node.cols;
                acc(*a, &mut |d| {
                    for (j, grp) in groups.iter().enumerate() {
                        let inv = T::from_f64(1.0 / grp.len() as f64);
                        for &i in grp {
                            for k in 0..c {
                                d[i * c + k] += g[j * c + k] * inv;
                            }
                        }
                    }
                });
            }
            Op::AffineOut(raw, affine) => {
                let av = val(*affine);
                let (off, s_raw) = (av[0], av[1]);
                let s = safe_scale(s_raw);
                let rv = val(*raw);
                acc(*raw, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x / s));
                acc(*affine, &mut |d| {
                    let gs: T = g.iter().copied().sum();
                    d[0] -= gs / s;
                    if s_raw.abs() >= T::from_f64(SCALE_FLOOR) {
                        let t: T = g.iter().zip(rv).map(|(&gg, &r)| gg * (r - off)).sum();
                        d[1] -= t / (s * s);
                    }
                });
            }
            Op::WeightedHuber(pred, delta) => {
                let pv = val(*pred);
                let n = pv.len();
                let (target, weight) = node.aux.split_at(n);
                let scale = g[0].to_f64() / n as f64;
                acc(*pred, &mut |d| {
                    for i in 0..n {
                        let r = (pv[i] - target[i]).to_f64();
                        d[i] += T::from_f64(weight[i].to_f64() * huber_grad(r, *delta) * scale);
                    }
                });
            }
            Op::Sum(a) => {
                let gg = g[0];
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += gg));
            }
        }
    }
}

fn safe_scale<T: Real>(s: T) -> T {
    let floor = T::from_f64(SCALE_FLOOR);
    if s.abs() >= floor {
        s
    } else if s < T::ZERO {
        -floor
    } else {
        floor
    }
}

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (T::from_f64(-0.5) * x * x).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Huber penalty with threshold `delta`.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}
