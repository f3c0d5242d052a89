//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node whose parents always have
//! smaller indices, so reverse index order is a valid reverse topological
//! order. Each node is visited exactly once during [`Graph::backward`].

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound added to the softplus of the raw Gaussian widths.
pub const STD_FLOOR: f64 = 1e-3;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    Concat { parts: Vec<Var>, outer: usize, inner: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mask { x: Var, mask: Vec<T> },
    Reshape(Var),
    GaussianRange { means: Var, raw_stds: Var, stds: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Transpose(..) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::Concat { .. } => "concat",
            Op::MaxPool { .. } => "max_pool1d",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mask { .. } => "dropout",
            Op::Reshape(..) => "reshape",
            Op::GaussianRange { .. } => "gaussian_range",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into `(outer, n, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Effective Gaussian width for an unconstrained parameter.
pub fn positive_std(raw: f64) -> f64 {
    softplus(raw) + STD_FLOOR
}

/// Inverse of [`positive_std`].
pub fn raw_std_for(std: f64) -> f64 {
    let s = (std - STD_FLOOR).max(1e-12);
    if s > 20.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// Row-wise stable softmax of `z` (`rows × cols`) in place.
fn softmax_rows_in_place<T: Real>(z: &mut [T], cols: usize) {
    for row in z.chunks_mut(cols) {
        let max = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// L1-normalized Gaussian responses: `P[l, g] ∝ N(l; mean_g, std_g)`.
///
/// Normalization is done in log space, so positions far from every mean
/// still produce a valid distribution.
pub fn gaussian_range_matrix<T: Real>(means: &[T], stds: &[T], length: usize) -> Vec<T> {
    let g = means.len();
    let mut z = vec![T::ZERO; length * g];
    let half = T::from_f64(0.5);
    for l in 0..length {
        let pos = T::from_f64(l as f64);
        for k in 0..g {
            let d = (pos - means[k]) / stds[k];
            z[l * g + k] = -(half * d * d) - stds[k].ln();
        }
    }
    softmax_rows_in_place(&mut z, g);
    z
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            let parents = self.describe_parents(&op);
            return Err(Error::NonFinite(format!(
                "output of {} (node {}, inputs {parents})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn describe_parents(&self, op: &Op<T>) -> String {
        let mut ids = Vec::new();
        op_parents(op, &mut ids);
        ids.iter()
            .map(|v| format!("{}:{:?}", v.0, self.nodes[v.0].value.shape()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}: inner dimensions differ", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(self.value(a).data(), false, self.value(b).data(), false, m, k, n, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row")?;
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} against rows of {:?}", self.shape(bias), [m, n]),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(&[m, n], data)?, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::ZERO) {
            return Err(Error::Contract("sqrt of a negative value".into()));
        }
        let out = self.value(x).map(Real::sqrt);
        let rg = self.rg(x);
        self.push(out, Op::Sqrt(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = src.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(src[idx(0)], T::max);
                let mut sum = T::ZERO;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / sum;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, outer, n, inner }, rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} against feature width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::ZERO; src.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// 1-D cross-correlation with "same" zero padding.
    ///
    /// `x` is `c_in × L`, `w` is `c_out × c_in × k`, `b` is `c_out`. Padding is
    /// `floor((k-1)/2)` on the left and `ceil((k-1)/2)` on the right, also when
    /// `k > L`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c_in, len) = self.value(x).dims2("conv1d")?;
        let (c_out, wc_in, k) = match self.shape(w) {
            [o, i, k] => (*o, *i, *k),
            other => {
                return Err(Error::dim(
                    "conv1d",
                    format!("kernel must be c_out×c_in×k, got {other:?}"),
                ))
            }
        };
        if wc_in != c_in {
            return Err(Error::dim(
                "conv1d",
                format!("input has {c_in} channels, kernel {:?} expects {wc_in}", self.shape(w)),
            ));
        }
        if self.value(b).len() != c_out {
            return Err(Error::dim(
                "conv1d",
                format!("bias {:?} for {c_out} output channels", self.shape(b)),
            ));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![T::ZERO; c_out * len];
        let pl = (k - 1) / 2;
        for o in 0..c_out {
            let orow = &mut out[o * len..(o + 1) * len];
            orow.iter_mut().for_each(|v| *v = bs[o]);
            for c in 0..c_in {
                let xrow = &xs[c * len..(c + 1) * len];
                for j in 0..k {
                    let wv = ws[(o * c_in + c) * k + j];
                    let (lo, hi) = tap_range(len, pl, j);
                    if lo >= hi {
                        continue;
                    }
                    let shift = j as isize - pl as isize;
                    let src = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (ov, &xv) in orow[lo..hi].iter_mut().zip(src) {
                        *ov += wv * xv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(&[c_out, len], out)?, Op::Conv1d { x, w, b }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), rg)
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + width, [m, n]),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, width], out)?, Op::SliceCols { x, start }, rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            rg,
        )
    }

    /// Reduces the length axis of a `c × L` matrix to its maximum, giving `c`.
    pub fn max_pool1d(&mut self, x: Var) -> Result<Var> {
        let (c, len) = self.value(x).dims2("max_pool1d")?;
        let src = self.value(x).data();
        let mut argmax = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let row = &src[ch * len..(ch + 1) * len];
            let mut best = 0;
            for (t, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = t;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::MaxPool { x, argmax }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Inverted dropout. Identity when `rng` is `None` (inference) or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut RngState>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { T::ZERO } else { keep })
            .collect();
        let out = Tensor::new(
            self.shape(x),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect(),
        )?;
        let rg = self.rg(x);
        self.push(out, Op::Mask { x, mask }, rg)
    }

    /// Row-normalized Gaussian range matrix (`length × G`).
    ///
    /// `raw_stds` pass through `softplus(·) + 1e-3`, so widths stay positive for
    /// any parameter value.
    pub fn gaussian_range(&mut self, means: Var, raw_stds: Var, length: usize) -> Result<Var> {
        let g = self.value(means).len();
        if self.value(raw_stds).len() != g || length == 0 {
            return Err(Error::dim(
                "gaussian_range",
                format!(
                    "means {:?}, stds {:?}, length {length}",
                    self.shape(means),
                    self.shape(raw_stds)
                ),
            ));
        }
        let stds: Vec<T> = self
            .value(raw_stds)
            .data()
            .iter()
            .map(|&r| T::from_f64(positive_std(r.to_f64())))
            .collect();
        let p = gaussian_range_matrix(self.value(means).data(), &stds, length);
        let rg = self.rg(means) || self.rg(raw_stds);
        self.push(
            Tensor::new(&[length, g], p)?,
            Op::GaussianRange {
                means,
                raw_stds,
                stds,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(delta.len(), self.value(v).len());
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta.reshape(self.shape(v)).expect("gradient shape")),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        let t = Tensor::new(self.shape(v), delta).expect("gradient shape");
        self.acc(grads, v, t);
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    gemm(gd, false, self.value(*b).data(), true, m, n, k, &mut da, false);
                    self.acc_data(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    gemm(self.value(*a).data(), true, gd, false, k, m, n, &mut db, false);
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.rg(*a) {
                    let d = gd.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::ZERO; n];
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc_data(grads, *bias, db);
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.acc(grads, *x, g.map(|v| v * f));
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_data(grads, *x, gd.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&dy, &v)| if v > T::ZERO { dy } else { T::ZERO })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let two = T::from_f64(2.0);
                // Subgradient 0 at the origin, where the derivative is unbounded.
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&dy, &yv)| if yv > T::ZERO { dy / (two * yv) } else { T::ZERO })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let mut d = vec![T::ZERO; y.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let idx = |j: usize| (o * n + j) * inner + ii;
                        let dot: T = (0..*n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*n {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let dim = gv.len();
                let inv_d = T::from_f64(1.0 / dim as f64);
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::ZERO; dim];
                    let mut dbias = vec![T::ZERO; dim];
                    for (row, hrow) in gd.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            dg[j] += row[j] * hrow[j];
                            dbias[j] += row[j];
                        }
                    }
                    self.acc_data(grads, *gain, dg);
                    self.acc_data(grads, *bias, dbias);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::ZERO; gd.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let row = &gd[r * dim..(r + 1) * dim];
                        let h = &xhat[r * dim..(r + 1) * dim];
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for j in 0..dim {
                            let dh = row[j] * gv[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        for j in 0..dim {
                            let dh = row[j] * gv[j];
                            dx[r * dim + j] = *inv * (dh - inv_d * s1 - h[j] * inv_d * s2);
                        }
                    }
                    self.acc_data(grads, *x, dx);
                }
            }
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, gd, grads),
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut d = vec![T::ZERO; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = gd[j * m + i];
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let width = node.value.shape()[1];
                let mut d = vec![T::ZERO; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + width]
                        .copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = gd.len() / (outer * inner);
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len() / (outer * inner);
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(self.value(p).len());
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.acc_data(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::MaxPool { x, argmax } => {
                let len = self.shape(*x)[1];
                let mut d = vec![T::ZERO; self.value(*x).len()];
                for (ch, &t) in argmax.iter().enumerate() {
                    d[ch * len + t] = gd[ch];
                }
                self.acc_data(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc_data(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::from_f64(n as f64);
                self.acc_data(grads, *x, vec![v; n]);
            }
            Op::Mask { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&dy, &m)| dy * m).collect();
                self.acc_data(grads, *x, d);
            }
            Op::GaussianRange {
                means,
                raw_stds,
                stds,
            } => {
                let p = node.value.data();
                let g_count = stds.len();
                let mu = self.value(*means).data();
                let raw = self.value(*raw_stds).data();
                let mut dmu = vec![T::ZERO; g_count];
                let mut dsd = vec![T::ZERO; g_count];
                for (l, (prow, grow)) in p.chunks(g_count).zip(gd.chunks(g_count)).enumerate() {
                    let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    let pos = T::from_f64(l as f64);
                    for k in 0..g_count {
                        let dz = prow[k] * (grow[k] - dot);
                        let s = stds[k];
                        let diff = pos - mu[k];
                        dmu[k] += dz * diff / (s * s);
                        dsd[k] += dz * (diff * diff / (s * s * s) - T::ONE / s);
                    }
                }
                let draw = dsd
                    .iter()
                    .zip(raw)
                    .map(|(&d, &r)| d * T::from_f64(sigmoid(r.to_f64())))
                    .collect();
                self.acc_data(grads, *means, dmu);
                self.acc_data(grads, *raw_stds, draw);
            }
        }
    }

    fn conv1d_backward(&self, x: Var, w: Var, b: Var, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (c_in, len) = (self.shape(x)[0], self.shape(x)[1]);
        let (c_out, k) = (self.shape(w)[0], self.shape(w)[2]);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let pl = (k - 1) / 2;
        let want_x = self.rg(x);
        let want_w = self.rg(w);
        let mut dx = vec![T::ZERO; if want_x { c_in * len } else { 0 }];
        let mut dw = vec![T::ZERO; if want_w { c_out * c_in * k } else { 0 }];
        for o in 0..c_out {
            let grow = &gd[o * len..(o + 1) * len];
            for c in 0..c_in {
                let xrow = &xs[c * len..(c + 1) * len];
                for j in 0..k {
                    let (lo, hi) = tap_range(len, pl, j);
                    if lo >= hi {
                        continue;
                    }
                    let shift = j as isize - pl as isize;
                    let s_lo = (lo as isize + shift) as usize;
                    let s_hi = (hi as isize + shift) as usize;
                    let widx = (o * c_in + c) * k + j;
                    if want_w {
                        let mut acc = T::ZERO;
                        for (&gv, &xv) in grow[lo..hi].iter().zip(&xrow[s_lo..s_hi]) {
                            acc += gv * xv;
                        }
                        dw[widx] += acc;
                    }
                    if want_x {
                        let wv = ws[widx];
                        let dxrow = &mut dx[c * len + s_lo..c * len + s_hi];
                        for (d, &gv) in dxrow.iter_mut().zip(&grow[lo..hi]) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
        if want_x {
            self.acc_data(grads, x, dx);
        }
        if want_w {
            self.acc_data(grads, w, dw);
        }
        if self.rg(b) {
            let db = gd.chunks(len).map(|row| row.iter().copied().sum()).collect();
            self.acc_data(grads, b, db);
        }
    }
}

/// Output positions `[lo, hi)` for which tap `j` reads inside the input.
fn tap_range(len: usize, pad_left: usize, j: usize) -> (usize, usize) {
    let shift = j as isize - pad_left as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(len), hi)
}

fn op_parents<T>(op: &Op<T>, out: &mut Vec<Var>) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            out.extend([*a, *b])
        }
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Relu(x)
        | Op::Sqrt(x)
        | Op::Transpose(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x) => out.push(*x),
        Op::Softmax { x, .. }
        | Op::SliceCols { x, .. }
        | Op::MaxPool { x, .. }
        | Op::Mask { x, .. } => out.push(*x),
        Op::LayerNorm { x, gain, bias, .. } => out.extend([*x, *gain, *bias]),
        Op::Conv1d { x, w, b } => out.extend([*x, *w, *b]),
        Op::Concat { parts, .. } => out.extend(parts.iter().copied()),
        Op::GaussianRange {
            means, raw_stds, ..
        } => out.extend([*means, *raw_stds]),
    }
}
