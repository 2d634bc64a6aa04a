//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the inputs it was computed from. [`Tape::backward`] walks the
//! nodes in reverse and applies each op's analytic vector-Jacobian rule.
//!
//! A tape is single-owner: build it, run backward once or many times, drop it.
//! Named model parameters are bound lazily through [`Tape::param`], which is
//! how layers find their weights without holding references into the store.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Softmax { x: Var, axis: usize },
    MaskedFill { x: Var, allow: Vec<bool> },
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    BlendRows { x: Var, fill: Var, mask: Vec<bool> },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    RowNorm(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let th = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
    0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> Result<(usize, usize)> {
    let cols = *t.shape().last().ok_or_else(|| dim_err!("rank-0 tensor"))?;
    if cols == 0 {
        return Err(dim_err!("empty last axis"));
    }
    Ok((t.len() / cols, cols))
}

pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("conv stride must be positive"));
    }
    let padded = len + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(dim_err!("kernel {} larger than padded input {}", kernel, padded));
    }
    Ok((padded - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Returns the tape variable for a named parameter, creating a leaf from
    /// the store on first use. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.bind(name, v);
        Ok(v)
    }

    /// Binds `name` to an existing variable; later [`Tape::param`] lookups
    /// return it instead of reading the store.
    pub fn bind(&mut self, name: &str, v: Var) {
        if self.bindings.insert(name.to_string(), v).is_none() {
            self.bound_order.push((name.to_string(), v));
        }
    }

    /// Gradients of every bound parameter that received one, in binding order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.bound_order
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `x[n, d] + v` with `v` of shape `[d]` or `[1, d]` added to every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = last_dim(self.value(x))?;
        let vv = self.value(v);
        if vv.len() != cols {
            return Err(dim_err!("row vector of {} values for {} columns", vv.len(), cols));
        }
        let mut out = self.value(x).clone();
        let vd = vv.data().to_vec();
        for r in 0..rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vd) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddRow(x, v), rg))
    }

    /// Tiles a single row `[1, d]` (or `[d]`) into `[n, d]`.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.is_empty() || (vv.rank() == 2 && vv.shape()[0] != 1) || vv.rank() > 2 {
            return Err(dim_err!("repeat_rows expects a single row, got {:?}", vv.shape()));
        }
        let d = vv.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(vv.data());
        }
        let out = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(v);
        Ok(self.push(out, Op::RepeatRows(v), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(dim_err!("softmax axis {} for rank {}", axis, xv.rank()));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Replaces entries where `allow` is false with negative infinity so a
    /// following softmax assigns them zero weight.
    pub fn masked_fill(&mut self, x: Var, allow: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != allow.len() {
            return Err(dim_err!("mask of {} entries for {} values", allow.len(), xv.len()));
        }
        let mut out = xv.clone();
        for (v, &a) in out.data_mut().iter_mut().zip(allow) {
            if !a {
                *v = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedFill { x, allow: allow.to_vec() }, rg))
    }

    /// Root-mean-square normalisation over the last axis, without gain.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = last_dim(self.value(x))?;
        let mut out = self.value(x).clone();
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let ir = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= ir);
            inv.push(ir);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RmsNorm { x, inv_rms: inv }, rg))
    }

    /// Mean/variance normalisation over the last axis, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = last_dim(self.value(x))?;
        let mut out = self.value(x).clone();
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv.push(is);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LayerNorm { x, inv_std: inv }, rg))
    }

    /// Time-major 1-D convolution: `x` is `[L, C_in]`, `w` is
    /// `[C_out, C_in, K]`; the result is `[L_out, C_out]` with
    /// `L_out = floor((L + 2·pad − K)/stride) + 1` and zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (len, cin) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, k] = ws[..] else {
            return Err(dim_err!("conv kernel must be rank 3, got {:?}", ws));
        };
        if wcin != cin {
            return Err(dim_err!("conv kernel expects {} input channels, input has {}", wcin, cin));
        }
        let lo = conv1d_out_len(len, k, stride, pad)?;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; lo * cout];
        for o in 0..lo {
            for m in 0..k {
                let pos = (o * stride + m) as isize - pad as isize;
                if pos < 0 || pos as usize >= len {
                    continue;
                }
                let xrow = &xd[pos as usize * cin..(pos as usize + 1) * cin];
                for co in 0..cout {
                    let wbase = co * cin * k + m;
                    let mut acc = 0.0;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        acc += wd[wbase + ci * k] * xv;
                    }
                    out[o * cout + co] += acc;
                }
            }
        }
        let out = Tensor::new(vec![lo, cout], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv1d { x, w, stride, pad }, rg))
    }

    /// Nearest-neighbour temporal upsampling of `[L, C]` to `[L·factor, C]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (len, c) = self.value(x).dims2()?;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(len * factor * c);
        for r in 0..len {
            for _ in 0..factor {
                data.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::new(vec![len * factor, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + width > cols {
            return Err(dim_err!("column slice {}..{} of {}", start, start + width, cols));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(dim_err!("concat rows {} vs {}", r, rows));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks `[r_i, C]` parts into `[Σ r_i, C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(dim_err!("concat columns {} vs {}", c, cols));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(dim_err!("row index {} out of {}", bad, rows));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Row `i` of the result is `fill` where `mask[i]` holds, else row `i` of `x`.
    pub fn blend_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if mask.len() != rows || self.value(fill).len() != cols {
            return Err(dim_err!("blend_rows mask/fill do not match [{}, {}]", rows, cols));
        }
        let mut out = self.value(x).clone();
        let fd = self.value(fill).data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(&fd);
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        Ok(self.push(out, Op::BlendRows { x, fill, mask: mask.to_vec() }, rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if rows == 0 {
            return Err(dim_err!("mean over zero rows"));
        }
        let xv = self.value(x);
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(xv.row(r)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        let out = Tensor::new(vec![1, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(out, Op::MeanAll(x), rg)
    }

    /// Euclidean norm of each row, shape `[n, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = last_dim(self.value(x))?;
        let xv = self.value(x);
        let data = (0..rows)
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(vec![rows, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowNorm(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(dim_err!("backward needs a scalar, got {:?}", lv.shape()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Backpropagates an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(dim_err!("seed gradient shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Only report gradients for variables that asked for them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(&val(*b).transpose()?)?);
                }
                if self.rg(*b) {
                    acc(*b, val(*a).transpose()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv)?);
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(val(*a), |gv, av| gv * av)?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(x, v) => {
                acc(*x, g.clone());
                if self.rg(*v) {
                    let (rows, cols) = last_dim(g)?;
                    let mut s = vec![0.0; cols];
                    for r in 0..rows {
                        for (d, gv) in s.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    acc(*v, Tensor::new(val(*v).shape().to_vec(), s)?);
                }
            }
            Op::RepeatRows(v) => {
                let (rows, cols) = g.dims2()?;
                let mut s = vec![0.0; cols];
                for r in 0..rows {
                    for (d, gv) in s.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                acc(*v, Tensor::new(val(*v).shape().to_vec(), s)?);
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))?),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { s * gv })?)
            }
            Op::Silu(a) => acc(
                *a,
                g.zip_map(val(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                })?,
            ),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv * gelu_grad(x))?),
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv * sign(x))?),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)?),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::MaskedFill { x, allow } => {
                let mut gx = g.clone();
                for (v, &a) in gx.data_mut().iter_mut().zip(allow) {
                    if !a {
                        *v = 0.0;
                    }
                }
                acc(*x, gx);
            }
            Op::RmsNorm { x, inv_rms } => {
                let xv = val(*x);
                let (rows, cols) = last_dim(xv)?;
                let mut gx = g.clone();
                for (r, &ir) in inv_rms.iter().enumerate().take(rows) {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let k = ir * ir * ir * dot / cols as f64;
                    for ((o, &xi), &gi) in gx.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = ir * gi - k * xi;
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let (rows, cols) = last_dim(y)?;
                let mut gx = g.clone();
                for (r, &is) in inv_std.iter().enumerate().take(rows) {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = is * (gi - mg - yi * mgy);
                    }
                }
                acc(*x, gx);
            }
            Op::Conv1d { x, w, stride, pad } => {
                let xv = val(*x);
                let wv = val(*w);
                let (len, cin) = xv.dims2()?;
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let lo = g.shape()[0];
                let mut gx = vec![0.0; len * cin];
                let mut gw = vec![0.0; cout * cin * k];
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                for o in 0..lo {
                    for m in 0..k {
                        let pos = (o * stride + m) as isize - *pad as isize;
                        if pos < 0 || pos as usize >= len {
                            continue;
                        }
                        let p = pos as usize;
                        for co in 0..cout {
                            let gv = gd[o * cout + co];
                            if gv == 0.0 {
                                continue;
                            }
                            let wbase = co * cin * k + m;
                            for ci in 0..cin {
                                gx[p * cin + ci] += gv * wd[wbase + ci * k];
                                gw[wbase + ci * k] += gv * xd[p * cin + ci];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(vec![len, cin], gx)?);
                acc(*w, Tensor::new(wv.shape().to_vec(), gw)?);
            }
            Op::Upsample { x, factor } => {
                let (len, c) = val(*x).dims2()?;
                let mut gx = vec![0.0; len * c];
                for r in 0..len {
                    for f in 0..*factor {
                        for (d, gv) in gx[r * c..(r + 1) * c].iter_mut().zip(g.row(r * factor + f)) {
                            *d += gv;
                        }
                    }
                }
                acc(*x, Tensor::new(vec![len, c], gx)?);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = val(*x).dims2()?;
                let width = g.shape()[1];
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    gx.row_mut(r)[*start..start + width].copy_from_slice(g.row(r));
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = val(p).dims2()?;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(p, Tensor::new(vec![rows, cols], gp)?);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.rg(p) {
                        let gp = g.data()[offset..offset + n].to_vec();
                        acc(p, Tensor::new(val(p).shape().to_vec(), gp)?);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, gv) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                acc(*x, gx);
            }
            Op::BlendRows { x, fill, mask } => {
                let cols = g.shape()[1];
                let mut gx = g.clone();
                let mut gf = vec![0.0; cols];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (d, gv) in gf.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                        gx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                acc(*x, gx);
                acc(*fill, Tensor::new(val(*fill).shape().to_vec(), gf)?);
            }
            Op::MeanRows(x) => {
                let (rows, _) = val(*x).dims2()?;
                let row: Vec<f64> = g.data().iter().map(|v| v / rows as f64).collect();
                let mut data = Vec::with_capacity(rows * row.len());
                for _ in 0..rows {
                    data.extend_from_slice(&row);
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), data)?);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::MeanAll(x) => {
                let n = val(*x).len().max(1) as f64;
                acc(*x, Tensor::full(val(*x).shape(), g.data()[0] / n));
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let mut gx = xv.clone();
                for r in 0..y.len() {
                    let norm = y.data()[r];
                    let gr = g.data()[r];
                    let k = if norm > 0.0 { gr / norm } else { 0.0 };
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape())?),
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
