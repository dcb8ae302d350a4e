//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and enough saved
//! state to run its backward rule. Nodes are appended in evaluation order,
//! so the tape is topologically sorted by construction and `backward`
//! is a single reverse sweep.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Additive constant applied to masked logits before exponentiation.
pub const MASK_NEG: f64 = -1e9;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
    },
    /// `[g,n,m] x [g,m,k]`, or `[g,n,k] x [g,m,k]^T` when `trans_b`.
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        scale: f64,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    AddAtRows {
        x: Var,
        v: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. A tape is confined to one thread; independent tapes
/// may run concurrently against shared read-only parameters.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// `c (+)= a . b` for row-major `a: m x k`, `b: k x n` given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m * k <= a.len() && k * n <= b.len() && m * n <= c.len());
    // SAFETY: the strided views stay inside `a`, `b` and `c` (checked above
    // for the contiguous layouts this module uses).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Tanh-form GELU on a plain value.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1_scalar(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

/// Gradient buffer of `v`, or `None` when `v` is not differentiated.
fn grad_buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            let t = if trans_b { "^T" } else { "" };
            return shape_err(format!("batched matmul: {sa:?} x {sb:?}{t}"));
        }
        let (g, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let bsz = sb[1] * sb[2];
        for gi in 0..g {
            let bs = &bd[gi * bsz..(gi + 1) * bsz];
            let bstr = if trans_b { (1, k) } else { (m, 1) };
            gemm(
                n,
                k,
                m,
                &ad[gi * n * k..(gi + 1) * n * k],
                (k, 1),
                bs,
                bstr,
                &mut out[gi * n * m..(gi + 1) * n * m],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![g, n, m], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
            "bmm",
        )
    }

    /// `[g,n,m] x [g,m,k] -> [g,n,k]`.
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false)
    }

    /// `[g,n,k] x [g,m,k]^T -> [g,n,m]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg, name)
    }

    fn map(&mut self, x: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), "gelu", gelu_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid_scalar)
    }

    /// Adds a `[d]` bias to every row of `x: [..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.numel() != d {
            return shape_err(format!("add_bias: {:?} + {:?}", vx.shape(), vb.shape()));
        }
        let mut t = vx.clone();
        for row in t.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(t, Op::AddBias { x, bias }, rg, "add_bias")
    }

    /// Scales row `i` of `x: [n, d]` by `w[i]` where `w` has `n` elements.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let d = vx.last_dim();
        if vw.numel() != vx.rows() {
            return shape_err(format!("mul_rows: {:?} by {:?}", vx.shape(), vw.shape()));
        }
        let mut t = vx.clone();
        for (row, s) in t.data_mut().chunks_mut(d).zip(vw.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(&[x, w]);
        self.push(t, Op::MulRows { x, w }, rg, "mul_rows")
    }

    /// Layer normalization over the last axis with the biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return invalid("layer_norm: eps must be positive");
        }
        let vx = self.value(x);
        let d = vx.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return shape_err(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                vx.shape(),
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Row softmax of `x / scale` over the last axis with masked columns.
    ///
    /// `x` is `[n, m]` or `[g, n, m]`; `col_valid` holds `g * m` flags, one
    /// per column of each group. Masked columns get weight exactly zero.
    pub fn masked_softmax(&mut self, x: Var, col_valid: &[bool], scale: f64) -> Result<Var> {
        if scale <= 0.0 {
            return invalid("masked_softmax: scale must be positive");
        }
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (g, n, m) = match shape.as_slice() {
            [n, m] => (1, *n, *m),
            [g, n, m] => (*g, *n, *m),
            s => return shape_err(format!("masked_softmax: expected 2 or 3 axes, got {s:?}")),
        };
        if col_valid.len() != g * m {
            return shape_err(format!(
                "masked_softmax: mask has {} flags for input {shape:?}",
                col_valid.len()
            ));
        }
        let mut out = vec![0.0; vx.numel()];
        for gi in 0..g {
            let valid = &col_valid[gi * m..(gi + 1) * m];
            if !valid.iter().any(|&v| v) {
                return invalid(format!("masked_softmax: every column masked in group {gi}"));
            }
            for r in 0..n {
                let off = (gi * n + r) * m;
                let row = &vx.data()[off..off + m];
                let o = &mut out[off..off + m];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    o[j] = row[j] / scale + if valid[j] { 0.0 } else { MASK_NEG };
                    mx = mx.max(o[j]);
                }
                let mut sum = 0.0;
                for v in o.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                o.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MaskedSoftmax { x, scale }, rg, "masked_softmax")
    }

    /// `[batch*len, heads*dk] -> [batch*heads, len, dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let dm = vx.last_dim();
        if vx.rows() != batch * len || !dm.is_multiple_of(heads) {
            return shape_err(format!(
                "split_heads: {:?} into batch={batch} len={len} heads={heads}",
                vx.shape()
            ));
        }
        let dk = dm / heads;
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let s = (b * len + l) * dm + h * dk;
                    let d = ((b * heads + h) * len + l) * dk;
                    out[d..d + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, len, dk], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SplitHeads { x, batch, len, heads }, rg, "split_heads")
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != len {
            return shape_err(format!("merge_heads: {s:?} from batch={batch} len={len} heads={heads}"));
        }
        let dk = s[2];
        let dm = dk * heads;
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let d = (b * len + l) * dm + h * dk;
                    let sidx = ((b * heads + h) * len + l) * dk;
                    out[d..d + dk].copy_from_slice(&src[sidx..sidx + dk]);
                }
            }
        }
        let t = Tensor::new(vec![batch * len, dm], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MergeHeads { x, batch, len, heads }, rg, "merge_heads")
    }

    /// Selects rows of `x: [n, d]` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if rows.is_empty() {
            return shape_err("gather_rows: empty row list");
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= vx.rows()) {
            return shape_err(format!("gather_rows: row {r} out of range for {:?}", vx.shape()));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(vx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, rg, "gather_rows")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return shape_err(format!("concat_cols: {:?} | {:?}", va.shape(), vb.shape()));
        }
        let (da, db) = (va.last_dim(), vb.last_dim());
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..va.rows() {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let t = Tensor::new(vec![va.rows(), da + db], out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::ConcatCols(a, b), rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if vx.shape().len() != 2 || len == 0 || start + len > d {
            return shape_err(format!("slice_cols: [{start}..{}] of {:?}", start + len, vx.shape()));
        }
        let mut out = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            out.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![vx.rows(), len], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Adds the vector `v: [d]` to the listed rows of `x: [n, d]`.
    pub fn add_at_rows(&mut self, x: Var, v: Var, rows: &[usize]) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        let d = vx.last_dim();
        if vv.numel() != d {
            return shape_err(format!("add_at_rows: {:?} into {:?}", vv.shape(), vx.shape()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= vx.rows()) {
            return shape_err(format!("add_at_rows: row {r} out of range for {:?}", vx.shape()));
        }
        let mut t = vx.clone();
        for &r in rows {
            for (o, a) in t.row_mut(r).iter_mut().zip(vv.data()) {
                *o += a;
            }
        }
        let rg = self.rg(&[x, v]);
        self.push(
            t,
            Op::AddAtRows {
                x,
                v,
                rows: rows.to_vec(),
            },
            rg,
            "add_at_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg, "mean")
    }

    /// Mean Smooth-L1 between `pred` and a constant `target` of equal shape.
    /// The target is detached: it never receives gradient.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return shape_err(format!(
                "smooth_l1: prediction {:?} vs target {:?}",
                vp.shape(),
                target.shape()
            ));
        }
        let total: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| smooth_l1_scalar(p - t))
            .sum();
        let loss = total / vp.numel() as f64;
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
            },
            rg,
            "smooth_l1",
        )
    }

    /// Mean softmax cross-entropy of `logits: [n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return shape_err(format!("cross_entropy: logits {s:?} with {} targets", targets.len()));
        }
        let c = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return invalid(format!("cross_entropy: target {t} outside {c} classes"));
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = vl.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[t] - mx - z.ln();
        }
        loss /= targets.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return invalid(format!("dropout rate {rate} outside [0, 1)"));
        }
        let vx = self.value(x);
        let keep: Vec<f64> = (0..vx.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    1.0 / (1.0 - rate)
                }
            })
            .collect();
        let data = vx.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, keep }, rg, "dropout")
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.value(v).shape().to_vec(), g.clone()).ok()
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from the scalar `loss`, accumulating gradients into
    /// every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Autodiff("loss is detached from every parameter".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = node.value.data();

        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_buf(nodes, grads, $v) {
                    $body;
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                with_grad!(*a, |ga| gemm(m, n, k, g, (n, 1), val(*b), (1, n), ga, true));
                with_grad!(*b, |gb| gemm(k, m, n, val(*a), (1, k), g, (n, 1), gb, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (gn, n, k) = (sa[0], sa[1], sa[2]);
                let bsz = sb[1] * sb[2];
                let m = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (val(*a), val(*b));
                for gi in 0..gn {
                    let go = &g[gi * n * m..(gi + 1) * n * m];
                    let asl = &ad[gi * n * k..(gi + 1) * n * k];
                    let bsl = &bd[gi * bsz..(gi + 1) * bsz];
                    // out = a . B where B = b or b^T, B: k x m.
                    let bstr = if *trans_b { (1, k) } else { (m, 1) };
                    with_grad!(*a, |ga| gemm(
                        n,
                        m,
                        k,
                        go,
                        (m, 1),
                        bsl,
                        (bstr.1, bstr.0),
                        &mut ga[gi * n * k..(gi + 1) * n * k],
                        true
                    ));
                    with_grad!(*b, |gb| {
                        let dst = &mut gb[gi * bsz..(gi + 1) * bsz];
                        if *trans_b {
                            // d(b: m x k) = go^T . a
                            gemm(m, n, k, go, (1, m), asl, (k, 1), dst, true)
                        } else {
                            // d(b: k x m) = a^T . go
                            gemm(k, n, m, asl, (1, k), go, (m, 1), dst, true)
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o += d));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |ga| for j in 0..g.len() {
                    ga[j] += g[j] * vb[j];
                });
                with_grad!(*b, |gb| for j in 0..g.len() {
                    gb[j] += g[j] * va[j];
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += c * d));
            }
            Op::AddBias { x, bias } => {
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                let d = shp(*bias).iter().product::<usize>();
                with_grad!(*bias, |gb| for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                });
            }
            Op::MulRows { x, w } => {
                let (vx, vw) = (val(*x), val(*w));
                let d = vx.len() / vw.len();
                with_grad!(*x, |gx| for (r, s) in vw.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[r * d + j] * s;
                    }
                });
                with_grad!(*w, |gw| for (r, gr) in gw.iter_mut().enumerate().take(vw.len()) {
                    let row = r * d..(r + 1) * d;
                    *gr += g[row.clone()].iter().zip(&vx[row]).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                with_grad!(*x, |gx| for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(vx[j]);
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, |gx| for j in 0..g.len() {
                    gx[j] += g[j] * out[j] * (1.0 - out[j]);
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma);
                let d = gm.len();
                with_grad!(*gamma, |gg| for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += row_g[j] * row_h[j];
                    }
                });
                with_grad!(*beta, |gb| for row_g in g.chunks(d) {
                    gb.iter_mut().zip(row_g).for_each(|(o, v)| *o += v);
                });
                with_grad!(*x, |gx| for (r, s) in rstd.iter().enumerate() {
                    let rg = &g[r * d..(r + 1) * d];
                    let rh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = rg[j] * gm[j];
                        m1 += dh;
                        m2 += dh * rh[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] += s * (rg[j] * gm[j] - m1 - rh[j] * m2);
                    }
                });
            }
            Op::MaskedSoftmax { x, scale } => {
                let m = node.value.last_dim();
                with_grad!(
                    *x,
                    |gx| for (r, (yo, go)) in out.chunks(m).zip(g.chunks(m)).enumerate() {
                        let dot: f64 = yo.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            gx[r * m + j] += yo[j] * (go[j] - dot) / scale;
                        }
                    }
                );
            }
            Op::SplitHeads { x, batch, len, heads } => {
                let dm = shp(*x)[shp(*x).len() - 1];
                let dk = dm / heads;
                with_grad!(*x, |gx| for b in 0..*batch {
                    for l in 0..*len {
                        for h in 0..*heads {
                            let s = (b * len + l) * dm + h * dk;
                            let d = ((b * heads + h) * len + l) * dk;
                            for j in 0..dk {
                                gx[s + j] += g[d + j];
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, len, heads } => {
                let dk = shp(*x)[2];
                let dm = dk * heads;
                with_grad!(*x, |gx| for b in 0..*batch {
                    for l in 0..*len {
                        for h in 0..*heads {
                            let d = (b * len + l) * dm + h * dk;
                            let s = ((b * heads + h) * len + l) * dk;
                            for j in 0..dk {
                                gx[s + j] += g[d + j];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = node.value.last_dim();
                with_grad!(*x, |gx| for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[i * d + j];
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (da, db) = (shp(*a)[1], shp(*b)[1]);
                let d = da + db;
                with_grad!(*a, |ga| for (r, row) in g.chunks(d).enumerate() {
                    for j in 0..da {
                        ga[r * da + j] += row[j];
                    }
                });
                with_grad!(*b, |gb| for (r, row) in g.chunks(d).enumerate() {
                    for j in 0..db {
                        gb[r * db + j] += row[da + j];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let dx = shp(*x)[1];
                let len = node.value.last_dim();
                with_grad!(*x, |gx| for (r, row) in g.chunks(len).enumerate() {
                    for j in 0..len {
                        gx[r * dx + start + j] += row[j];
                    }
                });
            }
            Op::AddAtRows { x, v, rows } => {
                let d = node.value.last_dim();
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d));
                with_grad!(*v, |gv| for &r in rows {
                    for j in 0..d {
                        gv[j] += g[r * d + j];
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(o, d)| *o += d));
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                with_grad!(*x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SmoothL1 { pred, target } => {
                let vp = val(*pred);
                let n = vp.len() as f64;
                with_grad!(*pred, |gp| for j in 0..vp.len() {
                    gp[j] += g[0] * smooth_l1_grad(vp[j] - target[j]) / n;
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = shp(*logits)[1];
                let n = targets.len() as f64;
                with_grad!(*logits, |gl| for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * c + j] += g[0] * (probs[i * c + j] - onehot) / n;
                    }
                });
            }
            Op::Dropout { x, keep } => {
                with_grad!(*x, |gx| for j in 0..g.len() {
                    gx[j] += g[j] * keep[j];
                });
            }
        }
        Ok(())
    }
}
