//! Reverse-mode differentiation over a tape of dense-array operations.
//!
//! The op set is exactly what the encoder/decoder stack needs: affine maps,
//! matrix products, masked row-softmax, layer norm, GELU, reshapes and
//! column/row slicing, plus sum-of-squares losses. Every operation checks
//! its output for NaN/Inf and fails instead of propagating them.

use std::cell::RefCell;

use super::real::{c, Real};
use super::tensor::{matmul, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// How masked softmax treats a row whose entries are all forbidden.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DeadRows {
    /// A fully forbidden row is a caller error.
    Error,
    /// Fully forbidden rows produce an all-zero weight row (used for padded
    /// agents, whose outputs are ignored downstream).
    Zero,
}

type GradFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<T>>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every tape node that needed one.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or a zero tensor of the given shape when the loss
    /// does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Tape of operations for one forward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Value held by a node (cheap clone of shared storage).
    pub fn value(&self, var: Var) -> Tensor<T> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].needs_grad
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        grad_fn: GradFn<T>,
    ) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            grad_fn: needs_grad.then_some(grad_fn),
            needs_grad,
        });
        Ok(Var(id))
    }

    /// Tape input. `needs_grad` marks trainable parameters.
    pub fn leaf(&self, value: Tensor<T>, needs_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad,
        });
        Ok(Var(id))
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x + y).map_err(|_| {
            NumericsError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            }
        })?;
        self.push(
            "add",
            out,
            vec![a.0, b.0],
            Box::new(|g| vec![g.clone(), g.clone()]),
        )
    }

    /// Broadcast a length-`N` bias over the rows of an `M x N` tensor.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let vb = self.value(bias);
        let (rows, cols) = va.dims2("add_bias")?;
        if vb.shape() != [cols] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {:?} does not match columns of {:?}", vb.shape(), va.shape()),
            });
        }
        let mut out = va.clone();
        {
            let data = out.data_mut();
            let b = vb.data();
            for r in 0..rows {
                for (j, &bj) in b.iter().enumerate() {
                    data[r * cols + j] = data[r * cols + j] + bj;
                }
            }
        }
        self.push(
            "add_bias",
            out,
            vec![a.0, bias.0],
            Box::new(move |g| {
                let (rows, cols) = g.dims2("add_bias grad").expect("grad rank");
                let mut db = vec![T::zero(); cols];
                let gd = g.data();
                for r in 0..rows {
                    for (j, db_j) in db.iter_mut().enumerate() {
                        *db_j = *db_j + gd[r * cols + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![cols], db).expect("bias grad shape")]
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x - y)?;
        self.push(
            "sub",
            out,
            vec![a.0, b.0],
            Box::new(|g| vec![g.clone(), g.map(|x| -x)]),
        )
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let f: T = c(factor);
        self.push(
            "scale",
            va.map(|x| x * f),
            vec![a.0],
            Box::new(move |g| vec![g.map(|x| x * f)]),
        )
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = matmul(&va, ta, &vb, tb)?;
        let (ga, gb) = (va.clone(), vb.clone());
        self.push(
            "matmul",
            out,
            vec![a.0, b.0],
            Box::new(move |g| {
                // C = op(A)·op(B). The four cases reduce to three because the
                // model never multiplies two transposed operands.
                let (da, db) = match (ta, tb) {
                    (false, false) => (
                        matmul(g, false, &gb, true).expect("dA"),
                        matmul(&ga, true, g, false).expect("dB"),
                    ),
                    (false, true) => (
                        matmul(g, false, &gb, false).expect("dA"),
                        matmul(g, true, &ga, false).expect("dB"),
                    ),
                    (true, false) => (
                        matmul(&gb, false, g, true).expect("dA"),
                        matmul(&ga, false, g, false).expect("dB"),
                    ),
                    (true, true) => unreachable!("matmul(t,t) is not used"),
                };
                vec![da, db]
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let orig = va.shape().to_vec();
        let out = va.reshaped(shape)?;
        self.push(
            "reshape",
            out,
            vec![a.0],
            Box::new(move |g| vec![g.reshaped(orig.clone()).expect("reshape grad")]),
        )
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (rows, cols) = va.dims2("slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {start}..{} of {cols} columns", start + len),
            });
        }
        let src = va.data();
        let mut out = vec![T::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![rows, len], out)?,
            vec![a.0],
            Box::new(move |g| {
                let mut full = Tensor::zeros(vec![rows, cols]);
                {
                    let dst = full.data_mut();
                    let gd = g.data();
                    for r in 0..rows {
                        dst[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                }
                vec![full]
            }),
        )
    }

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (rows, cols) = va.dims2("slice_rows")?;
        if start + len > rows || len == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("slice {start}..{} of {rows} rows", start + len),
            });
        }
        let out: Vec<T> = va.data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            "slice_rows",
            Tensor::new(vec![len, cols], out)?,
            vec![a.0],
            Box::new(move |g| {
                let mut full = Tensor::zeros(vec![rows, cols]);
                full.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![full]
            }),
        )
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidShape("concat_cols of nothing".into()));
        }
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let (rows, _) = values[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, w) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {rows} vs {r}"),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (v, &w) in values.iter().zip(&widths) {
            let src = v.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let widths_bw = widths.clone();
        self.push(
            "concat_cols",
            Tensor::new(vec![rows, total], out)?,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(widths_bw.len());
                let mut offset = 0;
                for &w in &widths_bw {
                    let mut part = vec![T::zero(); rows * w];
                    for r in 0..rows {
                        part[r * w..(r + 1) * w]
                            .copy_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    grads.push(Tensor::new(vec![rows, w], part).expect("concat grad"));
                }
                grads
            }),
        )
    }

    /// Exact GELU: `x * Φ(x)` with the Gaussian CDF via the error function.
    pub fn gelu(&self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let half: T = c(0.5);
        let inv_sqrt2: T = c(std::f64::consts::FRAC_1_SQRT_2);
        let out = va.map(|x| x * half * (T::one() + (x * inv_sqrt2).erf()));
        let saved = va.clone();
        self.push(
            "gelu",
            out,
            vec![a.0],
            Box::new(move |g| {
                let inv_sqrt_2pi: T = c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let dx = saved
                    .zip_map(g, |x, gy| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
                        gy * (cdf + x * pdf)
                    })
                    .expect("gelu grad");
                vec![dx]
            }),
        )
    }

    /// Per-row normalization to mean 0 / variance 1 followed by `gain ⊙ x̂ + offset`.
    pub fn layer_norm(
        &self,
        a: Var,
        gain: Var,
        offset: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (rows, dim) = va.dims2("layer_norm")?;
        if dim < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("normalized dimension must be >= 2, got {dim}"),
            });
        }
        let vg = self.value(gain);
        let vo = self.value(offset);
        if vg.shape() != [dim] || vo.shape() != [dim] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / offset {:?} do not match dimension {dim}",
                    vg.shape(),
                    vo.shape()
                ),
            });
        }
        let src = va.data();
        let mut normed = vec![T::zero(); rows * dim];
        let mut inv_std = vec![T::zero(); rows];
        let dim_t: T = c(dim as f64);
        let eps_t: T = c(eps);
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mean = row.iter().fold(T::zero(), |s, &x| s + x) / dim_t;
            let var = row
                .iter()
                .fold(T::zero(), |s, &x| s + (x - mean) * (x - mean))
                / dim_t;
            let istd = T::one() / (var + eps_t).sqrt();
            inv_std[r] = istd;
            for j in 0..dim {
                normed[r * dim + j] = (row[j] - mean) * istd;
            }
        }
        let gd = vg.data();
        let od = vo.data();
        let mut out = vec![T::zero(); rows * dim];
        for r in 0..rows {
            for j in 0..dim {
                out[r * dim + j] = gd[j] * normed[r * dim + j] + od[j];
            }
        }
        let normed = Tensor::new(vec![rows, dim], normed)?;
        let gain_saved = vg.clone();
        self.push(
            "layer_norm",
            Tensor::new(vec![rows, dim], out)?,
            vec![a.0, gain.0, offset.0],
            Box::new(move |g| {
                let gdat = g.data();
                let nd = normed.data();
                let gn = gain_saved.data();
                let mut dx = vec![T::zero(); rows * dim];
                let mut dgain = vec![T::zero(); dim];
                let mut doffset = vec![T::zero(); dim];
                for r in 0..rows {
                    // dxhat = g ⊙ gain; dx follows the standard layer-norm
                    // backward in terms of xhat:
                    //   dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..dim {
                        let idx = r * dim + j;
                        let dxhat = gdat[idx] * gn[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * nd[idx];
                        dgain[j] = dgain[j] + gdat[idx] * nd[idx];
                        doffset[j] = doffset[j] + gdat[idx];
                    }
                    let mean_dxhat = sum_dxhat / dim_t;
                    let mean_dxhat_xhat = sum_dxhat_xhat / dim_t;
                    for j in 0..dim {
                        let idx = r * dim + j;
                        let dxhat = gdat[idx] * gn[j];
                        dx[idx] = inv_std[r] * (dxhat - mean_dxhat - nd[idx] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Tensor::new(vec![rows, dim], dx).expect("ln dx"),
                    Tensor::new(vec![dim], dgain).expect("ln dgain"),
                    Tensor::new(vec![dim], doffset).expect("ln doffset"),
                ]
            }),
        )
    }

    /// Row softmax with an additive mask. Finite mask entries are added to
    /// the logits; `-inf` entries are excluded from the softmax entirely and
    /// receive weight exactly 0.
    pub fn masked_softmax(
        &self,
        scores: Var,
        mask: Option<&Tensor<T>>,
        dead_rows: DeadRows,
    ) -> Result<Var, NumericsError> {
        let vs = self.value(scores);
        let (rows, cols) = vs.dims2("masked_softmax")?;
        if let Some(m) = mask {
            if m.shape() != vs.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "masked_softmax",
                    detail: format!("mask {:?} vs scores {:?}", m.shape(), vs.shape()),
                });
            }
        }
        let sd = vs.data();
        let mut probs = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let mut max = T::neg_infinity();
            let mut any = false;
            for j in 0..cols {
                let mv = mask.map_or(T::zero(), |m| m.data()[r * cols + j]);
                if mv.is_finite() {
                    any = true;
                    let logit = sd[r * cols + j] + mv;
                    if logit > max {
                        max = logit;
                    }
                }
            }
            if !any {
                match dead_rows {
                    DeadRows::Error => return Err(NumericsError::FullyMaskedRow { row: r }),
                    DeadRows::Zero => continue,
                }
            }
            let mut z = T::zero();
            for j in 0..cols {
                let mv = mask.map_or(T::zero(), |m| m.data()[r * cols + j]);
                if mv.is_finite() {
                    let e = (sd[r * cols + j] + mv - max).exp();
                    probs[r * cols + j] = e;
                    z = z + e;
                }
            }
            for j in 0..cols {
                probs[r * cols + j] = probs[r * cols + j] / z;
            }
        }
        let probs = Tensor::new(vec![rows, cols], probs)?;
        let saved = probs.clone();
        self.push(
            "masked_softmax",
            probs,
            vec![scores.0],
            Box::new(move |g| {
                // ds_j = p_j * (g_j - Σ_k p_k g_k); forbidden entries have
                // p = 0 and therefore gradient exactly 0.
                let pd = saved.data();
                let gd = g.data();
                let mut ds = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..cols {
                        let idx = r * cols + j;
                        dot = dot + pd[idx] * gd[idx];
                    }
                    for j in 0..cols {
                        let idx = r * cols + j;
                        ds[idx] = pd[idx] * (gd[idx] - dot);
                    }
                }
                vec![Tensor::new(vec![rows, cols], ds).expect("softmax grad")]
            }),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let total = va.data().iter().fold(T::zero(), |s, &x| s + x);
        let shape = va.shape().to_vec();
        self.push(
            "sum",
            Tensor::scalar(total),
            vec![a.0],
            Box::new(move |g| {
                let gv = g.data()[0];
                vec![Tensor::full(shape.clone(), gv)]
            }),
        )
    }

    /// `Σ (pred - target)²` over rows whose `row_valid` entry is true.
    /// `target` is a constant (no gradient flows into it).
    pub fn masked_sum_sq_diff(
        &self,
        pred: Var,
        target: &Tensor<T>,
        row_valid: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let vp = self.value(pred);
        // Rows are the leading extent; everything after it counts as one row's
        // elements. Rank-1 tensors are a single row.
        let (rows, cols) = match vp.shape() {
            [] => unreachable!("tensors are never rank 0"),
            [n] => (1usize, *n),
            s => (s[0], s[1..].iter().product()),
        };
        if target.shape() != vp.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_sum_sq_diff",
                detail: format!("target {:?} vs pred {:?}", target.shape(), vp.shape()),
            });
        }
        if let Some(v) = row_valid {
            if v.len() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "masked_sum_sq_diff",
                    detail: format!("{} validity flags for {rows} rows", v.len()),
                });
            }
        }
        let valid: Vec<bool> = match row_valid {
            Some(v) => v.to_vec(),
            None => vec![true; rows],
        };
        let pd = vp.data();
        let td = target.data();
        let mut diff = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            for j in 0..cols {
                let idx = r * cols + j;
                let d = pd[idx] - td[idx];
                diff[idx] = d;
                total = total + d * d;
            }
        }
        let diff = Tensor::new(vp.shape().to_vec(), diff)?;
        self.push(
            "masked_sum_sq_diff",
            Tensor::scalar(total),
            vec![pred.0],
            Box::new(move |g| {
                let gv = g.data()[0];
                let two: T = c(2.0);
                vec![diff.map(|d| two * gv * d)]
            }),
        )
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per node that
    /// the loss depends on (parameters included).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(grad_out) = grads[id].clone() else {
                continue;
            };
            let node = &nodes[id];
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let parent_grads = grad_fn(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].needs_grad {
                    continue;
                }
                if !pg.all_finite() {
                    return Err(NumericsError::NonFinite { op: "backward" });
                }
                match &mut grads[pid] {
                    Some(existing) => existing.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }

    /// Convenience for tests: true if gradient tracking reaches this var.
    pub fn tracks_grad(&self, var: Var) -> bool {
        self.needs_grad(var)
    }
}
