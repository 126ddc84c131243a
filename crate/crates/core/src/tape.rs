//! Reverse-mode autodiff over a per-step tape.
//!
//! A `GradTape` records kernel applications eagerly (values are computed at
//! record time) and replays them backward once to accumulate gradients. The
//! tape lives for a single training step on a single thread; constants such
//! as pseudo-label targets or memory-bank slots are entered as non-gradient
//! leaves, which is how stop-gradient is expressed here.

use crate::error::{Error, Result};
use crate::tensor::{
    self, matmul_nt_raw, matmul_raw, matmul_tn_raw, relu, Tensor, LOG_CLAMP,
};

/// Handle to a node on a specific tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `a · b`
    MatMul { a: usize, b: usize },
    /// `a · bᵀ`
    MatMulNT { a: usize, b: usize },
    /// matrix plus a broadcast `[1, c]` row
    AddRow { m: usize, row: usize },
    /// `a + c·b`
    AddScaled { a: usize, b: usize, c: f64 },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    /// row-wise temperature softmax
    RowSoftmaxT { a: usize, t: f64 },
    /// row-wise L2 normalization
    RowL2Norm { a: usize },
    /// square matrix with its diagonal replaced by a vector
    SetDiag { m: usize, d: usize },
    /// per-row dot products of two equal-shape matrices
    RowDot { a: usize, b: usize },
    ConcatCols { parts: Vec<usize> },
    /// mean cross-entropy against a constant target, optionally row-weighted
    CeMean { target: Tensor, pred: usize, row_weights: Option<Vec<f64>>, divisor: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Like `get` but for parameters that must have a gradient.
    pub fn expect(&self, v: Var) -> &Tensor {
        self.grads[v.0].as_ref().expect("no gradient recorded for var")
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Enters a tensor that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Enters a tensor treated as a constant (stop-gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "tape matmul",
                format!("[m,{0}]x[{0},n]", va.cols()),
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_raw(va, vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out, rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "tape matmul_nt",
                format!("[m,{0}]x[n,{0}]", va.cols()),
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_nt_raw(va, vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNT { a: a.0, b: b.0 }, out, rg))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let out = tensor::add_row(self.value(m), self.value(row))?;
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(Op::AddRow { m: m.0, row: row.0 }, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, 1.0)
    }

    /// `a + c·b` elementwise.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "tape add",
                format!("{:?}", va.shape()),
                format!("{:?}", vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + c * y).collect();
        let out = Tensor::from_raw(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddScaled { a: a.0, b: b.0, c }, out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| c * x).collect();
        let out = Tensor::from_raw(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(Op::Scale { a: a.0, c }, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = relu(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Relu { a: a.0 }, out, rg)
    }

    pub fn row_softmax_t(&mut self, a: Var, t: f64) -> Result<Var> {
        let out = tensor::softmax_t(self.value(a), t)?;
        let rg = self.rg(a);
        Ok(self.push(Op::RowSoftmaxT { a: a.0, t }, out, rg))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let out = tensor::row_l2_normalize(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::RowL2Norm { a: a.0 }, out, rg))
    }

    /// Replaces the diagonal of a square matrix `m` with the vector `d`.
    pub fn set_diag(&mut self, m: Var, d: Var) -> Result<Var> {
        let (vm, vd) = (self.value(m), self.value(d));
        let n = vm.rows();
        if vm.cols() != n || vd.len() != n || vd.ndim() != 1 {
            return Err(Error::shape(
                "tape set_diag",
                format!("[{n},{n}] with diag [{n}]"),
                format!("{:?} with {:?}", vm.shape(), vd.shape()),
            ));
        }
        let mut data = vm.data().to_vec();
        for i in 0..n {
            data[i * n + i] = vd.data()[i];
        }
        let out = Tensor::from_raw(vec![n, n], data);
        let rg = self.rg(m) || self.rg(d);
        Ok(self.push(Op::SetDiag { m: m.0, d: d.0 }, out, rg))
    }

    /// Per-row dot products of two `[r, c]` matrices, producing `[r]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.ndim() != 2 {
            return Err(Error::shape(
                "tape row_dot",
                format!("{:?} twice", va.shape()),
                format!("{:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let r = va.rows();
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            data.push(tensor::dot(va.row(i), vb.row(i)));
        }
        let out = Tensor::from_raw(vec![r], data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::RowDot { a: a.0, b: b.0 }, out, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptySet("tape concat_cols"));
        }
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(Error::shape(
                    "tape concat_cols",
                    format!("{r} rows"),
                    format!("{}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_raw(vec![r, cols], data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, out, rg))
    }

    /// Weighted mean cross-entropy: `Σ_i w_i · CE(target_i, pred_i) / divisor`.
    /// The target is a constant; `row_weights` defaults to all ones and
    /// `divisor` is typically the batch size.
    pub fn ce_mean(
        &mut self,
        target: &Tensor,
        pred: Var,
        row_weights: Option<&[f64]>,
        divisor: f64,
    ) -> Result<Var> {
        let vp = self.value(pred);
        if target.shape() != vp.shape() {
            return Err(Error::shape(
                "tape ce_mean",
                format!("{:?}", target.shape()),
                format!("{:?}", vp.shape()),
            ));
        }
        if !(divisor > 0.0) {
            return Err(Error::InvalidArgument("ce_mean divisor must be positive"));
        }
        let r = vp.rows();
        if let Some(w) = row_weights {
            if w.len() != r {
                return Err(Error::shape("tape ce_mean weights", format!("[{r}]"), format!("[{}]", w.len())));
            }
        }
        let mut acc = 0.0;
        for i in 0..r {
            let w = row_weights.map_or(1.0, |w| w[i]);
            if w != 0.0 {
                let c = vp.cols();
                acc += w * tensor::cross_entropy_row(
                    &target.data()[i * c..(i + 1) * c],
                    &vp.data()[i * c..(i + 1) * c],
                );
            }
        }
        let out = Tensor::scalar(acc / divisor);
        let rg = self.rg(pred);
        Ok(self.push(
            Op::CeMean {
                target: target.clone(),
                pred: pred.0,
                row_weights: row_weights.map(|w| w.to_vec()),
                divisor,
            },
            out,
            rg,
        ))
    }

    /// Accumulates `src_grad` into slot `idx`, allocating on first touch.
    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: &Tensor) {
        match &mut grads[idx] {
            Some(g) => {
                for (gi, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += d;
                }
            }
            None => grads[idx] = Some(delta.clone()),
        }
    }

    /// Runs one reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", "scalar loss".to_string(), format!("{:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul { a, b } => {
                    if self.nodes[*a].requires_grad {
                        let da = matmul_nt_raw(&dy, &self.nodes[*b].value);
                        Self::accumulate(&mut grads, *a, &da);
                    }
                    if self.nodes[*b].requires_grad {
                        let db = matmul_tn_raw(&self.nodes[*a].value, &dy);
                        Self::accumulate(&mut grads, *b, &db);
                    }
                }
                Op::MatMulNT { a, b } => {
                    if self.nodes[*a].requires_grad {
                        let da = matmul_raw(&dy, &self.nodes[*b].value);
                        Self::accumulate(&mut grads, *a, &da);
                    }
                    if self.nodes[*b].requires_grad {
                        let db = matmul_tn_raw(&dy, &self.nodes[*a].value);
                        Self::accumulate(&mut grads, *b, &db);
                    }
                }
                Op::AddRow { m, row } => {
                    if self.nodes[*m].requires_grad {
                        Self::accumulate(&mut grads, *m, &dy);
                    }
                    if self.nodes[*row].requires_grad {
                        let c = dy.cols();
                        let mut sums = vec![0.0; c];
                        for i in 0..dy.rows() {
                            for (s, &d) in sums.iter_mut().zip(dy.row(i)) {
                                *s += d;
                            }
                        }
                        Self::accumulate(&mut grads, *row, &Tensor::from_raw(vec![1, c], sums));
                    }
                }
                Op::AddScaled { a, b, c } => {
                    if self.nodes[*a].requires_grad {
                        Self::accumulate(&mut grads, *a, &dy);
                    }
                    if self.nodes[*b].requires_grad {
                        let db = Tensor::from_raw(
                            dy.shape().to_vec(),
                            dy.data().iter().map(|&d| c * d).collect(),
                        );
                        Self::accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    let da = Tensor::from_raw(
                        dy.shape().to_vec(),
                        dy.data().iter().map(|&d| c * d).collect(),
                    );
                    Self::accumulate(&mut grads, *a, &da);
                }
                Op::Relu { a } => {
                    let x = &self.nodes[*a].value;
                    let da = Tensor::from_raw(
                        dy.shape().to_vec(),
                        dy.data().iter().zip(x.data()).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect(),
                    );
                    Self::accumulate(&mut grads, *a, &da);
                }
                Op::RowSoftmaxT { a, t } => {
                    // dx_j = p_j (dy_j − Σ_k dy_k p_k) / T per row.
                    let p = &self.nodes[idx].value;
                    let (r, c) = (p.rows(), p.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let prow = p.row(i);
                        let drow = &dy.data()[i * c..(i + 1) * c];
                        let inner = tensor::dot(drow, prow);
                        for j in 0..c {
                            da[i * c + j] = prow[j] * (drow[j] - inner) / t;
                        }
                    }
                    Self::accumulate(&mut grads, *a, &Tensor::from_raw(vec![r, c], da));
                }
                Op::RowL2Norm { a } => {
                    // dx = (dy − u (u·dy)) / ||x|| per row, with u the output.
                    let x = &self.nodes[*a].value;
                    let u = &self.nodes[idx].value;
                    let (r, c) = (u.rows(), u.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let urow = u.row(i);
                        let drow = &dy.data()[i * c..(i + 1) * c];
                        let n = tensor::norm(x.row(i));
                        let inner = tensor::dot(urow, drow);
                        for j in 0..c {
                            da[i * c + j] = (drow[j] - urow[j] * inner) / n;
                        }
                    }
                    Self::accumulate(&mut grads, *a, &Tensor::from_raw(vec![r, c], da));
                }
                Op::SetDiag { m, d } => {
                    let n = dy.rows();
                    if self.nodes[*m].requires_grad {
                        let mut dm = dy.data().to_vec();
                        for i in 0..n {
                            dm[i * n + i] = 0.0;
                        }
                        Self::accumulate(&mut grads, *m, &Tensor::from_raw(vec![n, n], dm));
                    }
                    if self.nodes[*d].requires_grad {
                        let dd: Vec<f64> = (0..n).map(|i| dy.data()[i * n + i]).collect();
                        Self::accumulate(&mut grads, *d, &Tensor::from_raw(vec![n], dd));
                    }
                }
                Op::RowDot { a, b } => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (r, c) = (va.rows(), va.cols());
                    if self.nodes[*a].requires_grad {
                        let mut da = vec![0.0; r * c];
                        for i in 0..r {
                            let g = dy.data()[i];
                            for (o, &x) in da[i * c..(i + 1) * c].iter_mut().zip(vb.row(i)) {
                                *o = g * x;
                            }
                        }
                        Self::accumulate(&mut grads, *a, &Tensor::from_raw(vec![r, c], da));
                    }
                    if self.nodes[*b].requires_grad {
                        let mut db = vec![0.0; r * c];
                        for i in 0..r {
                            let g = dy.data()[i];
                            for (o, &x) in db[i * c..(i + 1) * c].iter_mut().zip(va.row(i)) {
                                *o = g * x;
                            }
                        }
                        Self::accumulate(&mut grads, *b, &Tensor::from_raw(vec![r, c], db));
                    }
                }
                Op::ConcatCols { parts } => {
                    let r = dy.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols();
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![0.0; r * pc];
                            for i in 0..r {
                                dp[i * pc..(i + 1) * pc]
                                    .copy_from_slice(&dy.row(i)[offset..offset + pc]);
                            }
                            Self::accumulate(&mut grads, p, &Tensor::from_raw(vec![r, pc], dp));
                        }
                        offset += pc;
                    }
                }
                Op::CeMean { target, pred, row_weights, divisor } => {
                    // d/dp_ij = −w_i t_ij / (divisor · p_ij); zero where the
                    // log-clamp is active (the clamped log is locally constant).
                    let g = dy.item();
                    let vp = &self.nodes[*pred].value;
                    let (r, c) = (vp.rows(), vp.cols());
                    let mut dp = vec![0.0; r * c];
                    for i in 0..r {
                        let w = row_weights.as_ref().map_or(1.0, |w| w[i]);
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let t = target.data()[i * c + j];
                            let p = vp.data()[i * c + j];
                            if t != 0.0 && p >= LOG_CLAMP {
                                dp[i * c + j] = -g * w * t / (divisor * p);
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *pred, &Tensor::from_raw(vec![r, c], dp));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences, over every coordinate of every parameter.
///
/// `loss_fn` must return the loss alongside analytic gradients shaped like
/// `params`, and must be deterministic: two evaluations at the same point
/// must agree bitwise.
///
/// The relative error divides by `max(|analytic|, |fd|, floor)` where the
/// floor sits above the cancellation noise of the central difference,
/// roughly `EPSILON * |loss| / eps`. Coordinates whose true derivative is
/// zero (a normalized layer is invariant along radial directions, for
/// example) produce finite differences of that noise magnitude, and
/// without the floor they would read as large relative errors.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument("grad_check eps must lie in [1e-6, 1e-3]"));
    }
    let (loss0, grads) = loss_fn(params)?;
    let (loss1, _) = loss_fn(params)?;
    if loss0.to_bits() != loss1.to_bits() {
        return Err(Error::NonDeterministicLoss { first: loss0, second: loss1 });
    }
    if grads.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradient tensors", params.len()),
            format!("{}", grads.len()),
        ));
    }

    // A central difference of a loss with magnitude |f| carries rounding
    // noise of a few ulps in lp - lm, i.e. ~EPSILON * |f| / (2 * eps) in the
    // quotient. The floor keeps that noise from dominating coordinates where
    // both the analytic and numeric derivatives are essentially zero.
    let floor = (4e4 * f64::EPSILON * loss0.abs().max(1.0) / eps).max(1e-8);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::shape(
                "grad_check",
                format!("{:?}", params[pi].shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        for ci in 0..grad.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let (lp, _) = loss_fn(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let (lm, _) = loss_fn(&work)?;
            work[pi].data_mut()[ci] = orig;
            let cd = (lp - lm) / (2.0 * eps);
            let a = grad.data()[ci];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(floor);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
