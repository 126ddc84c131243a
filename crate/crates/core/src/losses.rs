//! The five training losses and distribution alignment.
//!
//! Plain (value-only) functions live here alongside tape builders that
//! construct the same quantities inside a gradient graph. Weak-view targets
//! (aligned pseudo-labels, weak similarity distributions, the pseudo-label
//! graph) always enter the tape as constants: no gradient flows through a
//! target, otherwise the objectives collapse.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{self, Tensor, LOG_CLAMP};

/// Weights and thresholds of the overall objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// λ_u on the pseudo-label loss.
    pub lambda_u: f64,
    /// λ_c on the contrastive loss.
    pub lambda_c: f64,
    /// Confidence threshold τ in (0, 1].
    pub tau: f64,
    /// Graph similarity threshold τ_c in [0, 1).
    pub tau_c: f64,
    /// Temperature T for similarity distributions and graphs.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_u: 1.0, lambda_c: 1.0, tau: 0.95, tau_c: 0.8, temperature: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_u < 0.0 || !self.lambda_u.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda_u must be finite and >= 0, got {}",
                self.lambda_u
            )));
        }
        if self.lambda_c < 0.0 || !self.lambda_c.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda_c must be finite and >= 0, got {}",
                self.lambda_c
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument("tau must lie in (0, 1]"));
        }
        if !(self.tau_c >= 0.0 && self.tau_c < 1.0) {
            return Err(Error::InvalidArgument("tau_c must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distribution alignment
// ---------------------------------------------------------------------------

/// Running state for distribution alignment: a window of recent weak-view
/// batch means and the target marginal the pseudo-labels are pulled toward.
#[derive(Clone, Debug, PartialEq)]
pub struct DaState {
    pub(crate) window: usize,
    pub(crate) target: Vec<f64>,
    pub(crate) history: VecDeque<Vec<f64>>,
    pub(crate) clamp_events: u64,
}

/// Running means below this are clamped before dividing.
pub const DA_CLAMP: f64 = 1e-8;

impl DaState {
    /// Uniform target over `num_classes`, averaging the last `window` batches.
    pub fn new(num_classes: usize, window: usize) -> Result<DaState> {
        Self::with_target(vec![1.0 / num_classes as f64; num_classes], window)
    }

    pub fn with_target(target: Vec<f64>, window: usize) -> Result<DaState> {
        if window < 1 {
            return Err(Error::InvalidArgument("alignment window must be >= 1"));
        }
        if target.len() < 2 {
            return Err(Error::InvalidArgument("alignment target needs >= 2 classes"));
        }
        let sum: f64 = target.iter().sum();
        if target.iter().any(|&t| t < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("alignment target must be a distribution"));
        }
        Ok(DaState { window, target, history: VecDeque::new(), clamp_events: 0 })
    }

    pub fn num_classes(&self) -> usize {
        self.target.len()
    }

    /// Mean of the windowed batch means; the target itself before any batch
    /// has been seen, which makes the first alignment an identity.
    pub fn running_mean(&self) -> Vec<f64> {
        if self.history.is_empty() {
            return self.target.clone();
        }
        let mut mean = vec![0.0; self.target.len()];
        for h in &self.history {
            for (m, &v) in mean.iter_mut().zip(h) {
                *m += v;
            }
        }
        let n = self.history.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    /// How often a running-mean component hit the `DA_CLAMP` floor. Callers
    /// surface this as a warning; alignment itself continues clamped.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }
}

/// Aligns a weak prediction batch toward the target marginal:
/// p̂ = normalize_row(p ⊙ target / p̄), then folds the batch mean of the raw
/// predictions into the running window.
pub fn distribution_align(da: &mut DaState, p_w: &Tensor) -> Result<Tensor> {
    let c = da.target.len();
    if p_w.ndim() != 2 || p_w.cols() != c {
        return Err(Error::shape("distribution_align", format!("[B, {c}]"), format!("{:?}", p_w.shape())));
    }
    let b = p_w.rows();
    let mut p_bar = da.running_mean();
    for v in &mut p_bar {
        if *v < DA_CLAMP {
            *v = DA_CLAMP;
            da.clamp_events += 1;
        }
    }
    let ratio: Vec<f64> = da.target.iter().zip(&p_bar).map(|(&t, &m)| t / m).collect();

    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = p_w.row(i);
        let dst = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            dst[j] = row[j] * ratio[j];
            sum += dst[j];
        }
        let sum = sum.max(LOG_CLAMP);
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }

    let mut batch_mean = vec![0.0; c];
    for i in 0..b {
        for (m, &v) in batch_mean.iter_mut().zip(p_w.row(i)) {
            *m += v;
        }
    }
    for m in &mut batch_mean {
        *m /= b as f64;
    }
    da.history.push_back(batch_mean);
    while da.history.len() > da.window {
        da.history.pop_front();
    }

    Ok(Tensor::from_raw(vec![b, c], out))
}

// ---------------------------------------------------------------------------
// Supervised and pseudo-label losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy between one-hot labels and predictions over the batch.
pub fn supervised_loss(y: &Tensor, p: &Tensor) -> Result<f64> {
    if y.shape() != p.shape() || y.ndim() != 2 {
        return Err(Error::shape("supervised_loss", format!("{:?}", y.shape()), format!("{:?}", p.shape())));
    }
    let b = y.rows();
    let mut acc = 0.0;
    for i in 0..b {
        acc += tensor::cross_entropy_row(y.row(i), p.row(i));
    }
    Ok(acc / b as f64)
}

/// Rows of `p_hat_w` whose max confidence reaches τ.
pub fn confidence_mask(p_hat_w: &Tensor, tau: f64) -> Vec<bool> {
    (0..p_hat_w.rows())
        .map(|i| p_hat_w.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max) >= tau)
        .collect()
}

/// Pseudo-label targets: the aligned distribution itself (soft) or its
/// one-hot argmax (hard). Ties resolve to the lowest class index.
pub fn pseudo_targets(p_hat_w: &Tensor, hard: bool) -> Tensor {
    if !hard {
        return p_hat_w.clone();
    }
    let (b, c) = (p_hat_w.rows(), p_hat_w.cols());
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = p_hat_w.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out[i * c + best] = 1.0;
    }
    Tensor::from_raw(vec![b, c], out)
}

/// Thresholded pseudo-label loss over the unlabeled batch:
/// (1/μB)·Σ_b 1(max p̂_w,b ≥ τ)·H(target_b, p_s,b). Returns the loss and
/// the confidence mask.
pub fn unsupervised_loss(
    p_hat_w: &Tensor,
    p_s: &Tensor,
    tau: f64,
    hard: bool,
) -> Result<(f64, Vec<bool>)> {
    if p_hat_w.shape() != p_s.shape() || p_hat_w.ndim() != 2 {
        return Err(Error::shape(
            "unsupervised_loss",
            format!("{:?}", p_hat_w.shape()),
            format!("{:?}", p_s.shape()),
        ));
    }
    let mask = confidence_mask(p_hat_w, tau);
    let targets = pseudo_targets(p_hat_w, hard);
    let mu_b = p_hat_w.rows();
    let mut acc = 0.0;
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            acc += tensor::cross_entropy_row(targets.row(i), p_s.row(i));
        }
    }
    Ok((acc / mu_b as f64, mask))
}

/// Tape builder for the pseudo-label loss; `targets` and the mask come from
/// the weak view and enter as constants.
pub fn unsupervised_loss_on_tape(
    tape: &mut GradTape,
    targets: &Tensor,
    mask: &[bool],
    probs_s: Var,
    mu_b: usize,
) -> Result<Var> {
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.ce_mean(targets, probs_s, Some(&weights), mu_b as f64)
}

// ---------------------------------------------------------------------------
// Similarity-matching contrastive loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy between weak and strong similarity distributions.
/// `q_w` is the target; no gradient flows through it.
pub fn simmatch_contrastive(q_w: &Tensor, q_s: &Tensor) -> Result<f64> {
    if q_w.shape() != q_s.shape() || q_w.ndim() != 2 {
        return Err(Error::shape(
            "simmatch_contrastive",
            format!("{:?}", q_w.shape()),
            format!("{:?}", q_s.shape()),
        ));
    }
    let b = q_w.rows();
    let mut acc = 0.0;
    for i in 0..b {
        acc += tensor::cross_entropy_row(q_w.row(i), q_s.row(i));
    }
    Ok(acc / b as f64)
}

/// Tape builder: computes q_s from the strong embeddings against the bank
/// and takes the cross-entropy against the constant weak distribution.
pub fn simmatch_contrastive_on_tape(
    tape: &mut GradTape,
    q_w: &Tensor,
    z_s: Var,
    bank: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let bank_v = tape.constant(bank.clone());
    let sims = tape.matmul_nt(z_s, bank_v)?;
    let q_s = tape.row_softmax_t(sims, temperature)?;
    let mu_b = q_w.rows();
    tape.ce_mean(q_w, q_s, None, mu_b as f64)
}

// ---------------------------------------------------------------------------
// Graph-matching contrastive loss
// ---------------------------------------------------------------------------

fn check_unit_rows(z: &Tensor, context: &'static str) -> Result<()> {
    for i in 0..z.rows() {
        if (tensor::norm(z.row(i)) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(context));
        }
    }
    Ok(())
}

/// Pseudo-label graph Ŵ^q: before normalization W_bb = 1 and, for b ≠ j,
/// W_bj = q̄_b·q̄_j when that dot reaches τ_c, else 0. Rows then normalized.
pub fn comatch_pseudo_graph(q: &Tensor, tau_c: f64) -> Result<Tensor> {
    if q.ndim() != 2 || q.rows() < 2 {
        return Err(Error::InvalidArgument("pseudo-label graph needs at least two rows"));
    }
    let b = q.rows();
    let mut w = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            w[i * b + j] = if i == j {
                1.0
            } else {
                let d = tensor::dot(q.row(i), q.row(j));
                if d >= tau_c {
                    d
                } else {
                    0.0
                }
            };
        }
    }
    for i in 0..b {
        let row = &mut w[i * b..(i + 1) * b];
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_raw(vec![b, b], w))
}

/// Embedding graph Ŵ^z: W_bb = exp(z̄_b·z̄′_b/T), W_bj = exp(z̄_b·z̄_j/T)
/// for b ≠ j, rows normalized. Equivalent to a row softmax of the Gram
/// matrix of z̄ with its diagonal replaced by the cross-view dots.
pub fn comatch_embedding_graph(z: &Tensor, z2: &Tensor, temperature: f64) -> Result<Tensor> {
    if z.shape() != z2.shape() || z.ndim() != 2 || z.rows() < 2 {
        return Err(Error::shape(
            "comatch_embedding_graph",
            format!("{:?} twice, >= 2 rows", z.shape()),
            format!("{:?} and {:?}", z.shape(), z2.shape()),
        ));
    }
    let b = z.rows();
    let mut sims = tensor::matmul_nt_raw(z, z);
    for i in 0..b {
        sims.data_mut()[i * b + i] = tensor::dot(z.row(i), z2.row(i));
    }
    tensor::softmax_t(&sims, temperature)
}

/// Both graphs of the graph-matching loss.
pub fn comatch_graphs(
    q: &Tensor,
    z: &Tensor,
    z2: &Tensor,
    tau_c: f64,
    temperature: f64,
) -> Result<(Tensor, Tensor)> {
    if q.rows() != z.rows() {
        return Err(Error::shape(
            "comatch_graphs",
            format!("{} rows", z.rows()),
            format!("{} rows", q.rows()),
        ));
    }
    check_unit_rows(z, "graph embeddings must be normalized")?;
    check_unit_rows(z2, "graph embeddings must be normalized")?;
    Ok((comatch_pseudo_graph(q, tau_c)?, comatch_embedding_graph(z, z2, temperature)?))
}

/// Direct form: (1/μB)·Σ_b H(Ŵ^q_b, Ŵ^z_b).
pub fn comatch_contrastive(wq: &Tensor, wz: &Tensor) -> Result<f64> {
    if wq.shape() != wz.shape() || wq.ndim() != 2 || wq.rows() != wq.cols() {
        return Err(Error::shape(
            "comatch_contrastive",
            format!("{:?} twice, square", wq.shape()),
            format!("{:?} and {:?}", wq.shape(), wz.shape()),
        ));
    }
    let b = wq.rows();
    let mut acc = 0.0;
    for i in 0..b {
        acc += tensor::cross_entropy_row(wq.row(i), wz.row(i));
    }
    Ok(acc / b as f64)
}

/// Decomposed two-term form, computed without materializing Ŵ^z: the
/// self-supervised diagonal term plus the off-diagonal pseudo-label-graph
/// term, each against the log-sum-exp of the unnormalized row. Written as
/// printed, the denominator would be the normalized row sum (identically 1);
/// it must be the unnormalized sum for the expansion to reproduce the
/// cross-entropy, so that is what this computes.
pub fn comatch_contrastive_decomposed(
    wq: &Tensor,
    z: &Tensor,
    z2: &Tensor,
    temperature: f64,
) -> Result<f64> {
    if z.shape() != z2.shape() || z.ndim() != 2 || wq.rows() != z.rows() || wq.cols() != z.rows() {
        return Err(Error::shape(
            "comatch_contrastive_decomposed",
            format!("[{0},{0}] graph with [{0}, d] embeddings", z.rows()),
            format!("{:?}, {:?}, {:?}", wq.shape(), z.shape(), z2.shape()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let b = z.rows();
    let mut acc = 0.0;
    for i in 0..b {
        let mut logits = Vec::with_capacity(b);
        for j in 0..b {
            let s = if i == j { tensor::dot(z.row(i), z2.row(i)) } else { tensor::dot(z.row(i), z.row(j)) };
            logits.push(s / temperature);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        // Diagonal (instance-alignment) term, then the off-diagonal
        // (pseudo-label graph) term.
        let mut h = -wq.data()[i * b + i] * (logits[i] - lse);
        for j in 0..b {
            if j != i {
                h -= wq.data()[i * b + j] * (logits[j] - lse);
            }
        }
        acc += h;
    }
    Ok(acc / b as f64)
}

/// Tape builder for the graph-matching loss; the pseudo-label graph enters
/// as a constant, gradients flow through both strong-view embeddings.
pub fn comatch_contrastive_on_tape(
    tape: &mut GradTape,
    wq: &Tensor,
    z: Var,
    z2: Var,
    temperature: f64,
) -> Result<Var> {
    let gram = tape.matmul_nt(z, z)?;
    let diag = tape.row_dot(z, z2)?;
    let graph = tape.set_diag(gram, diag)?;
    let wz = tape.row_softmax_t(graph, temperature)?;
    let b = wq.rows();
    tape.ce_mean(wq, wz, None, b as f64)
}

// ---------------------------------------------------------------------------
// Overall objective
// ---------------------------------------------------------------------------

/// L = L_s + λ_u·L_u + λ_c·L_c.
pub fn total_loss(ls: f64, lu: f64, lc: f64, weights: &LossWeights) -> f64 {
    ls + weights.lambda_u * lu + weights.lambda_c * lc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::row_l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let mut sum = 0.0;
            for j in 0..c {
                let v: f64 = rng.gen_range(0.05..1.0);
                data[i * c + j] = v;
                sum += v;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        Tensor::from_raw(vec![r, c], data)
    }

    fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let raw = Tensor::from_raw(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        row_l2_normalize(&raw).unwrap()
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(matches!(
            LossWeights { lambda_u: -0.1, ..Default::default() }.validate(),
            Err(Error::InvalidConfig(_))
        ));
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { tau_c: 1.0, ..Default::default() }.validate().is_err());
        assert!(matches!(
            LossWeights { temperature: 0.0, ..Default::default() }.validate(),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn supervised_examples() {
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(supervised_loss(&y, &y).unwrap(), 0.0);

        let y10 = Tensor::from_rows(&[{
            let mut v = vec![0.0; 10];
            v[3] = 1.0;
            v
        }])
        .unwrap();
        let uniform = Tensor::from_rows(&[vec![0.1; 10]]).unwrap();
        assert!((supervised_loss(&y10, &uniform).unwrap() - 10f64.ln()).abs() < 1e-12);

        // One perfect row and one uniform pair row average to ln2 / 2.
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!((supervised_loss(&y, &p).unwrap() - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_identity_when_mean_matches_target() {
        let mut da = DaState::new(2, 4).unwrap();
        let p = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap();
        let aligned = distribution_align(&mut da, &p).unwrap();
        for (a, b) in aligned.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_rebalances_skewed_mean() {
        // p̄ = [0.8, 0.2], uniform target, p = [0.8, 0.2] → [0.5, 0.5].
        let mut da = DaState::new(2, 4).unwrap();
        let skew = Tensor::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let _ = distribution_align(&mut da, &skew).unwrap();
        let aligned = distribution_align(&mut da, &skew).unwrap();
        assert!((aligned.data()[0] - 0.5).abs() < 1e-12);
        assert!((aligned.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut da = DaState::new(4, 8).unwrap();
        for _ in 0..20 {
            let p = stochastic_rows(&mut rng, 6, 4);
            let aligned = distribution_align(&mut da, &p).unwrap();
            for i in 0..6 {
                let s: f64 = aligned.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn alignment_window_rolls() {
        let mut da = DaState::new(2, 2).unwrap();
        for _ in 0..5 {
            let p = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
            let _ = distribution_align(&mut da, &p).unwrap();
        }
        assert_eq!(da.history.len(), 2);
        let mean = da.running_mean();
        assert!((mean[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_clamp_counted() {
        let mut da = DaState::new(2, 4).unwrap();
        let hard = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let _ = distribution_align(&mut da, &hard).unwrap();
        assert_eq!(da.clamp_events(), 0);
        // Running mean now has a zero component, which must clamp.
        let _ = distribution_align(&mut da, &hard).unwrap();
        assert_eq!(da.clamp_events(), 1);
    }

    #[test]
    fn unsupervised_all_below_threshold() {
        let p_w = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let p_s = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let (loss, mask) = unsupervised_loss(&p_w, &p_s, 0.95, true).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(mask, vec![false, false]);
    }

    #[test]
    fn unsupervised_confident_match_is_zero() {
        let p_w = Tensor::from_rows(&[vec![0.97, 0.03]]).unwrap();
        let p_s = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (loss, mask) = unsupervised_loss(&p_w, &p_s, 0.95, true).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(mask, vec![true]);
    }

    #[test]
    fn unsupervised_masked_mean_example() {
        // μB=2, one confident row, hard target, uniform strong over C=4.
        let p_w = Tensor::from_rows(&[vec![0.97, 0.01, 0.01, 0.01], vec![0.4, 0.3, 0.2, 0.1]])
            .unwrap();
        let p_s = Tensor::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let (loss, mask) = unsupervised_loss(&p_w, &p_s, 0.95, true).unwrap();
        assert!((loss - 4f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(mask, vec![true, false]);
    }

    #[test]
    fn unsupervised_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p_w = stochastic_rows(&mut rng, 8, 3);
        let p_s = stochastic_rows(&mut rng, 8, 3);
        let mut prev = f64::INFINITY;
        for tau in [0.3, 0.5, 0.7, 0.9, 0.99, 1.0] {
            let (loss, _) = unsupervised_loss(&p_w, &p_s, tau, true).unwrap();
            assert!(loss <= prev + 1e-15, "loss rose from {prev} to {loss} at tau {tau}");
            prev = loss;
        }
    }

    #[test]
    fn soft_targets_use_distribution() {
        let p_w = Tensor::from_rows(&[vec![0.97, 0.03]]).unwrap();
        let p_s = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let (hard_loss, _) = unsupervised_loss(&p_w, &p_s, 0.9, true).unwrap();
        let (soft_loss, _) = unsupervised_loss(&p_w, &p_s, 0.9, false).unwrap();
        assert!((hard_loss - 2f64.ln()).abs() < 1e-12);
        // Soft cross-entropy against the uniform row is also ln 2.
        assert!((soft_loss - 2f64.ln()).abs() < 1e-12);
        // They differ against a non-uniform strong prediction.
        let p_s = Tensor::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let (h, _) = unsupervised_loss(&p_w, &p_s, 0.9, true).unwrap();
        let (s, _) = unsupervised_loss(&p_w, &p_s, 0.9, false).unwrap();
        assert!(h != s);
    }

    #[test]
    fn simmatch_examples() {
        let one_hot = Tensor::from_rows(&[{
            let mut v = vec![0.0; 8];
            v[2] = 1.0;
            v
        }])
        .unwrap();
        assert_eq!(simmatch_contrastive(&one_hot, &one_hot).unwrap(), 0.0);

        let uniform = Tensor::from_rows(&[vec![0.125; 8]]).unwrap();
        assert!((simmatch_contrastive(&one_hot, &uniform).unwrap() - 8f64.ln()).abs() < 1e-12);

        // Batch mean of {0, ln 8}.
        let q_w = Tensor::from_rows(&[one_hot.row(0).to_vec(), one_hot.row(0).to_vec()]).unwrap();
        let q_s = Tensor::from_rows(&[one_hot.row(0).to_vec(), uniform.row(0).to_vec()]).unwrap();
        assert!((simmatch_contrastive(&q_w, &q_s).unwrap() - 8f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn simmatch_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = unit_rows(&mut rng, 5, 4);
        let z_w = unit_rows(&mut rng, 3, 4);
        let z_s = unit_rows(&mut rng, 3, 4);
        let t = 0.1;
        let q_w = {
            let sims = tensor::matmul_nt_raw(&z_w, &bank);
            tensor::softmax_t(&sims, t).unwrap()
        };
        let q_s = {
            let sims = tensor::matmul_nt_raw(&z_s, &bank);
            tensor::softmax_t(&sims, t).unwrap()
        };
        let plain = simmatch_contrastive(&q_w, &q_s).unwrap();

        let mut tape = GradTape::new();
        let z_s_v = tape.param(z_s.clone());
        let loss = simmatch_contrastive_on_tape(&mut tape, &q_w, z_s_v, &bank, t).unwrap();
        assert_eq!(tape.value(loss).item(), plain);
        assert!(tape.backward(loss).unwrap().get(z_s_v).is_some());
    }

    #[test]
    fn pseudo_graph_diag_and_threshold() {
        // Orthogonal one-hot pseudo-labels: every off-diagonal dot is 0,
        // so the graph is exactly the identity.
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let wq = comatch_pseudo_graph(&q, 0.8).unwrap();
        assert_eq!(wq.data(), &[1.0, 0.0, 0.0, 1.0]);

        // A dot just below τ_c zeroes the entry; at τ_c it stays.
        let eps = 1e-6;
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.8 - eps, 0.2 + eps]]).unwrap();
        let wq = comatch_pseudo_graph(&q, 0.8).unwrap();
        assert_eq!(wq.data()[1], 0.0);
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.2]]).unwrap();
        let wq = comatch_pseudo_graph(&q, 0.8).unwrap();
        assert!(wq.data()[1] > 0.0);
    }

    #[test]
    fn graphs_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = stochastic_rows(&mut rng, 5, 3);
        let z = unit_rows(&mut rng, 5, 6);
        let z2 = unit_rows(&mut rng, 5, 6);
        let (wq, wz) = comatch_graphs(&q, &z, &z2, 0.5, 0.2).unwrap();
        for i in 0..5 {
            let sq: f64 = wq.row(i).iter().sum();
            let sz: f64 = wz.row(i).iter().sum();
            assert!((sq - 1.0).abs() < 1e-9);
            assert!((sz - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn comatch_identity_rows_give_zero() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(comatch_contrastive(&eye, &eye).unwrap(), 0.0);
    }

    #[test]
    fn tau_c_one_reduces_to_identity_graph() {
        // τ_c → 1 zeroes every off-diagonal entry (dots of stochastic rows
        // reach 1 only for identical one-hots), leaving the identity.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = stochastic_rows(&mut rng, 4, 3);
        let wq = comatch_pseudo_graph(&q, 1.0 - 1e-12).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(wq.data()[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn decomposition_matches_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let q = stochastic_rows(&mut rng, 4, 3);
            let z = unit_rows(&mut rng, 4, 6);
            let z2 = unit_rows(&mut rng, 4, 6);
            let t = rng.gen_range(0.1..1.0);
            let (wq, wz) = comatch_graphs(&q, &z, &z2, 0.4, t).unwrap();
            let direct = comatch_contrastive(&wq, &wz).unwrap();
            let decomposed = comatch_contrastive_decomposed(&wq, &z, &z2, t).unwrap();
            assert!((direct - decomposed).abs() < 1e-9, "{direct} vs {decomposed}");
        }
    }

    #[test]
    fn comatch_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let q = stochastic_rows(&mut rng, 4, 3);
        let z = unit_rows(&mut rng, 4, 6);
        let z2 = unit_rows(&mut rng, 4, 6);
        let (wq, wz) = comatch_graphs(&q, &z, &z2, 0.4, 0.2).unwrap();
        let plain = comatch_contrastive(&wq, &wz).unwrap();

        let mut tape = GradTape::new();
        let zv = tape.param(z.clone());
        let z2v = tape.param(z2.clone());
        let loss = comatch_contrastive_on_tape(&mut tape, &wq, zv, z2v, 0.2).unwrap();
        assert_eq!(tape.value(loss).item(), plain);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(zv).is_some());
        assert!(grads.get(z2v).is_some());
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let y = pseudo_targets(&stochastic_rows(&mut rng, 4, 3), true);
            let p = stochastic_rows(&mut rng, 4, 3);
            assert!(supervised_loss(&y, &p).unwrap() >= 0.0);

            let (lu, _) = unsupervised_loss(&p, &stochastic_rows(&mut rng, 4, 3), 0.5, true).unwrap();
            assert!(lu >= 0.0);

            let q_w = stochastic_rows(&mut rng, 4, 5);
            let q_s = stochastic_rows(&mut rng, 4, 5);
            assert!(simmatch_contrastive(&q_w, &q_s).unwrap() >= 0.0);

            let z = unit_rows(&mut rng, 4, 6);
            let z2 = unit_rows(&mut rng, 4, 6);
            let (wq, wz) = comatch_graphs(&q_w.clone(), &z, &z2, 0.3, 0.3).unwrap();
            assert!(comatch_contrastive(&wq, &wz).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_combination() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w), 6.0);
        let off = LossWeights { lambda_u: 0.0, lambda_c: 0.0, ..Default::default() };
        assert_eq!(total_loss(1.5, 9.0, 9.0, &off), 1.5);
    }

    #[test]
    fn composite_objective_gradient_checks() {
        // Full training composite on a 2-class micro-batch: supervised branch
        // plus both contrastive branches, differentiated through shared
        // projector-like parameters.
        use crate::tape::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x_l = Tensor::from_raw(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let x_u = Tensor::from_raw(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w0 = Tensor::from_raw(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let wp0 = Tensor::from_raw(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let bank = unit_rows(&mut rng, 5, 4);
        let q_w = stochastic_rows(&mut rng, 4, 5);
        let wq = comatch_pseudo_graph(&stochastic_rows(&mut rng, 4, 2), 0.3).unwrap();
        let targets = pseudo_targets(&stochastic_rows(&mut rng, 4, 2), true);
        let mask = [true, false, true, true];
        let weights = LossWeights { lambda_u: 0.7, lambda_c: 0.4, ..Default::default() };

        let loss_fn = |ps: &[Tensor]| {
            let mut tape = GradTape::new();
            let w = tape.param(ps[0].clone());
            let wp = tape.param(ps[1].clone());
            let xl = tape.constant(x_l.clone());
            let xu = tape.constant(x_u.clone());

            let logits_l = tape.matmul(xl, w)?;
            let probs_l = tape.row_softmax_t(logits_l, 1.0)?;
            let ls = tape.ce_mean(&y, probs_l, None, 2.0)?;

            let logits_u = tape.matmul(xu, w)?;
            let probs_u = tape.row_softmax_t(logits_u, 1.0)?;
            let lu = unsupervised_loss_on_tape(&mut tape, &targets, &mask, probs_u, 4)?;

            let emb = tape.matmul(xu, wp)?;
            let z = tape.row_l2_normalize(emb)?;
            let lc_sim = simmatch_contrastive_on_tape(&mut tape, &q_w, z, &bank, 0.2)?;
            let lc_graph = comatch_contrastive_on_tape(&mut tape, &wq, z, z, 0.3)?;
            let lc = tape.add(lc_sim, lc_graph)?;

            let total = tape.add_scaled(ls, lu, weights.lambda_u)?;
            let total = tape.add_scaled(total, lc, weights.lambda_c)?;
            let grads = tape.backward(total)?;
            Ok((
                tape.value(total).item(),
                vec![grads.expect(w).clone(), grads.expect(wp).clone()],
            ))
        };
        let err = grad_check(loss_fn, &[w0, wp0], 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
