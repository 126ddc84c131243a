//! Combining the P projector embeddings into one normalized embedding z̄.
//!
//! Mean and Sum share one code path: z̄ = normalize(Σ_k z_k). Because
//! normalize(c·x) = normalize(x) for any c > 0, dividing by P before
//! normalizing is mathematically a no-op, and routing both strategies
//! through the same sum makes the equivalence hold bitwise instead of
//! merely to rounding. Components are accumulated in double-double
//! precision so permuting the head order moves the result by at most
//! one ulp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{normalize_into, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleStrategy {
    Mean,
    Sum,
    Concat,
}

impl Default for EnsembleStrategy {
    fn default() -> Self {
        EnsembleStrategy::Mean
    }
}

impl EnsembleStrategy {
    /// Dimension of z̄ given the per-head dim d_z and head count P.
    pub fn output_dim(self, d_z: usize, p: usize) -> usize {
        match self {
            EnsembleStrategy::Mean | EnsembleStrategy::Sum => d_z,
            EnsembleStrategy::Concat => d_z * p,
        }
    }
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Per-component double-double sum of the rows `row(i)` across all heads,
/// written into `dst`.
fn sum_component_dd(dst: &mut [f64], rows: &[&[f64]]) {
    for (j, d) in dst.iter_mut().enumerate() {
        let mut hi = 0.0;
        let mut lo = 0.0;
        for r in rows {
            let (s, e) = two_sum(hi, r[j]);
            hi = s;
            lo += e;
        }
        *d = hi + lo;
    }
}

fn check_heads(embeddings: &[Tensor]) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::EmptySet("ensemble combine"));
    }
    let first = &embeddings[0];
    for e in &embeddings[1..] {
        if e.shape() != first.shape() {
            return Err(Error::shape(
                "ensemble combine",
                format!("{:?}", first.shape()),
                format!("{:?}", e.shape()),
            ));
        }
    }
    Ok(())
}

/// Combines P embedding vectors into one L2-normalized vector.
pub fn combine(embeddings: &[Tensor], strategy: EnsembleStrategy) -> Result<Tensor> {
    check_heads(embeddings)?;
    let d = embeddings[0].len();
    match strategy {
        EnsembleStrategy::Mean | EnsembleStrategy::Sum => {
            let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.data()).collect();
            let mut sum = vec![0.0; d];
            sum_component_dd(&mut sum, &rows);
            let mut out = vec![0.0; d];
            normalize_into(&mut out, &sum)?;
            Ok(Tensor::from_raw(vec![d], out))
        }
        EnsembleStrategy::Concat => {
            let mut cat = Vec::with_capacity(d * embeddings.len());
            for e in embeddings {
                cat.extend_from_slice(e.data());
            }
            let mut out = vec![0.0; cat.len()];
            normalize_into(&mut out, &cat)?;
            Ok(Tensor::from_raw(vec![cat.len()], out))
        }
    }
}

/// Batch version: P matrices `[B, d_z]` to one `[B, output_dim]` matrix with
/// every row L2-normalized.
pub fn combine_rows(embeddings: &[Tensor], strategy: EnsembleStrategy) -> Result<Tensor> {
    check_heads(embeddings)?;
    let (b, d) = (embeddings[0].rows(), embeddings[0].cols());
    match strategy {
        EnsembleStrategy::Mean | EnsembleStrategy::Sum => {
            let mut out = vec![0.0; b * d];
            let mut sum = vec![0.0; d];
            for i in 0..b {
                let rows: Vec<&[f64]> = embeddings.iter().map(|e| e.row(i)).collect();
                sum_component_dd(&mut sum, &rows);
                normalize_into(&mut out[i * d..(i + 1) * d], &sum)?;
            }
            Ok(Tensor::from_raw(vec![b, d], out))
        }
        EnsembleStrategy::Concat => {
            let dc = d * embeddings.len();
            let mut out = vec![0.0; b * dc];
            let mut cat = vec![0.0; dc];
            for i in 0..b {
                for (k, e) in embeddings.iter().enumerate() {
                    cat[k * d..(k + 1) * d].copy_from_slice(e.row(i));
                }
                normalize_into(&mut out[i * dc..(i + 1) * dc], &cat)?;
            }
            Ok(Tensor::from_raw(vec![b, dc], out))
        }
    }
}

/// Tape version used inside the training graph. Gradients are exact for the
/// functions as implemented; Mean again reuses the Sum path, which computes
/// the identical function (and thus the identical gradient).
pub fn combine_on_tape(
    tape: &mut GradTape,
    embeddings: &[Var],
    strategy: EnsembleStrategy,
) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::EmptySet("ensemble combine"));
    }
    match strategy {
        EnsembleStrategy::Mean | EnsembleStrategy::Sum => {
            let mut acc = embeddings[0];
            for &e in &embeddings[1..] {
                acc = tape.add(acc, e)?;
            }
            tape.row_l2_normalize(acc)
        }
        EnsembleStrategy::Concat => {
            let cat = tape.concat_cols(embeddings)?;
            tape.row_l2_normalize(cat)
        }
    }
}
