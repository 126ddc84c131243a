//! Dense row-major tensors and the plain (non-differentiating) numeric kernels.
//!
//! Everything is 64-bit. Public constructors reject non-finite entries so
//! NaN/Inf never enters the pipeline silently; kernels that can only be
//! reached with validated inputs use the unchecked internal constructor.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[LOG_CLAMP, 1]` before any logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{n} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by kernels that preserve
    /// finiteness. Shape/value agreement is the caller's responsibility.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Stacks equal-length rows into an `[n, d]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySet("Tensor::from_rows"));
        }
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("Tensor::from_rows", format!("row of {d}"), format!("{}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (or 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on {}-d tensor", self.shape.len()),
        }
    }

    /// Column count of a matrix (or the length of a vector).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on {}-d tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Extracts the single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

// ---------------------------------------------------------------------------
// Compensated accumulation. The L2 norm uses a double-double sum of squares
// with a Newton-corrected square root so that normalizing an already unit
// vector moves each component by at most one ulp.
// ---------------------------------------------------------------------------

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, f64::mul_add(a, b, -p))
}

/// Sum of squares as an unevaluated (hi, lo) pair.
fn sum_squares_dd(v: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    let mut e = 0.0;
    for &x in v {
        let (p, pe) = two_prod(x, x);
        let (t, te) = two_sum(s, p);
        s = t;
        e += te + pe;
    }
    (s, e)
}

/// L2 norm as an (hi, lo) pair with one Newton refinement of the sqrt.
fn norm_dd(v: &[f64]) -> (f64, f64) {
    let (hi, lo) = sum_squares_dd(v);
    let r = hi.sqrt();
    if r == 0.0 {
        return (0.0, 0.0);
    }
    let (rr, rre) = two_prod(r, r);
    let resid = ((hi - rr) - rre) + lo;
    two_sum(r, resid / (2.0 * r))
}

/// Plain L2 norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    let (hi, lo) = norm_dd(v);
    hi + lo
}

/// Normalizes `src` into `dst` with residual-corrected divisions.
/// Returns the norm, or an error when it is numerically zero.
pub(crate) fn normalize_into(dst: &mut [f64], src: &[f64]) -> Result<f64> {
    debug_assert_eq!(dst.len(), src.len());
    let (nhi, nlo) = norm_dd(src);
    if nhi < ZERO_NORM {
        return Err(Error::ZeroVector { norm: nhi });
    }
    for (d, &x) in dst.iter_mut().zip(src) {
        let q = x / nhi;
        let (p, pe) = two_prod(q, nhi);
        let resid = ((x - p) - pe) - q * nlo;
        *d = q + resid / nhi;
    }
    Ok(nhi + nlo)
}

/// L2-normalizes a vector. Errors on (numerically) zero input.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let mut out = vec![0.0; v.len()];
    normalize_into(&mut out, v.data())?;
    Ok(Tensor::from_raw(v.shape.clone(), out))
}

/// L2-normalizes each row of a matrix.
pub fn row_l2_normalize(m: &Tensor) -> Result<Tensor> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        normalize_into(&mut out[i * c..(i + 1) * c], m.row(i))?;
    }
    Ok(Tensor::from_raw(vec![r, c], out))
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Softmax with max-subtraction, written into `dst`.
pub(crate) fn softmax_into(dst: &mut [f64], logits: &[f64], t: f64) {
    debug_assert!(t > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &l) in dst.iter_mut().zip(logits) {
        let e = ((l - max) / t).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Temperature softmax over the last axis: a vector maps to a probability
/// vector, a matrix row-wise.
pub fn softmax_t(logits: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveTemperature(t));
    }
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        softmax_into(&mut out[i * c..(i + 1) * c], &logits.data()[i * c..(i + 1) * c], t);
    }
    Ok(Tensor::from_raw(logits.shape.clone(), out))
}

/// Cross-entropy of one row pair, with the prediction clamped to
/// `[LOG_CLAMP, 1]` before the logarithm.
pub(crate) fn cross_entropy_row(target: &[f64], pred: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&t, &p) in target.iter().zip(pred) {
        if t != 0.0 {
            acc -= t * p.clamp(LOG_CLAMP, 1.0).ln();
        }
    }
    acc
}

/// Cross-entropy −Σ target·log(pred) between two probability vectors.
pub fn cross_entropy(target: &Tensor, pred: &Tensor) -> Result<f64> {
    if !target.same_shape(pred) {
        return Err(Error::shape(
            "cross_entropy",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    Ok(cross_entropy_row(target.data(), pred.data()))
}

// ---------------------------------------------------------------------------
// Linear-algebra kernels shared by the plain and taped paths
// ---------------------------------------------------------------------------

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub(crate) fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// `aᵀ · b` for `a: [k,m]`, `b: [k,n]` (used by backward passes).
pub(crate) fn matmul_tn_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// Matrix product `[m,k]·[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("[m,k]x[k,n], k={}", a.cols()),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(matmul_raw(a, b))
}

/// Adds a `[1,c]` row vector to every row of `[r,c]`.
pub fn add_row(m: &Tensor, row: &Tensor) -> Result<Tensor> {
    if m.cols() != row.cols() || row.rows() != 1 {
        return Err(Error::shape(
            "add_row",
            format!("[1,{}]", m.cols()),
            format!("{:?}", row.shape()),
        ));
    }
    let mut out = m.data().to_vec();
    let c = m.cols();
    for i in 0..m.rows() {
        for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    Ok(Tensor::from_raw(m.shape.clone(), out))
}

/// Elementwise rectifier max(x, 0).
pub fn relu(x: &Tensor) -> Tensor {
    let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_raw(x.shape.clone(), out)
}

/// Dot product of two equal-length slices.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Test support
// ---------------------------------------------------------------------------

/// Distance between two floats in units in the last place, treating the
/// f64 bit patterns as a sign-magnitude integer line.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    fn key(x: f64) -> i64 {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            -(bits & 0x7fff_ffff_ffff_ffff)
        } else {
            bits
        }
    }
    (key(a) - key(b)).unsigned_abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four() {
        let v = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let u = l2_normalize(&v).unwrap();
        assert_eq!(u.data(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let v = Tensor::vector(vec![1.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&v).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        let v = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert!(matches!(l2_normalize(&v), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn softmax_symmetry() {
        let v = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let p = softmax_t(&v, 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_two_logits() {
        // Oracle: e/(e+1) evaluated directly.
        let expect = std::f64::consts::E / (std::f64::consts::E + 1.0);
        let v = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let p = softmax_t(&v, 1.0).unwrap();
        assert!((p.data()[0] - expect).abs() < 1e-12);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - (1.0 - expect)).abs() < 1e-12);
    }

    #[test]
    fn softmax_temperature_preserves_argmax() {
        let v = Tensor::vector(vec![5.0, 1.0, 3.0]).unwrap();
        let argmax = |t: &Tensor| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let sharp = softmax_t(&v, 0.1).unwrap();
        let flat = softmax_t(&v, 10.0).unwrap();
        assert_eq!(argmax(&sharp), argmax(&flat));
        assert_eq!(argmax(&sharp), 0);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let v = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(softmax_t(&v, 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(matches!(softmax_t(&v, -1.0), Err(Error::NonPositiveTemperature(_))));
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let t = Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_prediction() {
        // Oracle: -log(1/C) = ln 4.
        let t = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = Tensor::vector(vec![0.25; 4]).unwrap();
        assert!((cross_entropy(&t, &p).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_entropy_of_pair() {
        let t = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert!((cross_entropy(&t, &t).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shape_mismatch() {
        let t = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let p = Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cross_entropy(&t, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_transposed() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = matmul_nt_raw(&a, &b);
        assert_eq!(c.data(), &[4.0, 2.0, 10.0, 5.0]);
    }
}
