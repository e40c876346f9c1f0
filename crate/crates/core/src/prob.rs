//! Exact arithmetic on the probability simplex.
//!
//! Everything the certificate needs lives here: stable softmax, KL against
//! log-probabilities, the mean assignment, teacher mutual information and the
//! constant-baseline cost. All reductions are Kahan-compensated and run in a
//! fixed order so that reports are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{kahan_sum, logsumexp, KahanSum};

/// Tolerance on `|Σ p − 1|` for a vector to count as a simplex point.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Tolerance on `logsumexp(q_log)` for a valid log-probability vector.
pub const LOG_NORM_TOL: f64 = 1e-6;
/// Negative KL round-off up to this magnitude is clamped to zero.
pub const KL_CLAMP: f64 = 1e-9;
/// Default practical safety buffer.
pub const DEFAULT_TAU: f64 = 0.1;

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::invalid("simplex entries must be finite and >= 0"));
    }
    let s = kahan_sum(p.iter().copied());
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("simplex entries sum to {s}, not 1")));
    }
    Ok(())
}

/// A point of the K-simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("simplex needs K >= 2"));
        }
        check_simplex(&probs)?;
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Entrywise natural log; zeros map to `-inf`.
    pub fn ln(&self) -> Vec<f64> {
        self.0.iter().map(|&p| p.ln()).collect()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(s: SimplexVector) -> Self {
        s.0
    }
}

/// N rows on the K-simplex, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn from_flat(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("assignment matrix needs N >= 1"));
        }
        if k < 2 {
            return Err(Error::invalid("assignment matrix needs K >= 2"));
        }
        if data.len() != n * k {
            return Err(Error::invalid(format!(
                "expected {} entries for {n}x{k}, got {}",
                n * k,
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact(k).enumerate() {
            check_simplex(row).map_err(|e| Error::invalid(format!("row {i}: {e}")))?;
        }
        Ok(Self { n, k, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("assignment matrix needs N >= 1"));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("ragged assignment rows"));
        }
        Self::from_flat(n, k, rows.concat())
    }

    /// Row-wise softmax of an N×K log-probability (or logit) matrix.
    pub fn from_log_rows(n: usize, k: usize, log_rows: &[f64]) -> Result<Self> {
        if log_rows.len() != n * k {
            return Err(Error::invalid("log-row buffer has wrong length"));
        }
        let mut data = Vec::with_capacity(n * k);
        for row in log_rows.chunks_exact(k) {
            data.extend(softmax_slice(row)?);
        }
        Self::from_flat(n, k, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.k);
        for &i in idx {
            if i >= self.n {
                return Err(Error::invalid(format!("row index {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::from_flat(idx.len(), self.k, data)
    }

    /// Index of the largest entry in each row (lowest index on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| {
                        if p > best.1 {
                            (c, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

/// Practical margin report. `bare_margin = i_t − l_align_raw`, `g_tau = bare_margin − tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub i_t: f64,
    pub l_align_raw: f64,
    pub bare_margin: f64,
    pub tau: f64,
    pub g_tau: f64,
}

fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    let lsm = log_softmax_slice(logits)?;
    Ok(lsm.into_iter().map(f64::exp).collect())
}

fn log_softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs K >= 2"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = kahan_sum(logits.iter().map(|&l| (l - max).exp())).ln();
    Ok(logits.iter().map(|&l| l - max - lse).collect())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<SimplexVector> {
    let mut p = softmax_slice(logits)?;
    // exp(l - max - lse) can leave the sum a few ulps off; renormalize once.
    let s = kahan_sum(p.iter().copied());
    p.iter_mut().for_each(|x| *x /= s);
    SimplexVector::new(p)
}

/// `l_c − max − log Σ exp(l − max)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    log_softmax_slice(logits)
}

/// Σ_{c: p_c>0} p_c (ln p_c − q_log_c), with no validation or clamping.
pub(crate) fn kl_raw(p: &[f64], q_log: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for (&pc, &qc) in p.iter().zip(q_log) {
        if pc > 0.0 {
            if qc == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            acc.add(pc * (pc.ln() - qc));
        }
    }
    acc.value()
}

pub(crate) fn clamp_kl(v: f64) -> Result<f64> {
    if v.is_nan() {
        Err(Error::Internal("KL evaluated to NaN".into()))
    } else if v >= 0.0 {
        Ok(v)
    } else if v >= -KL_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::Internal(format!("KL evaluated to {v} < -{KL_CLAMP}")))
    }
}

/// KL(p ‖ q) in nats, with `q` given as log-probabilities.
///
/// Uses 0·ln 0 = 0. If `p_c > 0` where `q_log_c = -inf` the result is
/// `f64::INFINITY`; this is a sentinel, not an error.
pub fn kl(p: &SimplexVector, q_log: &[f64]) -> Result<f64> {
    if q_log.len() != p.k() {
        return Err(Error::Shape {
            op: "kl",
            left: vec![p.k()],
            right: vec![q_log.len()],
        });
    }
    if q_log.iter().any(|q| q.is_nan() || *q == f64::INFINITY) {
        return Err(Error::invalid("log-probabilities must not be NaN or +inf"));
    }
    let lse = logsumexp(q_log);
    if lse.abs() > LOG_NORM_TOL {
        return Err(Error::invalid(format!(
            "q_log is not normalized (logsumexp = {lse})"
        )));
    }
    clamp_kl(kl_raw(p.as_slice(), q_log))
}

/// Column mean of the rows, Kahan-accumulated in row order.
pub fn mean_assignment(rows: &AssignmentMatrix) -> SimplexVector {
    let k = rows.k();
    let mut acc = vec![KahanSum::new(); k];
    for row in rows.rows() {
        for (a, &p) in acc.iter_mut().zip(row) {
            a.add(p);
        }
    }
    let n = rows.n() as f64;
    // Linearity keeps this on the simplex up to round-off far below SIMPLEX_TOL.
    SimplexVector(acc.iter().map(|a| a.value() / n).collect())
}

/// Mean of KL(row_i ‖ ln target) over rows.
fn mean_kl_to(rows: &AssignmentMatrix, target_log: &[f64]) -> Result<f64> {
    let mut acc = KahanSum::new();
    for row in rows.rows() {
        let v = kl_raw(row, target_log);
        if v == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        acc.add(clamp_kl(v)?);
    }
    clamp_kl(acc.value() / rows.n() as f64)
}

/// Teacher mutual information `E_x KL(T_x ‖ T̄)`.
pub fn teacher_mi(rows: &AssignmentMatrix) -> Result<f64> {
    let mean = mean_assignment(rows);
    mean_kl_to(rows, &mean.ln())
}

/// `E_x KL(T_x ‖ α)`, evaluated directly.
pub fn constant_baseline_cost(rows: &AssignmentMatrix, alpha: &SimplexVector) -> Result<f64> {
    if alpha.k() != rows.k() {
        return Err(Error::Shape {
            op: "constant_baseline_cost",
            left: vec![rows.n(), rows.k()],
            right: vec![alpha.k()],
        });
    }
    mean_kl_to(rows, &alpha.ln())
}

/// `|E_x KL(T_x ‖ α) − I_T − KL(T̄ ‖ α)|`.
pub fn decomposition_residual(rows: &AssignmentMatrix, alpha: &SimplexVector) -> Result<f64> {
    if alpha.as_slice().iter().any(|&a| a <= 0.0) {
        return Err(Error::invalid("decomposition check needs a strictly positive alpha"));
    }
    let cost = constant_baseline_cost(rows, alpha)?;
    let i_t = teacher_mi(rows)?;
    let mean = mean_assignment(rows);
    let shift = kl(&mean, &alpha.ln())?;
    Ok((cost - i_t - shift).abs())
}

/// Practical margin `G_τ = I_T − L_align − τ`.
pub fn margin(i_t: f64, l_align_raw: f64, tau: f64) -> Result<MarginReport> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::invalid(format!("tau must be finite and >= 0, got {tau}")));
    }
    let bare_margin = i_t - l_align_raw;
    Ok(MarginReport {
        i_t,
        l_align_raw,
        bare_margin,
        tau,
        g_tau: bare_margin - tau,
    })
}

/// Shannon entropy in nats.
pub fn entropy(p: &SimplexVector) -> f64 {
    let h = -kahan_sum(
        p.as_slice()
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln()),
    );
    h.max(0.0)
}
