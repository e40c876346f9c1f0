//! Certificate reports and secondary diagnostics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::numeric::{logsumexp, KahanSum};
use crate::prob::{clamp_kl, kl_raw, margin, teacher_mi, AssignmentMatrix};

pub const DEFAULT_ACTIVE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    SearchedTeacher,
    FixedT0,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::SearchedTeacher => "searched_teacher",
            TargetKind::FixedT0 => "fixed_t0",
        }
    }
}

mod hex_fingerprint {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::teacher::fmt_fingerprint(*f))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        crate::teacher::parse_fingerprint(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub i_t: f64,
    pub l_align_raw: f64,
    pub bare_margin: f64,
    pub g_tau: f64,
    pub tau: f64,
    pub student_mi: f64,
    pub n_eval: usize,
    pub eval_set: String,
    pub target_kind: TargetKind,
    #[serde(with = "hex_fingerprint")]
    pub teacher_fingerprint: u64,
}

impl CertificateReport {
    /// The same report at a different safety buffer.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let m = margin(self.i_t, self.l_align_raw, tau)?;
        Ok(Self {
            g_tau: m.g_tau,
            tau,
            ..self.clone()
        })
    }
}

/// Certificate from witness log-probabilities (N × K) and target rows.
pub fn certify(
    witness_log: &Tensor,
    teacher_rows: &AssignmentMatrix,
    tau: f64,
    target_kind: TargetKind,
    teacher_fingerprint: u64,
) -> Result<CertificateReport> {
    let (n, k) = witness_log.dims2("certify")?;
    if n != teacher_rows.n() || k != teacher_rows.k() {
        return Err(Error::Shape {
            op: "certify",
            left: vec![n, k],
            right: vec![teacher_rows.n(), teacher_rows.k()],
        });
    }
    if witness_log.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::invalid("witness log-probabilities must not be NaN or +inf"));
    }
    let i_t = teacher_mi(teacher_rows)?;
    let mut acc = KahanSum::new();
    for i in 0..n {
        acc.add(clamp_kl(kl_raw(teacher_rows.row(i), witness_log.row(i)))?);
    }
    let l_align_raw = clamp_kl(acc.value() / n as f64)?;
    let student_mi = student_mi(witness_log)?;
    let m = margin(i_t, l_align_raw, tau)?;
    Ok(CertificateReport {
        i_t,
        l_align_raw,
        bare_margin: m.bare_margin,
        g_tau: m.g_tau,
        tau,
        student_mi,
        n_eval: n,
        eval_set: "training_set".into(),
        target_kind,
        teacher_fingerprint,
    })
}

/// `E_x KL(S_x ‖ S̄)` from log-probability rows.
pub fn student_mi(witness_log: &Tensor) -> Result<f64> {
    let (n, k) = witness_log.dims2("student_mi")?;
    if n == 0 {
        return Err(Error::invalid("student_mi needs at least one row"));
    }
    let ln_n = (n as f64).ln();
    let mut col = vec![0.0; n];
    let ln_mean: Vec<f64> = (0..k)
        .map(|c| {
            for (i, v) in col.iter_mut().enumerate() {
                *v = witness_log.row(i)[c];
            }
            logsumexp(&col) - ln_n
        })
        .collect();
    let mut acc = KahanSum::new();
    let mut probs = vec![0.0; k];
    for i in 0..n {
        for (p, &l) in probs.iter_mut().zip(witness_log.row(i)) {
            *p = l.exp();
        }
        acc.add(clamp_kl(kl_raw(&probs, &ln_mean))?);
    }
    clamp_kl(acc.value() / n as f64)
}

/// `(τ, bare_margin − τ)` for each buffer.
pub fn tau_sensitivity(report: &CertificateReport, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&t| margin(report.i_t, report.l_align_raw, t).map(|m| (t, report.bare_margin - m.tau)))
        .collect()
}

/// `10·log10(peak² / MSE)`; `+inf` when the reconstruction is exact.
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            op: "psnr",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    if x.numel() == 0 {
        return Err(Error::invalid("psnr needs at least one entry"));
    }
    let mut acc = KahanSum::new();
    for (a, b) in x.data().iter().zip(x_hat.data()) {
        acc.add((a - b) * (a - b));
    }
    let mse = acc.value() / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Per-dimension variance of the posterior means across samples.
pub fn latent_variances(mu: &Tensor) -> Result<Vec<f64>> {
    let (n, l) = mu.dims2("active_units")?;
    if n < 2 {
        return Err(Error::invalid("active_units needs at least two rows"));
    }
    Ok((0..l)
        .map(|j| {
            let mut s = KahanSum::new();
            for i in 0..n {
                s.add(mu.row(i)[j]);
            }
            let mean = s.value() / n as f64;
            let mut v = KahanSum::new();
            for i in 0..n {
                let d = mu.row(i)[j] - mean;
                v.add(d * d);
            }
            v.value() / n as f64
        })
        .collect())
}

/// Number of latent dimensions whose posterior-mean variance exceeds `threshold`.
pub fn active_units(mu: &Tensor, threshold: f64) -> Result<usize> {
    Ok(latent_variances(mu)?.into_iter().filter(|&v| v > threshold).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iters: 500, lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub psnr: f64,
    pub active_units: usize,
    pub probe_accuracy: Option<f64>,
    /// Probe accuracy is measured on the data it was fitted to.
    pub probe_split: String,
}

/// Train-set accuracy of a multinomial logistic regression fitted by
/// full-batch gradient descent on standardized features.
pub fn linear_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    let (n, l) = features.dims2("linear_probe")?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "linear_probe",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::invalid("linear_probe needs at least one sample"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    let majority = *counts.iter().max().unwrap_or(&0);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Ok(majority as f64 / n as f64);
    }

    let mut x = features.data().to_vec();
    for j in 0..l {
        let mean = (0..n).map(|i| x[i * l + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * l + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            x[i * l + j] = (x[i * l + j] - mean) / sd;
        }
    }

    let mut w = vec![0.0; l * k];
    let mut b = vec![0.0; k];
    let mut gw = vec![0.0; l * k];
    let mut gb = vec![0.0; k];
    let mut p = vec![0.0; k];
    let predict = |w: &[f64], b: &[f64], row: &[f64], out: &mut [f64]| {
        for c in 0..k {
            out[c] = b[c] + (0..l).map(|j| row[j] * w[j * k + c]).sum::<f64>();
        }
    };
    for _ in 0..cfg.iters {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let row = &x[i * l..(i + 1) * l];
            predict(&w, &b, row, &mut p);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = p.iter().map(|v| (v - max).exp()).sum();
            for c in 0..k {
                let g = (p[c] - max).exp() / z - if labels[i] == c { 1.0 } else { 0.0 };
                gb[c] += g;
                for j in 0..l {
                    gw[j * k + c] += g * row[j];
                }
            }
        }
        let s = cfg.lr / n as f64;
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= s * g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= s * g);
    }
    let mut correct = 0;
    for i in 0..n {
        predict(&w, &b, &x[i * l..(i + 1) * l], &mut p);
        let mut best = 0;
        for c in 1..k {
            if p[c] > p[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}
