//! Gaussian-mixture teachers.
//!
//! Candidates are fitted on warm-up features with diagonal-covariance EM in
//! the log domain, scored by feasibility diagnostics, and the selected teacher
//! either produces targets directly or has its targets cached and frozen.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::numeric::{logsumexp, sig17};
use crate::prob::{self, AssignmentMatrix, SimplexVector};
use crate::rng::Rng;

pub const TEACHER_FILE_VERSION: u32 = 1;
pub const CACHE_FILE_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Responsibility mass below which a component counts as empty.
const EMPTY_MASS: f64 = 1e-12;

/// Diagonal-covariance Gaussian mixture. `loglik` is the mean per-sample
/// training log-likelihood at the final parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTeacher {
    pub version: u32,
    pub k: usize,
    pub d: usize,
    #[serde(with = "sig17::vec")]
    pub weights: Vec<f64>,
    #[serde(with = "sig17::mat")]
    pub means: Vec<Vec<f64>>,
    #[serde(with = "sig17::mat")]
    pub variances: Vec<Vec<f64>>,
    pub fit_seed: u64,
    #[serde(with = "sig17")]
    pub loglik: f64,
}

impl GmmTeacher {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.d < 1 {
            return Err(Error::invalid("teacher needs k >= 1 and d >= 1"));
        }
        if self.weights.len() != self.k
            || self.means.len() != self.k
            || self.variances.len() != self.k
            || self.means.iter().any(|m| m.len() != self.d)
            || self.variances.iter().any(|v| v.len() != self.d)
        {
            return Err(Error::invalid("teacher parameter shapes disagree with k, d"));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("teacher variances must be finite and > 0"));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("teacher means must be finite"));
        }
        if self.k >= 2 {
            SimplexVector::new(self.weights.clone())?;
        } else if (self.weights[0] - 1.0).abs() > prob::SIMPLEX_TOL {
            return Err(Error::invalid("single-component weight must be 1"));
        }
        Ok(())
    }

    /// 64-bit digest of (k, d, weights, means, variances).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"gmm-teacher-v1");
        h.update((self.k as u64).to_le_bytes());
        h.update((self.d as u64).to_le_bytes());
        for &w in &self.weights {
            h.update(w.to_le_bytes());
        }
        for row in self.means.iter().chain(&self.variances) {
            for &v in row {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        if t.version != TEACHER_FILE_VERSION {
            return Err(Error::invalid(format!("unsupported teacher version {}", t.version)));
        }
        t.validate()?;
        Ok(t)
    }

    /// Per-component `ln w_c + ln N(x; μ_c, diag σ²_c)`.
    fn joint_log(&self, x: &[f64], out: &mut [f64]) {
        for c in 0..self.k {
            let mut acc = 0.0;
            for ((&xi, &mu), &var) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
                let diff = xi - mu;
                acc += LN_2PI + var.ln() + diff * diff / var;
            }
            out[c] = self.weights[c].ln() - 0.5 * acc;
        }
    }
}

/// Posterior responsibilities for one feature vector, with exact log-probabilities.
pub fn assign(teacher: &GmmTeacher, feature: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if feature.len() != teacher.d {
        return Err(Error::Shape {
            op: "assign",
            left: vec![teacher.d],
            right: vec![feature.len()],
        });
    }
    let mut logp = vec![0.0; teacher.k];
    teacher.joint_log(feature, &mut logp);
    let lse = logsumexp(&logp);
    logp.iter_mut().for_each(|v| *v -= lse);
    let probs = logp.iter().map(|v| v.exp()).collect();
    Ok((probs, logp))
}

/// Teacher rows for every feature row.
pub fn assign_all(teacher: &GmmTeacher, features: &Tensor) -> Result<AssignmentMatrix> {
    let n = features.rows();
    let mut data = Vec::with_capacity(n * teacher.k);
    for i in 0..n {
        data.extend(assign(teacher, features.row(i))?.0);
    }
    AssignmentMatrix::from_flat(n, teacher.k, data)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns `k` distinct rows in selection order.
pub fn kmeanspp_init(features: &Tensor, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = features.rows();
    if k < 1 || n < k {
        return Err(Error::invalid(format!("kmeans++ needs 1 <= k <= N, got k={k} N={n}")));
    }
    let mut rng = Rng::new(seed);
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    let mut centers = vec![features.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| d2[i]).sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i]) {
                acc += d2[i];
                if d2[i] > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Round-off can leave `target` just past the last bucket.
            pick.unwrap_or_else(|| (0..n).rev().find(|&i| !chosen[i] && d2[i] > 0.0).expect("positive mass"))
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen[pick] = true;
        let c = features.row(pick).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(features.row(i), &c));
        }
        centers.push(c);
    }
    Ok(centers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub var_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            var_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Fitted teacher plus the per-iteration mean log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub teacher: GmmTeacher,
    pub loglik_trace: Vec<f64>,
    pub reinits: usize,
}

pub fn em_fit(features: &Tensor, k: usize, config: &EmConfig) -> Result<EmFit> {
    let (n, d) = features.dims2("em_fit")?;
    if d < 1 {
        return Err(Error::invalid("em_fit needs D >= 1"));
    }
    if n < k || k < 1 {
        return Err(Error::invalid(format!("em_fit needs 1 <= k <= N, got k={k} N={n}")));
    }
    let nf = n as f64;
    let mut global_mean = vec![0.0; d];
    for i in 0..n {
        for (g, &v) in global_mean.iter_mut().zip(features.row(i)) {
            *g += v;
        }
    }
    global_mean.iter_mut().for_each(|g| *g /= nf);
    let mut global_var = vec![0.0; d];
    for i in 0..n {
        for ((g, &v), &m) in global_var.iter_mut().zip(features.row(i)).zip(&global_mean) {
            *g += (v - m) * (v - m);
        }
    }
    global_var
        .iter_mut()
        .for_each(|g| *g = (*g / nf).max(config.var_floor));

    let mut t = GmmTeacher {
        version: TEACHER_FILE_VERSION,
        k,
        d,
        weights: vec![1.0 / k as f64; k],
        means: kmeanspp_init(features, k, config.seed)?,
        variances: vec![global_var.clone(); k],
        fit_seed: config.seed,
        loglik: f64::NEG_INFINITY,
    };

    let mut resp = vec![0.0; n * k];
    let mut row_ll = vec![0.0; n];
    let mut trace = Vec::new();
    let mut reinits = 0;
    for iter in 0..=config.max_iters {
        // E-step.
        for i in 0..n {
            let r = &mut resp[i * k..(i + 1) * k];
            t.joint_log(features.row(i), r);
            let lse = logsumexp(r);
            row_ll[i] = lse;
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ll = row_ll.iter().sum::<f64>() / nf;
        let converged = trace.last().is_some_and(|&prev: &f64| ll - prev < config.tol);
        trace.push(ll);
        t.loglik = ll;
        if converged || iter == config.max_iters {
            break;
        }

        // M-step.
        let mut mass = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                mass[c] += resp[i * k + c];
            }
        }
        for c in 0..k {
            if mass[c] < EMPTY_MASS {
                reinits += 1;
                if reinits > 3 * k {
                    return Err(Error::FitDegenerate { reinits });
                }
                let worst = (0..n)
                    .min_by(|&a, &b| row_ll[a].total_cmp(&row_ll[b]))
                    .expect("n >= 1");
                t.means[c] = features.row(worst).to_vec();
                t.variances[c] = global_var.clone();
                mass[c] = 1.0;
                for cc in 0..k {
                    resp[worst * k + cc] = if cc == c { 1.0 } else { 0.0 };
                }
                continue;
            }
            let mut mu = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                for (m, &v) in mu.iter_mut().zip(features.row(i)) {
                    *m += r * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= mass[c]);
            let mut var = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                for ((s, &v), &m) in var.iter_mut().zip(features.row(i)).zip(&mu) {
                    *s += r * (v - m) * (v - m);
                }
            }
            var.iter_mut()
                .for_each(|s| *s = (*s / mass[c]).max(config.var_floor));
            t.means[c] = mu;
            t.variances[c] = var;
        }
        let total: f64 = mass.iter().sum();
        t.weights = mass.iter().map(|m| m / total).collect();
    }
    Ok(EmFit {
        teacher: t,
        loglik_trace: trace,
        reinits,
    })
}

/// Feasibility thresholds. Defaults are artifact choices: the criteria are
/// named in the method but their cutoffs are not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// A row is "high margin" when `p(1) − p(2)` exceeds this.
    pub margin_threshold: f64,
    /// Minimum component mass, as a multiple of `1/K`.
    pub min_mass_factor: f64,
    pub min_high_margin_fraction: f64,
    /// Maximum soft-usage KL, as a multiple of `ln K`.
    pub max_soft_usage_factor: f64,
    pub min_teacher_mi: f64,
    /// Optional cap on the hard-assignment balance KL.
    pub max_hard_balance_kl: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            margin_threshold: 0.5,
            min_mass_factor: 0.5,
            min_high_margin_fraction: 0.5,
            max_soft_usage_factor: 0.5,
            min_teacher_mi: 0.1,
            max_hard_balance_kl: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDiagnostics {
    pub i_t: f64,
    pub mean_top1_margin: f64,
    pub high_margin_fraction: f64,
    pub hard_balance_kl: f64,
    pub soft_usage_kl: f64,
    pub min_component_mass: f64,
    pub feasible: bool,
    pub failed_criteria: Vec<String>,
    /// Which sample set the diagnostics were computed on.
    pub evaluated_on: String,
}

fn kl_to_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (x * k).ln())
        .sum::<f64>()
        .max(0.0)
}

pub fn diagnostics(rows: &AssignmentMatrix, th: &Thresholds) -> Result<TeacherDiagnostics> {
    let (n, k) = (rows.n(), rows.k());
    let i_t = prob::teacher_mi(rows)?;
    let mut margin_sum = 0.0;
    let mut high = 0usize;
    let mut hist = vec![0.0; k];
    for (row, arg) in rows.rows().zip(rows.argmax_rows()) {
        let mut top = [f64::NEG_INFINITY; 2];
        for &p in row {
            if p > top[0] {
                top = [p, top[0]];
            } else if p > top[1] {
                top[1] = p;
            }
        }
        let m = top[0] - top[1];
        margin_sum += m;
        if m > th.margin_threshold {
            high += 1;
        }
        hist[arg] += 1.0;
    }
    hist.iter_mut().for_each(|h| *h /= n as f64);
    let mean = prob::mean_assignment(rows);
    let soft_usage_kl = kl_to_uniform(mean.as_slice());
    let hard_balance_kl = kl_to_uniform(&hist);
    let min_component_mass = mean.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let high_margin_fraction = high as f64 / n as f64;
    let kf = k as f64;

    let mut failed = Vec::new();
    if i_t < th.min_teacher_mi {
        failed.push("teacher_mi".to_string());
    }
    if high_margin_fraction < th.min_high_margin_fraction {
        failed.push("high_margin_fraction".to_string());
    }
    if soft_usage_kl > th.max_soft_usage_factor * kf.ln() {
        failed.push("soft_usage_kl".to_string());
    }
    if let Some(cap) = th.max_hard_balance_kl {
        if hard_balance_kl > cap {
            failed.push("hard_balance_kl".to_string());
        }
    }
    if min_component_mass < th.min_mass_factor / kf {
        failed.push("min_component_mass".to_string());
    }
    Ok(TeacherDiagnostics {
        i_t,
        mean_top1_margin: margin_sum / n as f64,
        high_margin_fraction,
        hard_balance_kl,
        soft_usage_kl,
        min_component_mass,
        feasible: failed.is_empty(),
        failed_criteria: failed,
        evaluated_on: "fitting_set".to_string(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateSummary {
    pub k: usize,
    pub seed: u64,
    pub loglik: Option<f64>,
    pub diagnostics: Option<TeacherDiagnostics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub teacher: GmmTeacher,
    pub diagnostics: TeacherDiagnostics,
    pub rows: AssignmentMatrix,
    pub candidates: Vec<CandidateSummary>,
}

/// Fits every `(k, seed)` candidate and picks the feasible one with the
/// largest teacher MI, or the best infeasible one (flagged) when none pass.
/// Ties go to lower `k`, then lower seed.
pub fn search(
    features: &Tensor,
    candidate_ks: &[usize],
    seeds: &[u64],
    thresholds: &Thresholds,
    em: &EmConfig,
) -> Result<SearchOutcome> {
    if candidate_ks.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("teacher search needs at least one k and one seed"));
    }
    let grid: Vec<(usize, u64)> = candidate_ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let fitted: Vec<Result<(GmmTeacher, TeacherDiagnostics, AssignmentMatrix)>> = grid
        .par_iter()
        .map(|&(k, seed)| {
            if k < 2 {
                return Err(Error::invalid("teacher candidates need k >= 2"));
            }
            let fit = em_fit(features, k, &EmConfig { seed, ..*em })?;
            let rows = assign_all(&fit.teacher, features)?;
            let diag = diagnostics(&rows, thresholds)?;
            Ok((fit.teacher, diag, rows))
        })
        .collect();

    let candidates = grid
        .iter()
        .zip(&fitted)
        .map(|(&(k, seed), r)| match r {
            Ok((t, diag, _)) => CandidateSummary {
                k,
                seed,
                loglik: Some(t.loglik),
                diagnostics: Some(diag.clone()),
                error: None,
            },
            Err(e) => CandidateSummary {
                k,
                seed,
                loglik: None,
                diagnostics: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let better = |a: &(usize, u64, f64, bool), b: &(usize, u64, f64, bool)| {
        // true when `a` should replace `b`
        (a.3, a.2, std::cmp::Reverse(a.0), std::cmp::Reverse(a.1))
            .partial_cmp(&(b.3, b.2, std::cmp::Reverse(b.0), std::cmp::Reverse(b.1)))
            == Some(std::cmp::Ordering::Greater)
    };
    let mut best: Option<(usize, (usize, u64, f64, bool))> = None;
    for (idx, (&(k, seed), r)) in grid.iter().zip(&fitted).enumerate() {
        if let Ok((_, diag, _)) = r {
            let key = (k, seed, diag.i_t, diag.feasible);
            if best.as_ref().map_or(true, |(_, b)| better(&key, b)) {
                best = Some((idx, key));
            }
        }
    }
    let Some((idx, _)) = best else {
        let reasons: Vec<String> = fitted
            .iter()
            .filter_map(|r| r.as_ref().err().map(ToString::to_string))
            .collect();
        return Err(Error::SearchFailed(reasons.join("; ")));
    };
    let (teacher, diagnostics, rows) = fitted
        .into_iter()
        .nth(idx)
        .expect("index in range")
        .expect("selected candidate fitted");
    Ok(SearchOutcome {
        teacher,
        diagnostics,
        rows,
        candidates,
    })
}

/// Frozen teacher targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCache {
    pub rows: AssignmentMatrix,
    pub sample_ids: Vec<u64>,
    pub teacher_fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    teacher_fingerprint: String,
    sample_ids: Vec<u64>,
    #[serde(with = "sig17::mat")]
    rows: Vec<Vec<f64>>,
    /// Digest of `sample_ids` and `rows`, checked on load to detect tampering.
    rows_digest: String,
}

pub fn fmt_fingerprint(f: u64) -> String {
    format!("{f:016x}")
}

pub fn parse_fingerprint(s: &str) -> Result<u64> {
    u64::from_str_radix(s.trim_start_matches("0x"), 16)
        .map_err(|_| Error::invalid(format!("bad fingerprint {s:?}")))
}

fn rows_digest(sample_ids: &[u64], rows: &AssignmentMatrix) -> u64 {
    let mut h = Sha256::new();
    h.update(b"target-cache-v1");
    h.update((rows.n() as u64).to_le_bytes());
    h.update((rows.k() as u64).to_le_bytes());
    for id in sample_ids {
        h.update(id.to_le_bytes());
    }
    for &v in rows.as_flat() {
        h.update(v.to_le_bytes());
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl TargetCache {
    pub fn new(rows: AssignmentMatrix, sample_ids: Vec<u64>, teacher_fingerprint: u64) -> Result<Self> {
        if rows.n() != sample_ids.len() {
            return Err(Error::invalid(format!(
                "cache has {} rows but {} sample ids",
                rows.n(),
                sample_ids.len()
            )));
        }
        if sample_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("cache sample ids must be strictly increasing"));
        }
        Ok(Self {
            rows,
            sample_ids,
            teacher_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CacheFile {
            version: CACHE_FILE_VERSION,
            teacher_fingerprint: fmt_fingerprint(self.teacher_fingerprint),
            sample_ids: self.sample_ids.clone(),
            rows: self.rows.to_rows(),
            rows_digest: fmt_fingerprint(rows_digest(&self.sample_ids, &self.rows)),
        };
        let json = serde_json::to_string(&file)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CacheFile = serde_json::from_str(&text)
            .map_err(|e| Error::CacheMismatch(format!("unreadable cache: {e}")))?;
        if file.version != CACHE_FILE_VERSION {
            return Err(Error::CacheMismatch(format!("unsupported cache version {}", file.version)));
        }
        let rows = AssignmentMatrix::from_rows(&file.rows)
            .map_err(|e| Error::CacheMismatch(format!("invalid cached rows: {e}")))?;
        let digest = rows_digest(&file.sample_ids, &rows);
        if parse_fingerprint(&file.rows_digest).ok() != Some(digest) {
            return Err(Error::CacheMismatch("row digest does not match cached rows".into()));
        }
        let fp = parse_fingerprint(&file.teacher_fingerprint)
            .map_err(|e| Error::CacheMismatch(e.to_string()))?;
        Self::new(rows, file.sample_ids, fp).map_err(|e| Error::CacheMismatch(e.to_string()))
    }

    /// Errors with `CacheMismatch` unless the cache was built from `teacher`.
    pub fn verify_teacher(&self, teacher: &GmmTeacher) -> Result<()> {
        self.verify_fingerprint(teacher.fingerprint())
    }

    pub fn verify_fingerprint(&self, expected: u64) -> Result<()> {
        if self.teacher_fingerprint != expected {
            return Err(Error::CacheMismatch(format!(
                "cache fingerprint {} != expected {}",
                fmt_fingerprint(self.teacher_fingerprint),
                fmt_fingerprint(expected)
            )));
        }
        Ok(())
    }
}

/// `T₀(x_i)` for every sample, tagged with the teacher fingerprint.
pub fn cache_targets(teacher: &GmmTeacher, features: &Tensor, sample_ids: Vec<u64>) -> Result<TargetCache> {
    if sample_ids.len() != features.rows() {
        return Err(Error::invalid("one sample id per feature row required"));
    }
    let rows = assign_all(teacher, features)?;
    TargetCache::new(rows, sample_ids, teacher.fingerprint())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_per: usize, centers: &[[f64; 2]], sigma: f64, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        for i in 0..n_per * centers.len() {
            let c = centers[i % centers.len()];
            data.push(c[0] + sigma * rng.normal());
            data.push(c[1] + sigma * rng.normal());
        }
        Tensor::matrix(n_per * centers.len(), 2, data).unwrap()
    }

    fn two_comp() -> GmmTeacher {
        GmmTeacher {
            version: 1,
            k: 2,
            d: 2,
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            variances: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            fit_seed: 0,
            loglik: 0.0,
        }
    }

    #[test]
    fn kmeanspp_every_point_when_n_equals_k() {
        let x = Tensor::matrix(3, 1, vec![0.0, 5.0, 9.0]).unwrap();
        let mut c = kmeanspp_init(&x, 3, 4).unwrap();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0], vec![5.0], vec![9.0]]);
        assert!(kmeanspp_init(&x, 4, 0).is_err());
    }

    #[test]
    fn kmeanspp_one_center_per_blob_and_deterministic() {
        let x = blobs(100, &[[0.0, 0.0], [200.0, 0.0]], 1.0, 3);
        let mut diameter: f64 = 0.0;
        for i in (0..200).step_by(2) {
            for j in (0..200).step_by(2) {
                diameter = diameter.max(sq_dist(x.row(i), x.row(j)).sqrt());
            }
        }
        for seed in 0..20 {
            let c = kmeanspp_init(&x, 2, seed).unwrap();
            assert!(sq_dist(&c[0], &c[1]).sqrt() > diameter);
            assert_eq!(c, kmeanspp_init(&x, 2, seed).unwrap());
        }
    }

    #[test]
    fn em_single_component_is_closed_form_mle() {
        let x = blobs(50, &[[1.0, -2.0]], 1.5, 8);
        let fit = em_fit(&x, 1, &EmConfig::default()).unwrap();
        let n = x.rows() as f64;
        for j in 0..2 {
            let mean = (0..x.rows()).map(|i| x.row(i)[j]).sum::<f64>() / n;
            let var = (0..x.rows()).map(|i| (x.row(i)[j] - mean).powi(2)).sum::<f64>() / n;
            assert!((fit.teacher.means[0][j] - mean).abs() < 1e-9);
            assert!((fit.teacher.variances[0][j] - var).abs() < 1e-9);
        }
        assert_eq!(fit.teacher.weights, vec![1.0]);
    }

    #[test]
    fn em_recovers_separated_means_monotonically() {
        let truth = [[0.0, 0.0], [10.0, 0.0]];
        let x = blobs(1000, &truth, 1.0, 21);
        let fit = em_fit(&x, 2, &EmConfig::default()).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
        let mut means = fit.teacher.means.clone();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (m, t) in means.iter().zip(&truth) {
            assert!(sq_dist(m, t).sqrt() < 0.1, "{m:?} vs {t:?}");
        }
    }

    #[test]
    fn em_floors_variances() {
        let x = Tensor::matrix(4, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let fit = em_fit(&x, 1, &EmConfig { var_floor: 1e-3, ..Default::default() }).unwrap();
        assert_eq!(fit.teacher.variances[0][0], 1e-3);
    }

    #[test]
    fn assign_examples() {
        let t = two_comp();
        let (p, lp) = assign(&t, &[0.0, 3.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-15);
        let mut far = two_comp();
        far.means[1] = vec![12.0, 0.0];
        let (p, _) = assign(&far, &[-1.0, 0.0]).unwrap();
        assert!(p[0] >= 0.999);
        assert!(assign(&t, &[0.0]).is_err());
    }

    #[test]
    fn assign_normalizes() {
        let t = two_comp();
        let mut rng = Rng::new(2);
        for _ in 0..10_000 {
            let x = [5.0 * rng.normal(), 5.0 * rng.normal()];
            let (p, _) = assign(&t, &x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    fn one_hot(n: usize, k: usize, label: impl Fn(usize) -> usize) -> AssignmentMatrix {
        let mut d = vec![0.0; n * k];
        for i in 0..n {
            d[i * k + label(i)] = 1.0;
        }
        AssignmentMatrix::from_flat(n, k, d).unwrap()
    }

    #[test]
    fn diagnostics_uniform_one_hot() {
        let d = diagnostics(&one_hot(40, 4, |i| i % 4), &Thresholds::default()).unwrap();
        assert_eq!(d.mean_top1_margin, 1.0);
        assert_eq!(d.high_margin_fraction, 1.0);
        assert_eq!(d.hard_balance_kl, 0.0);
        assert_eq!(d.soft_usage_kl, 0.0);
        assert_eq!(d.min_component_mass, 0.25);
        assert!(d.feasible && d.failed_criteria.is_empty());
    }

    #[test]
    fn diagnostics_degenerate_teacher() {
        let d = diagnostics(&one_hot(10, 3, |_| 1), &Thresholds::default()).unwrap();
        assert_eq!(d.min_component_mass, 0.0);
        assert!(!d.feasible);
        assert!(d.failed_criteria.contains(&"min_component_mass".to_string()));
        assert!(d.failed_criteria.contains(&"teacher_mi".to_string()));
    }

    #[test]
    fn fingerprint_sensitive_to_tiny_perturbation() {
        let t = two_comp();
        let mut u = t.clone();
        u.means[0][1] += 1e-9;
        assert_ne!(t.fingerprint(), u.fingerprint());
        assert_eq!(t.fingerprint(), two_comp().fingerprint());
    }

    #[test]
    fn teacher_and_cache_round_trip() {
        let x = blobs(30, &[[0.0, 0.0], [6.0, 1.0]], 1.0, 5);
        let fit = em_fit(&x, 2, &EmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join("t.json");
        fit.teacher.save(&tp).unwrap();
        let back = GmmTeacher::load(&tp).unwrap();
        assert_eq!(back, fit.teacher);
        let text = fs::read_to_string(&tp).unwrap();
        assert!(text.contains("e") && text.contains("\"loglik\""));

        let cache = cache_targets(&back, &x, (0..60).collect()).unwrap();
        assert_eq!(cache.rows, assign_all(&fit.teacher, &x).unwrap());
        let cp = dir.path().join("c.json");
        cache.save(&cp).unwrap();
        let loaded = TargetCache::load(&cp).unwrap();
        assert_eq!(loaded, cache);
        loaded.verify_teacher(&fit.teacher).unwrap();
        let mut other = fit.teacher.clone();
        other.weights[0] += 1e-9;
        other.weights[1] -= 1e-9;
        assert!(matches!(loaded.verify_teacher(&other), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn tampered_cache_detected() {
        let t = two_comp();
        let x = blobs(5, &[[0.0, 0.0], [3.0, 0.0]], 1.0, 1);
        let cache = cache_targets(&t, &x, (0..10).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("c.json");
        cache.save(&cp).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cp).unwrap()).unwrap();
        v["rows"][0] = serde_json::json!([0.25, 0.75]);
        fs::write(&cp, v.to_string()).unwrap();
        assert!(matches!(TargetCache::load(&cp), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn cache_requires_increasing_ids() {
        let rows = one_hot(3, 2, |i| i % 2);
        assert!(TargetCache::new(rows.clone(), vec![0, 2, 1], 0).is_err());
        assert!(TargetCache::new(rows, vec![0, 1], 0).is_err());
    }

    #[test]
    fn search_selection_rules() {
        let x = blobs(200, &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 1.0, 13);
        let th = Thresholds::default();
        let em = EmConfig::default();
        let single = search(&x, &[3], &[0], &th, &em).unwrap();
        assert!(single.diagnostics.feasible);
        assert_eq!(single.teacher.k, 3);

        // k=6 has the larger MI but a tight hard-balance cap makes it infeasible.
        let six = search(&x, &[6], &[0], &th, &em).unwrap();
        assert!(six.diagnostics.i_t > single.diagnostics.i_t);
        let th_cap = Thresholds {
            max_hard_balance_kl: Some(0.01),
            min_mass_factor: 0.0,
            ..th
        };
        assert!(!search(&x, &[6], &[0], &th_cap, &em).unwrap().diagnostics.feasible);
        let both = search(&x, &[6, 3], &[0], &th_cap, &em).unwrap();
        assert_eq!(both.teacher.k, 3);
        assert!(both.diagnostics.feasible);

        let again = search(&x, &[6, 3], &[0], &th_cap, &em).unwrap();
        assert_eq!(serde_json::to_string(&both.teacher).unwrap(), serde_json::to_string(&again.teacher).unwrap());
        assert!(search(&x, &[], &[0], &th, &em).is_err());
    }
}
