//! Warm-up, the four training modes, the guarded alignment schedule, and
//! the gradient-level diagnostics.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamHyper, AdamState, Tensor};
use crate::checkpoint::{Checkpoint, LineageEntry};
use crate::error::{Error, Result};
use crate::metrics::{active_units, certify, psnr, CertificateReport, TargetKind, DEFAULT_ACTIVE_THRESHOLD};
use crate::numeric::KahanSum;
use crate::prob::{clamp_kl, kl_raw, log_softmax, AssignmentMatrix, DEFAULT_TAU};
use crate::rng::Rng;
use crate::teacher::{assign_all, GmmTeacher, TargetCache};
use crate::vae::{decode, encode, losses, raw_witness, Dims, LossBreakdown, LossWeights, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Noalign,
    Rescue,
    FixedT0,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Noalign => "noalign",
            Mode::Rescue => "rescue",
            Mode::FixedT0 => "fixed_t0",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "noalign" => Ok(Mode::Noalign),
            "rescue" => Ok(Mode::Rescue),
            "fixed_t0" => Ok(Mode::FixedT0),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected full, noalign, rescue or fixed_t0)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Base,
    Guard,
    Rescue,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Base => "base",
            Tier::Guard => "guard",
            Tier::Rescue => "rescue",
        }
    }
}

/// Piecewise alignment weight keyed to the current margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub enabled: bool,
    pub lambda_base: f64,
    pub lambda_guard: f64,
    pub lambda_rescue: f64,
    pub delta_band: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda_base: 20.0,
            lambda_guard: 40.0,
            lambda_rescue: 80.0,
            delta_band: 0.2,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.lambda_base, self.lambda_guard, self.lambda_rescue, self.delta_band];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("schedule values must be finite".into()));
        }
        if !(self.lambda_rescue >= self.lambda_guard
            && self.lambda_guard >= self.lambda_base
            && self.lambda_base >= 0.0)
        {
            return Err(Error::Config(
                "schedule needs lambda_rescue >= lambda_guard >= lambda_base >= 0".into(),
            ));
        }
        if self.delta_band < 0.0 {
            return Err(Error::Config("delta_band must be >= 0".into()));
        }
        Ok(())
    }
}

/// `base` above the band, `guard` inside `(0, δ]`, `rescue` at or below zero.
pub fn lambda_schedule(g_tau: f64, schedule: &Schedule) -> (Tier, f64) {
    if g_tau > schedule.delta_band {
        (Tier::Base, schedule.lambda_base)
    } else if g_tau > 0.0 {
        (Tier::Guard, schedule.lambda_guard)
    } else {
        (Tier::Rescue, schedule.lambda_rescue)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// A searched teacher applied to the warm-up features.
    Search { teacher: PathBuf, features: PathBuf },
    /// Frozen targets; the teacher, if given, is only used to check the fingerprint.
    Cache { cache: PathBuf, teacher: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub lr: f64,
    pub tau: f64,
    pub schedule: Schedule,
    pub report_every: u64,
    pub latent: usize,
    pub classes: usize,
    pub hidden: usize,
    pub decoder_uses_teacher: bool,
    pub psnr_peak: f64,
    /// Searched teacher file.
    pub teacher: Option<PathBuf>,
    /// Warm-up features the teacher is applied to.
    pub features: Option<PathBuf>,
    /// Frozen target cache; takes precedence over `teacher` + `features`.
    pub cache: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            steps: 2000,
            warmup_steps: 1500,
            batch_size: 128,
            seed: 0,
            weights: LossWeights {
                beta_z: 4.0,
                lambda_align: 20.0,
                lambda_bal: 1.0,
            },
            lr: 2e-3,
            tau: DEFAULT_TAU,
            schedule: Schedule::default(),
            report_every: 250,
            latent: 4,
            classes: 8,
            hidden: 32,
            decoder_uses_teacher: true,
            psnr_peak: 1.0,
            teacher: None,
            features: None,
            cache: None,
            init_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Rescue && self.init_checkpoint.is_none() {
            return Err(Error::Config("mode=rescue requires an init checkpoint".into()));
        }
        if self.mode == Mode::FixedT0 && self.cache.is_none() {
            return Err(Error::Config("mode=fixed_t0 requires a target cache".into()));
        }
        self.teacher_source()?;
        self.validate_numbers()
    }

    pub fn teacher_source(&self) -> Result<TeacherSource> {
        match (&self.cache, &self.teacher, &self.features) {
            (Some(cache), teacher, _) => Ok(TeacherSource::Cache {
                cache: cache.clone(),
                teacher: teacher.clone(),
            }),
            (None, Some(teacher), Some(features)) => Ok(TeacherSource::Search {
                teacher: teacher.clone(),
                features: features.clone(),
            }),
            (None, Some(_), None) => Err(Error::Config(
                "a teacher needs the warm-up features it is applied to".into(),
            )),
            (None, None, _) => Err(Error::Config("no teacher or target cache given".into())),
        }
    }

    fn validate_numbers(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.report_every == 0 {
            return Err(Error::Config("report_every must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config("tau must be finite and >= 0".into()));
        }
        if !(self.psnr_peak.is_finite() && self.psnr_peak > 0.0) {
            return Err(Error::Config("psnr_peak must be positive".into()));
        }
        for (name, v) in [
            ("beta_z", self.weights.beta_z),
            ("lambda_align", self.weights.lambda_align),
            ("lambda_bal", self.weights.lambda_bal),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn dims(&self, input: usize) -> Dims {
        Dims {
            input,
            latent: self.latent,
            classes: self.classes,
            hidden: self.hidden,
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            ..AdamHyper::default()
        }
    }
}

/// Alignment targets for a run, one row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub rows: AssignmentMatrix,
    pub kind: TargetKind,
    pub fingerprint: u64,
}

impl Targets {
    pub fn from_teacher(teacher: &GmmTeacher, features: &Tensor) -> Result<Self> {
        Ok(Self {
            rows: assign_all(teacher, features)?,
            kind: TargetKind::SearchedTeacher,
            fingerprint: teacher.fingerprint(),
        })
    }

    /// Frozen targets. `expected_fingerprint` comes from a teacher file, if one was supplied.
    pub fn from_cache(cache: &TargetCache, expected_fingerprint: Option<u64>) -> Result<Self> {
        if let Some(f) = expected_fingerprint {
            cache.verify_fingerprint(f)?;
        }
        if cache.sample_ids.iter().enumerate().any(|(i, &id)| id != i as u64) {
            return Err(Error::CacheMismatch(
                "cache sample ids must be 0..n in dataset row order".into(),
            ));
        }
        Ok(Self {
            rows: cache.rows.clone(),
            kind: TargetKind::FixedT0,
            fingerprint: cache.teacher_fingerprint,
        })
    }

    fn check_against(&self, n: usize, k: usize) -> Result<()> {
        if self.rows.n() != n {
            let msg = format!("targets cover {} samples, data has {n}", self.rows.n());
            return Err(match self.kind {
                TargetKind::FixedT0 => Error::CacheMismatch(msg),
                TargetKind::SearchedTeacher => Error::invalid(msg),
            });
        }
        if self.rows.k() != k {
            return Err(Error::Config(format!(
                "targets have {} classes, model has {k}",
                self.rows.k()
            )));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mode: String,
    pub seed: u64,
    pub i_t: f64,
    pub l_align_raw: f64,
    pub bare_margin: f64,
    pub g_tau: f64,
    pub student_mi: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub balance: f64,
    pub lambda_tier: Tier,
    pub lambda_value: f64,
    pub psnr: Option<f64>,
    pub active_units: usize,
    pub target_kind: TargetKind,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Full-set evaluation at the posterior means.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: CertificateReport,
    pub recon: f64,
    pub kl_z: f64,
    pub balance: f64,
    pub psnr: f64,
    pub active_units: usize,
}

/// The certificate from latent codes alone.
pub fn certificate_from_latents(
    params: &ModelParams,
    z: &Tensor,
    targets: &Targets,
    tau: f64,
) -> Result<CertificateReport> {
    let w = raw_witness(params, z)?;
    certify(&w.log_probs, &targets.rows, tau, targets.kind, targets.fingerprint)
}

fn balance_of(probs: &AssignmentMatrix) -> Result<f64> {
    let k = probs.k();
    let mut mean = vec![KahanSum::new(); k];
    for row in probs.rows() {
        for (m, &p) in mean.iter_mut().zip(row) {
            m.add(p);
        }
    }
    let n = probs.n() as f64;
    let mean: Vec<f64> = mean.iter().map(|m| m.value() / n).collect();
    let uniform = vec![-(k as f64).ln(); k];
    clamp_kl(kl_raw(&mean, &uniform))
}

pub fn evaluate(
    params: &ModelParams,
    x: &Tensor,
    targets: &Targets,
    tau: f64,
    psnr_peak: f64,
) -> Result<Evaluation> {
    let (mu, lv) = encode(params, x)?;
    let report = certificate_from_latents(params, &mu, targets, tau)?;
    let x_hat = decode(params, &mu, Some(&targets.rows))?;
    let n = x.rows() as f64;
    let mut sse = KahanSum::new();
    for (a, b) in x.data().iter().zip(x_hat.data()) {
        sse.add((a - b) * (a - b));
    }
    let mut kl = KahanSum::new();
    for (&m, &l) in mu.data().iter().zip(lv.data()) {
        kl.add(m * m + l.exp() - 1.0 - l);
    }
    let w = raw_witness(params, &mu)?;
    Ok(Evaluation {
        report,
        recon: sse.value() / n,
        kl_z: 0.5 * kl.value() / n,
        balance: balance_of(&w.probs)?,
        psnr: psnr(x, &x_hat, psnr_peak)?,
        active_units: if x.rows() >= 2 {
            active_units(&mu, DEFAULT_ACTIVE_THRESHOLD)?
        } else {
            0
        },
    })
}

/// Everything a run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamState,
    pub rng: Rng,
    pub step: u64,
    pub last_report: Option<CertificateReport>,
    pub tier: Tier,
    pub lambda: f64,
    order: Vec<usize>,
    cursor: usize,
}

const RUN_STREAM: u64 = 0x5bd1_e995_9e37_79b9;

impl TrainState {
    /// Fresh parameters from the seed, or the parameters of `init` with
    /// reset optimizer moments.
    pub fn start(cfg: &RunConfig, input: usize, init: Option<&Checkpoint>) -> Result<Self> {
        let dims = cfg.dims(input);
        let params = match init {
            Some(ck) => {
                if ck.dims != dims || ck.decoder_uses_teacher != cfg.decoder_uses_teacher {
                    return Err(Error::Config(format!(
                        "init checkpoint dims {:?} (teacher-conditioned: {}) do not match the run {:?} ({})",
                        ck.dims, ck.decoder_uses_teacher, dims, cfg.decoder_uses_teacher
                    )));
                }
                ck.params()?
            }
            None => ModelParams::init(dims, cfg.decoder_uses_teacher, cfg.seed)?,
        };
        let opt = AdamState::new(&params.to_vec());
        Ok(Self {
            params,
            opt,
            rng: Rng::new(cfg.seed ^ RUN_STREAM),
            step: 0,
            last_report: None,
            tier: Tier::Base,
            lambda: 0.0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn next_batch(&mut self, n: usize, b: usize) -> Vec<usize> {
        let b = b.min(n);
        if self.order.len() != n || self.cursor + b > n {
            self.order = (0..n).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        idx
    }

    /// One Adam update on a fresh minibatch.
    fn update(
        &mut self,
        x: &Tensor,
        rows: &AssignmentMatrix,
        weights: &LossWeights,
        batch_size: usize,
        hyper: &AdamHyper,
    ) -> Result<LossBreakdown> {
        let idx = self.next_batch(x.rows(), batch_size);
        let xb = x.select_rows(&idx);
        let tb = rows.select(&idx)?;
        let latent = self.params.dims.latent;
        let noise = Tensor::matrix(idx.len(), latent, self.rng.normals(idx.len() * latent))?;
        let (lb, graph) = losses(&self.params, &xb, &tb, &noise, weights)?;
        if !lb.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                what: format!("loss is {}", lb.total),
            });
        }
        let grads = graph.param_grads(graph.vars.total)?;
        if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged {
                step: self.step,
                what: "non-finite gradient".into(),
            });
        }
        let mut p = self.params.to_vec();
        adam_step(&mut p, &grads, &mut self.opt, hyper)?;
        self.params.assign_from(&p)?;
        self.step += 1;
        Ok(lb)
    }
}

#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub checkpoint: Checkpoint,
    /// Posterior means over the dataset, N × L.
    pub features: Tensor,
    /// Minibatch objective at every step.
    pub loss_trace: Vec<f64>,
}

fn uniform_rows(n: usize, k: usize) -> Result<AssignmentMatrix> {
    AssignmentMatrix::from_flat(n, k, vec![1.0 / k as f64; n * k])
}

/// Trains without alignment, feeding the decoder's teacher slot uniform rows.
pub fn warmup(cfg: &RunConfig, x: &Tensor) -> Result<WarmupOutcome> {
    cfg.validate_numbers()?;
    if cfg.warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be >= 1".into()));
    }
    let (n, d) = x.dims2("warmup")?;
    if n == 0 {
        return Err(Error::invalid("warmup needs data"));
    }
    let mut state = TrainState::start(cfg, d, None)?;
    let rows = uniform_rows(n, cfg.classes)?;
    let weights = LossWeights {
        lambda_align: 0.0,
        ..cfg.weights
    };
    let hyper = cfg.hyper();
    let mut trace = Vec::with_capacity(cfg.warmup_steps as usize);
    for _ in 0..cfg.warmup_steps {
        trace.push(state.update(x, &rows, &weights, cfg.batch_size, &hyper)?.total);
    }
    let (features, _) = encode(&state.params, x)?;
    let lineage = vec![LineageEntry {
        mode: "warmup".into(),
        seed: cfg.seed,
        steps: cfg.warmup_steps,
    }];
    let checkpoint = Checkpoint::new(&state.params, Some(&state.opt), Some(&state.rng), state.step, lineage);
    Ok(WarmupOutcome {
        checkpoint,
        features,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub final_report: CertificateReport,
}

/// Runs one mode end to end. `init` is the starting checkpoint (warm-up
/// endpoint, or the collapsed endpoint for `rescue`).
pub fn train(cfg: &RunConfig, x: &Tensor, targets: &Targets, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    train_with(cfg, x, targets, init, |_| Ok(()))
}

/// [`train`], calling `on_report` with each metrics record as it is produced.
pub fn train_with(
    cfg: &RunConfig,
    x: &Tensor,
    targets: &Targets,
    init: Option<&Checkpoint>,
    mut on_report: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate_numbers()?;
    if cfg.mode == Mode::Rescue && init.is_none() {
        return Err(Error::Config("mode=rescue requires an init checkpoint".into()));
    }
    if cfg.mode == Mode::FixedT0 && targets.kind != TargetKind::FixedT0 {
        return Err(Error::Config("mode=fixed_t0 requires cached targets".into()));
    }
    let (n, d) = x.dims2("train")?;
    targets.check_against(n, cfg.classes)?;
    let mut state = TrainState::start(cfg, d, init)?;
    let hyper = cfg.hyper();
    let guarded = cfg.schedule.enabled && cfg.mode != Mode::Noalign;
    let fixed_lambda = if cfg.mode == Mode::Noalign {
        0.0
    } else {
        cfg.weights.lambda_align
    };
    state.lambda = fixed_lambda;

    let mut metrics = Vec::new();
    loop {
        let s = state.step;
        if s % cfg.report_every == 0 || s == cfg.steps {
            let ev = evaluate(&state.params, x, targets, cfg.tau, cfg.psnr_peak)?;
            if guarded {
                let (tier, lambda) = lambda_schedule(ev.report.g_tau, &cfg.schedule);
                state.tier = tier;
                state.lambda = lambda;
            }
            let rec = MetricsRecord {
                step: s,
                mode: cfg.mode.as_str().into(),
                seed: cfg.seed,
                i_t: ev.report.i_t,
                l_align_raw: ev.report.l_align_raw,
                bare_margin: ev.report.bare_margin,
                g_tau: ev.report.g_tau,
                student_mi: ev.report.student_mi,
                recon: ev.recon,
                kl_z: ev.kl_z,
                balance: ev.balance,
                lambda_tier: state.tier,
                lambda_value: state.lambda,
                psnr: ev.psnr.is_finite().then_some(ev.psnr),
                active_units: ev.active_units,
                target_kind: targets.kind,
            };
            on_report(&rec)?;
            metrics.push(rec);
            state.last_report = Some(ev.report);
        }
        if s >= cfg.steps {
            break;
        }
        let weights = LossWeights {
            lambda_align: state.lambda,
            ..cfg.weights
        };
        state.update(x, &targets.rows, &weights, cfg.batch_size, &hyper)?;
    }

    let mut lineage = init.map(|c| c.mode_lineage.clone()).unwrap_or_default();
    lineage.push(LineageEntry {
        mode: cfg.mode.as_str().into(),
        seed: cfg.seed,
        steps: cfg.steps,
    });
    let checkpoint = Checkpoint::new(&state.params, Some(&state.opt), Some(&state.rng), state.step, lineage);
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        final_report: state.last_report.expect("at least one report"),
    })
}

/// Predicted margin drift from the alignment and base-objective gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftProbe {
    /// `⟨∇L_align, ∇L_base⟩`
    pub inner: f64,
    /// `‖∇L_align‖²`
    pub align_sq: f64,
    /// `inner + λ·align_sq`
    pub g_dot_pred: f64,
}

/// Two backward passes over one recorded objective. `weights.lambda_align`
/// is ignored; the base objective is `recon + β_z·kl_z + λ_bal·balance`.
pub fn drift_probe(
    params: &ModelParams,
    x: &Tensor,
    teacher_rows: &AssignmentMatrix,
    noise: &Tensor,
    weights: &LossWeights,
    lambda: f64,
) -> Result<DriftProbe> {
    let (_, graph) = losses(params, x, teacher_rows, noise, weights)?;
    let ga = graph.param_grads(graph.vars.align_raw)?;
    let gb = graph.param_grads(graph.vars.base)?;
    let mut inner = KahanSum::new();
    let mut sq = KahanSum::new();
    for (a, b) in ga.iter().zip(&gb) {
        for (&u, &v) in a.data().iter().zip(b.data()) {
            inner.add(u * v);
            sq.add(u * u);
        }
    }
    let (inner, align_sq) = (inner.value(), sq.value());
    Ok(DriftProbe {
        inner,
        align_sq,
        g_dot_pred: inner + lambda * align_sq,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    /// Mean alignment `(1/N) Σ_i KL(T_i ‖ softmax(u_i))`, one entry per step plus the start.
    pub alignment: Vec<f64>,
    pub final_probs: AssignmentMatrix,
    /// Largest step-to-step increase (≤ 0 for a monotone trajectory).
    pub max_increase: f64,
}

/// Gradient descent on free per-sample logits, starting from uniform.
pub fn free_logit_flow_check(teacher_rows: &AssignmentMatrix, steps: usize, lr: f64) -> Result<FlowTrace> {
    if steps < 2 {
        return Err(Error::invalid("free-logit flow needs at least 2 steps"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let (n, k) = (teacher_rows.n(), teacher_rows.k());
    let mut u = vec![0.0; n * k];
    let mut logp = vec![0.0; n * k];
    let eval = |u: &[f64], logp: &mut [f64]| -> Result<f64> {
        let mut acc = KahanSum::new();
        for i in 0..n {
            let l = log_softmax(&u[i * k..(i + 1) * k])?;
            logp[i * k..(i + 1) * k].copy_from_slice(&l);
            acc.add(clamp_kl(kl_raw(teacher_rows.row(i), &l))?);
        }
        Ok(acc.value() / n as f64)
    };
    let mut alignment = Vec::with_capacity(steps + 1);
    alignment.push(eval(&u, &mut logp)?);
    for _ in 0..steps {
        for i in 0..n {
            for c in 0..k {
                let j = i * k + c;
                u[j] -= lr * (logp[j].exp() - teacher_rows.row(i)[c]);
            }
        }
        alignment.push(eval(&u, &mut logp)?);
    }
    let max_increase = alignment
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(FlowTrace {
        alignment,
        final_probs: AssignmentMatrix::from_log_rows(n, k, &u)?,
        max_increase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mixture, MixtureSpec};

    #[test]
    fn schedule_tiers() {
        let s = Schedule::default();
        assert_eq!(lambda_schedule(1.0, &s), (Tier::Base, 20.0));
        assert_eq!(lambda_schedule(0.1, &s), (Tier::Guard, 40.0));
        assert_eq!(lambda_schedule(0.2, &s).0, Tier::Guard);
        assert_eq!(lambda_schedule(0.0, &s).0, Tier::Rescue);
        assert_eq!(lambda_schedule(-0.5, &s), (Tier::Rescue, 80.0));
        let bad = Schedule {
            lambda_guard: 100.0,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_invariants() {
        let cfg = RunConfig {
            mode: Mode::Rescue,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig {
            init_checkpoint: Some("x.json".into()),
            cache: Some("c.json".into()),
            ..cfg
        };
        cfg.validate().unwrap();
        let cfg = RunConfig {
            mode: Mode::FixedT0,
            cache: None,
            teacher: Some("t.json".into()),
            ..cfg
        };
        assert!(cfg.validate().is_err());
        assert_eq!("fixed_t0".parse::<Mode>().unwrap(), Mode::FixedT0);
        assert!("bogus".parse::<Mode>().is_err());
    }

    fn tiny() -> (RunConfig, Tensor) {
        let spec = MixtureSpec {
            n: 48,
            d: 4,
            c: 3,
            separation: 6.0,
            noise_sigma: 1.0,
            seed: 1,
        };
        let cfg = RunConfig {
            steps: 6,
            warmup_steps: 3,
            batch_size: 16,
            report_every: 2,
            latent: 2,
            classes: 3,
            hidden: 8,
            ..RunConfig::default()
        };
        (cfg, gen_mixture(&spec).unwrap().x)
    }

    #[test]
    fn warmup_shapes_and_determinism() {
        let (cfg, x) = tiny();
        let one = RunConfig {
            warmup_steps: 1,
            ..cfg.clone()
        };
        let w = warmup(&one, &x).unwrap();
        assert_eq!(w.features.shape(), &[48, 2]);
        let a = warmup(&cfg, &x).unwrap();
        let b = warmup(&cfg, &x).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.checkpoint, b.checkpoint);
        let zero = RunConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert!(warmup(&zero, &x).is_err());
    }

    fn one_hot_targets(n: usize, k: usize) -> Targets {
        let mut d = vec![0.0; n * k];
        for i in 0..n {
            d[i * k + i % k] = 1.0;
        }
        Targets {
            rows: AssignmentMatrix::from_flat(n, k, d).unwrap(),
            kind: TargetKind::SearchedTeacher,
            fingerprint: 42,
        }
    }

    #[test]
    fn train_reports_and_lineage() {
        let (cfg, x) = tiny();
        let w = warmup(&cfg, &x).unwrap();
        let t = one_hot_targets(48, 3);
        let out = train(&cfg, &x, &t, Some(&w.checkpoint)).unwrap();
        let steps: Vec<u64> = out.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 6]);
        assert_eq!(out.checkpoint.step, 6);
        let modes: Vec<&str> = out.checkpoint.mode_lineage.iter().map(|e| e.mode.as_str()).collect();
        assert_eq!(modes, vec!["warmup", "full"]);
        let again = train(&cfg, &x, &t, Some(&w.checkpoint)).unwrap();
        assert_eq!(again.metrics, out.metrics);

        let noalign = RunConfig {
            mode: Mode::Noalign,
            ..cfg.clone()
        };
        let na = train(&noalign, &x, &t, Some(&w.checkpoint)).unwrap();
        assert!(na.metrics.iter().all(|m| m.lambda_value == 0.0));

        let rescue = RunConfig {
            mode: Mode::Rescue,
            ..cfg.clone()
        };
        assert!(matches!(train(&rescue, &x, &t, None), Err(Error::Config(_))));
        let st = TrainState::start(&rescue, 4, Some(&na.checkpoint)).unwrap();
        assert_eq!(st.params, na.checkpoint.params().unwrap());
        assert_eq!(st.opt.t, 0);

        let fixed = RunConfig {
            mode: Mode::FixedT0,
            ..cfg
        };
        assert!(matches!(train(&fixed, &x, &t, None), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (cfg, mut x) = tiny();
        x.data_mut()[5] = f64::NAN;
        match warmup(&cfg, &x) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn guarded_schedule_moves_tiers() {
        let (cfg, x) = tiny();
        let guarded = RunConfig {
            schedule: Schedule {
                enabled: true,
                ..Schedule::default()
            },
            ..cfg
        };
        let out = train(&guarded, &x, &one_hot_targets(48, 3), None).unwrap();
        for m in &out.metrics {
            let (tier, lambda) = lambda_schedule(m.g_tau, &guarded.schedule);
            assert_eq!((m.lambda_tier, m.lambda_value), (tier, lambda));
        }
    }

    #[test]
    fn flow_matched_is_flat() {
        let t = AssignmentMatrix::from_flat(2, 4, vec![0.25; 8]).unwrap();
        let tr = free_logit_flow_check(&t, 10, 0.1).unwrap();
        assert!(tr.alignment.iter().all(|&v| v == 0.0));
        assert!(free_logit_flow_check(&t, 1, 0.1).is_err());
    }

    #[test]
    fn drift_probe_lambda_zero() {
        let (cfg, x) = tiny();
        let p = ModelParams::init(cfg.dims(4), true, 3).unwrap();
        let t = one_hot_targets(48, 3);
        let noise = Tensor::matrix(48, 2, Rng::new(1).normals(96)).unwrap();
        let probe = drift_probe(&p, &x, &t.rows, &noise, &cfg.weights, 0.0).unwrap();
        assert_eq!(probe.g_dot_pred, probe.inner);
        assert!(probe.align_sq >= 0.0);
    }
}
