//! `collapse-cert` command-line driver.
//!
//! Exit codes: 0 ok, 1 unreadable or unwritable files, 2 invalid arguments or
//! configuration, 3 teacher search failed, 4 training diverged, 5 target cache
//! mismatch, 6 a verification check failed.

mod checks;
mod report;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collapse_cert::data::{self, MixtureSpec};
use collapse_cert::teacher::{cache_targets, fmt_fingerprint, search, EmConfig, Thresholds};
use collapse_cert::trainer::{certificate_from_latents, train_with, warmup, TeacherSource};
use collapse_cert::vae::encode;
use collapse_cert::{Checkpoint, Error, GmmTeacher, Mode, RunConfig, TargetCache, Targets};

pub const SEED_ENV: &str = "COLLAPSE_CERT_SEED";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

pub fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidInput(_) | Error::Shape { .. } => 2,
            Error::SearchFailed(_) | Error::FitDegenerate { .. } => 3,
            Error::Diverged { .. } => 4,
            Error::CacheMismatch(_) => 5,
            Error::Io { .. } | Error::Json(_) | Error::Parse { .. } | Error::Internal(_) => 1,
        };
        fail(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Loading an input file: anything but a cache mismatch is an input failure.
fn input<T>(what: &str, path: &Path, r: collapse_cert::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::CacheMismatch(_) => e.into(),
        other => fail(1, format!("cannot read {what} {}: {other}", path.display())),
    })
}

/// Creates the parent directory of an output path.
pub fn parent_dir(path: &Path) -> CliResult<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => make_dir(dir),
        None => Ok(()),
    }
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    parent_dir(path)?;
    fs::write(path, contents).map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| fail(1, format!("cannot create {}: {e}", dir.display())))
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| fail(2, format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[derive(Parser)]
#[command(name = "collapse-cert", version, about = "Teacher-aligned VAE training with an anti-collapse certificate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-mixture dataset (CSV plus a meta sidecar).
    GenData(GenDataArgs),
    /// Train without alignment and export the latent features.
    Warmup(WarmupArgs),
    /// Fit GMM teacher candidates and keep the best feasible one.
    TeacherSearch(SearchArgs),
    /// Train one mode and stream metrics.
    Train(TrainArgs),
    /// Print the certificate of a checkpoint.
    Certify(CertifyArgs),
    /// Collect run directories into a tidy CSV and a tau table.
    Report(report::ReportArgs),
    /// Finite-difference check of the training-loss gradient.
    Gradcheck(checks::GradcheckArgs),
    /// Check the constant-baseline decomposition and the free-logit flow.
    IdentityCheck(checks::IdentityArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Number of clusters, at least 2.
    #[arg(long, default_value_t = 8)]
    c: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Falls back to COLLAPSE_CERT_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Config layering: defaults, then COLLAPSE_CERT_SEED, then the file, then `--set`, then flags.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| fail(1, format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| fail(2, format!("config {}: {e}", p.display())))?;
        }
        for kv in &self.sets {
            cfg.apply_override(kv).map_err(|e| fail(2, format!("--set {kv}: {e}")))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct WarmupArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    /// Warm-up features CSV.
    #[arg(long)]
    features: PathBuf,
    /// Candidate component counts.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out_teacher: PathBuf,
    #[arg(long)]
    out_cache: PathBuf,
    /// Defaults to the teacher path with a `.diagnostics.json` extension.
    #[arg(long)]
    out_diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct TargetArgs {
    /// Searched teacher JSON (needs --features unless --cache is given).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Warm-up features the teacher is applied to.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Frozen target cache.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl TargetArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.teacher.is_some() {
            cfg.teacher = self.teacher.clone();
        }
        if self.features.is_some() {
            cfg.features = self.features.clone();
        }
        if self.cache.is_some() {
            cfg.cache = self.cache.clone();
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// full, noalign, rescue or fixed_t0.
    #[arg(long)]
    mode: Option<Mode>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    targets: TargetArgs,
    /// Starting checkpoint; required for rescue.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    targets: TargetArgs,
    #[arg(long, default_value_t = collapse_cert::prob::DEFAULT_TAU)]
    tau: f64,
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let spec = MixtureSpec {
        n: a.n,
        d: a.d,
        c: a.c,
        separation: a.separation,
        noise_sigma: a.noise,
        seed: match a.seed {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        },
    };
    let ds = data::gen_mixture(&spec)?;
    parent_dir(&a.out)?;
    data::save(&a.out, &ds)?;
    println!(
        "wrote {} samples x {} dims ({} clusters, seed {}) to {}",
        spec.n,
        spec.d,
        spec.c,
        spec.seed,
        a.out.display()
    );
    Ok(())
}

fn run_warmup(a: &WarmupArgs) -> CliResult<()> {
    let cfg = a.config.resolve()?;
    let x = input("data", &a.data, data::load_features(&a.data))?.x;
    make_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("config.txt"), &cfg.to_kv())?;
    let w = warmup(&cfg, &x)?;
    let ck = a.out_dir.join("checkpoint.json");
    let feats = a.out_dir.join("features.csv");
    w.checkpoint.save(&ck)?;
    data::write_csv(&feats, &w.features)?;
    let last = w.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "warmup: {} steps, final minibatch loss {last:.6}; checkpoint {}, features {}",
        cfg.warmup_steps,
        ck.display(),
        feats.display()
    );
    Ok(())
}

fn teacher_search(a: &SearchArgs) -> CliResult<()> {
    let features = input("features", &a.features, data::load_features(&a.features))?.x;
    let thresholds = Thresholds::default();
    let em = EmConfig::default();
    let out = search(&features, &a.ks, &a.seeds, &thresholds, &em)?;
    let k = out.teacher.means.len();
    let seed = out.teacher.fit_seed;
    let diag_path = a
        .out_diagnostics
        .clone()
        .unwrap_or_else(|| a.out_teacher.with_extension("diagnostics.json"));
    let report = serde_json::json!({
        "ks": a.ks,
        "seeds": a.seeds,
        "thresholds": thresholds,
        "em": em,
        "selected": {
            "k": k,
            "seed": seed,
            "teacher_fingerprint": fmt_fingerprint(out.teacher.fingerprint()),
            "diagnostics": out.diagnostics,
        },
        "candidates": out.candidates,
    });
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_file(&diag_path, &(text + "\n"))?;

    let d = &out.diagnostics;
    if !d.feasible {
        eprintln!(
            "infeasible: best candidate k={k} I_T={:.6}; failed criteria: {}",
            d.i_t,
            d.failed_criteria.join(", ")
        );
        return Err(fail(
            3,
            format!("no feasible teacher; diagnostics in {}", diag_path.display()),
        ));
    }
    parent_dir(&a.out_teacher)?;
    parent_dir(&a.out_cache)?;
    out.teacher.save(&a.out_teacher)?;
    let ids = (0..features.rows() as u64).collect();
    cache_targets(&out.teacher, &features, ids)?.save(&a.out_cache)?;
    println!(
        "feasible: k={k} seed={seed} I_T={:.6} high_margin_fraction={:.4} fingerprint={}",
        d.i_t,
        d.high_margin_fraction,
        fmt_fingerprint(out.teacher.fingerprint())
    );
    Ok(())
}

fn load_targets(cfg: &RunConfig) -> CliResult<Targets> {
    Ok(match cfg.teacher_source()? {
        TeacherSource::Search { teacher, features } => {
            let t = input("teacher", &teacher, GmmTeacher::load(&teacher))?;
            let f = input("features", &features, data::load_features(&features))?;
            Targets::from_teacher(&t, &f.x)?
        }
        TeacherSource::Cache { cache, teacher } => {
            let c = input("target cache", &cache, TargetCache::load(&cache))?;
            let fp = match teacher {
                Some(p) => Some(input("teacher", &p, GmmTeacher::load(&p))?.fingerprint()),
                None => None,
            };
            Targets::from_cache(&c, fp)?
        }
    })
}

fn run_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    a.targets.apply(&mut cfg);
    if a.init.is_some() {
        cfg.init_checkpoint = a.init.clone();
    }
    cfg.validate()?;

    let x = input("data", &a.data, data::load_features(&a.data))?.x;
    let targets = load_targets(&cfg)?;
    let init = match &cfg.init_checkpoint {
        Some(p) => Some(input("checkpoint", p, Checkpoint::load(p))?),
        None => None,
    };

    make_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("config.txt"), &cfg.to_kv())?;
    let metrics_path = a.out_dir.join("metrics.jsonl");
    let file = fs::File::create(&metrics_path)
        .map_err(|e| fail(1, format!("cannot write {}: {e}", metrics_path.display())))?;
    let mut sink = BufWriter::new(file);
    let io = |e: std::io::Error| Error::Io {
        path: metrics_path.clone(),
        source: e,
    };
    let result = train_with(&cfg, &x, &targets, init.as_ref(), |m| {
        writeln!(sink, "{}", m.to_json_line()?).map_err(io)?;
        sink.flush().map_err(io)
    });
    drop(sink);
    let out = result?;

    out.checkpoint.save(&a.out_dir.join("checkpoint.json"))?;
    let report = serde_json::to_string_pretty(&out.final_report).map_err(Error::from)?;
    write_file(&a.out_dir.join("certificate.json"), &(report.clone() + "\n"))?;
    println!("{report}");
    Ok(())
}

fn certify_cmd(a: &CertifyArgs) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    a.targets.apply(&mut cfg);
    let targets = load_targets(&cfg)?;
    let ck = input("checkpoint", &a.checkpoint, Checkpoint::load(&a.checkpoint))?;
    let params = input("checkpoint", &a.checkpoint, ck.params())?;
    let x = input("data", &a.data, data::load_features(&a.data))?.x;
    let (mu, _) = encode(&params, &x)?;
    let report = certificate_from_latents(&params, &mu, &targets, a.tau)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Warmup(a) => run_warmup(a),
        Command::TeacherSearch(a) => teacher_search(a),
        Command::Train(a) => run_train(a),
        Command::Certify(a) => certify_cmd(a),
        Command::Report(a) => report::run(a),
        Command::Gradcheck(a) => checks::gradcheck(a),
        Command::IdentityCheck(a) => checks::identity(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
