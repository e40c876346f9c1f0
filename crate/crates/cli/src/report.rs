use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use collapse_cert::numeric::fmt17;
use collapse_cert::trainer::MetricsRecord;

use crate::{fail, write_file, CliResult};

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories, each holding a metrics.jsonl.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Tidy CSV of every metrics record. The tau table goes next to it as `<stem>.tau.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.5")]
    taus: Vec<f64>,
}

const COLUMNS: &[&str] = &[
    "run",
    "step",
    "mode",
    "seed",
    "target_kind",
    "i_t",
    "l_align_raw",
    "bare_margin",
    "g_tau",
    "student_mi",
    "recon",
    "kl_z",
    "balance",
    "lambda_tier",
    "lambda_value",
    "psnr",
    "active_units",
];

fn read_run(dir: &Path) -> Result<Vec<MetricsRecord>, String> {
    let path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord =
            serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(format!("{}: no metrics records", path.display()));
    }
    Ok(out)
}

fn csv_text(rows: Vec<Vec<String>>) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(|e| fail(1, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| fail(1, e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| fail(1, e.to_string()))
}

pub fn run(a: &ReportArgs) -> CliResult<()> {
    if let Some(bad) = a.taus.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(fail(2, format!("--taus: {bad} is not a finite value >= 0")));
    }
    let mut runs = Vec::new();
    let mut offenders = Vec::new();
    for dir in &a.runs {
        match read_run(dir) {
            Ok(recs) => runs.push((dir.display().to_string(), recs)),
            Err(msg) => offenders.push(msg),
        }
    }
    if !offenders.is_empty() {
        return Err(fail(
            1,
            format!("unreadable runs:\n  {}", offenders.join("\n  ")),
        ));
    }

    let mut tidy = vec![COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut table = vec![["run", "mode", "seed", "step", "tau", "bare_margin", "g_tau"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for (label, recs) in &runs {
        for r in recs {
            tidy.push(vec![
                label.clone(),
                r.step.to_string(),
                r.mode.clone(),
                r.seed.to_string(),
                r.target_kind.as_str().into(),
                fmt17(r.i_t),
                fmt17(r.l_align_raw),
                fmt17(r.bare_margin),
                fmt17(r.g_tau),
                fmt17(r.student_mi),
                fmt17(r.recon),
                fmt17(r.kl_z),
                fmt17(r.balance),
                r.lambda_tier.as_str().into(),
                fmt17(r.lambda_value),
                r.psnr.map(fmt17).unwrap_or_default(),
                r.active_units.to_string(),
            ]);
        }
        let last = recs.last().expect("non-empty run");
        for &tau in &a.taus {
            table.push(vec![
                label.clone(),
                last.mode.clone(),
                last.seed.to_string(),
                last.step.to_string(),
                fmt17(tau),
                fmt17(last.bare_margin),
                fmt17(last.bare_margin - tau),
            ]);
        }
    }
    let tau_path = a.out.with_extension("tau.csv");
    write_file(&a.out, &csv_text(tidy)?)?;
    write_file(&tau_path, &csv_text(table)?)?;
    println!(
        "{} runs, {} records -> {}; tau table -> {}",
        runs.len(),
        runs.iter().map(|(_, r)| r.len()).sum::<usize>(),
        a.out.display(),
        tau_path.display()
    );
    Ok(())
}
