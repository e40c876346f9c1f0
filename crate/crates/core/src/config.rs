//! `key = value` run configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are rejected.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::numeric::fmt17;
use crate::trainer::RunConfig;

pub const KEYS: &[&str] = &[
    "mode",
    "steps",
    "warmup_steps",
    "batch_size",
    "seed",
    "beta_z",
    "lambda_align",
    "lambda_bal",
    "lr",
    "tau",
    "schedule_enabled",
    "lambda_base",
    "lambda_guard",
    "lambda_rescue",
    "delta_band",
    "report_every",
    "latent",
    "classes",
    "hidden",
    "decoder_uses_teacher",
    "psnr_peak",
    "teacher",
    "features",
    "cache",
    "init_checkpoint",
];

/// Splits a config text into `(line, key, value)` triples.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found {line:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mode" => self.mode = v.parse()?,
            "steps" => self.steps = num(key, v)?,
            "warmup_steps" => self.warmup_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "beta_z" => self.weights.beta_z = num(key, v)?,
            "lambda_align" => self.weights.lambda_align = num(key, v)?,
            "lambda_bal" => self.weights.lambda_bal = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "schedule_enabled" => self.schedule.enabled = flag(key, v)?,
            "lambda_base" => self.schedule.lambda_base = num(key, v)?,
            "lambda_guard" => self.schedule.lambda_guard = num(key, v)?,
            "lambda_rescue" => self.schedule.lambda_rescue = num(key, v)?,
            "delta_band" => self.schedule.delta_band = num(key, v)?,
            "report_every" => self.report_every = num(key, v)?,
            "latent" => self.latent = num(key, v)?,
            "classes" => self.classes = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "decoder_uses_teacher" => self.decoder_uses_teacher = flag(key, v)?,
            "psnr_peak" => self.psnr_peak = num(key, v)?,
            "teacher" => self.teacher = path(v),
            "features" => self.features = path(v),
            "cache" => self.cache = path(v),
            "init_checkpoint" => self.init_checkpoint = path(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_kv(text)? {
            self.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// The fully resolved configuration, one key per line, in [`KEYS`] order.
    pub fn to_kv(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let vals: Vec<String> = vec![
            self.mode.as_str().into(),
            self.steps.to_string(),
            self.warmup_steps.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            fmt17(self.weights.beta_z),
            fmt17(self.weights.lambda_align),
            fmt17(self.weights.lambda_bal),
            fmt17(self.lr),
            fmt17(self.tau),
            self.schedule.enabled.to_string(),
            fmt17(self.schedule.lambda_base),
            fmt17(self.schedule.lambda_guard),
            fmt17(self.schedule.lambda_rescue),
            fmt17(self.schedule.delta_band),
            self.report_every.to_string(),
            self.latent.to_string(),
            self.classes.to_string(),
            self.hidden.to_string(),
            self.decoder_uses_teacher.to_string(),
            fmt17(self.psnr_peak),
            p(&self.teacher),
            p(&self.features),
            p(&self.cache),
            p(&self.init_checkpoint),
        ];
        KEYS.iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
