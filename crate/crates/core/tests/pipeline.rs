use collapse_cert::data::{gen_mixture, MixtureSpec};
use collapse_cert::teacher::{cache_targets, search, EmConfig, TargetCache, Thresholds};
use collapse_cert::trainer::{certificate_from_latents, train, train_with, warmup, Mode, RunConfig, Targets};
use collapse_cert::vae::encode;
use collapse_cert::{Checkpoint, Error, Tensor};

fn small() -> (RunConfig, Tensor) {
    let spec = MixtureSpec {
        n: 240,
        d: 6,
        c: 4,
        separation: 10.0,
        noise_sigma: 1.0,
        seed: 3,
    };
    let cfg = RunConfig {
        steps: 120,
        warmup_steps: 150,
        batch_size: 48,
        report_every: 40,
        latent: 3,
        classes: 4,
        hidden: 12,
        ..RunConfig::default()
    };
    (cfg, gen_mixture(&spec).unwrap().x)
}

fn searched(cfg: &RunConfig, x: &Tensor) -> (Checkpoint, Tensor, Targets, collapse_cert::GmmTeacher) {
    let w = warmup(cfg, x).unwrap();
    let s = search(&w.features, &[cfg.classes], &[0, 1], &Thresholds::default(), &EmConfig::default()).unwrap();
    let t = Targets::from_teacher(&s.teacher, &w.features).unwrap();
    (w.checkpoint, w.features, t, s.teacher)
}

#[test]
fn warmup_loss_decreases_on_default_config() {
    let spec = MixtureSpec::default();
    let x = gen_mixture(&spec).unwrap().x;
    let w = warmup(&RunConfig::default(), &x).unwrap();
    let head: f64 = w.loss_trace[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = w.loss_trace[w.loss_trace.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
    assert_eq!(w.features.shape(), &[spec.n, 4]);
}

#[test]
fn certificate_never_reads_inputs_after_encoding() {
    let (cfg, mut x) = small();
    let (ck, _, targets, _) = searched(&cfg, &x);
    let params = ck.params().unwrap();
    let (mu, _) = encode(&params, &x).unwrap();
    let before = certificate_from_latents(&params, &mu, &targets, 0.1).unwrap();
    x.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    assert!(x.data()[0].is_nan());
    let after = certificate_from_latents(&params, &mu, &targets, 0.1).unwrap();
    assert_eq!(before, after);
}

#[test]
fn metrics_stream_is_deterministic() {
    let (cfg, x) = small();
    let (ck, _, targets, _) = searched(&cfg, &x);
    let lines = |cfg: &RunConfig| {
        let mut out = Vec::new();
        train_with(cfg, &x, &targets, Some(&ck), |m| {
            out.push(m.to_json_line()?);
            Ok(())
        })
        .unwrap();
        out
    };
    assert_eq!(lines(&cfg), lines(&cfg));
    let other = RunConfig { seed: 9, ..cfg.clone() };
    assert_ne!(lines(&cfg), lines(&other));
}

#[test]
fn rescue_starts_from_its_init_checkpoint() {
    let (cfg, x) = small();
    let (ck, _, targets, _) = searched(&cfg, &x);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noalign.json");
    let na = train(&RunConfig { mode: Mode::Noalign, ..cfg.clone() }, &x, &targets, Some(&ck)).unwrap();
    na.checkpoint.save(&path).unwrap();

    let init = Checkpoint::load(&path).unwrap();
    let rescue_cfg = RunConfig {
        mode: Mode::Rescue,
        init_checkpoint: Some(path),
        ..cfg
    };
    let out = train(&rescue_cfg, &x, &targets, Some(&init)).unwrap();

    // The step-0 report is the certificate of the loaded parameters.
    let p0 = init.params().unwrap();
    let (mu, _) = encode(&p0, &x).unwrap();
    let r0 = certificate_from_latents(&p0, &mu, &targets, rescue_cfg.tau).unwrap();
    assert_eq!(out.metrics[0].g_tau.to_bits(), r0.g_tau.to_bits());
    assert_eq!(out.metrics[0].student_mi.to_bits(), r0.student_mi.to_bits());
    let modes: Vec<_> = out.checkpoint.mode_lineage.iter().map(|e| e.mode.clone()).collect();
    assert_eq!(modes, ["warmup", "noalign", "rescue"]);
}

#[test]
fn cached_targets_survive_teacher_changes() {
    let (cfg, x) = small();
    let (ck, features, _, teacher) = searched(&cfg, &x);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    let ids = (0..x.rows() as u64).collect();
    cache_targets(&teacher, &features, ids).unwrap().save(&path).unwrap();
    let cfg = RunConfig { mode: Mode::FixedT0, ..cfg };

    let run = |fp: Option<u64>| {
        let cache = TargetCache::load(&path).unwrap();
        let t = Targets::from_cache(&cache, fp)?;
        train(&cfg, &x, &t, Some(&ck))
    };
    let first = run(Some(teacher.fingerprint())).unwrap();

    let mut other = teacher.clone();
    other.means[0][0] += 1.0;
    assert!(matches!(run(Some(other.fingerprint())), Err(Error::CacheMismatch(_))));
    let second = run(None).unwrap();
    assert_eq!(first.metrics, second.metrics);
    assert!(first.metrics.iter().all(|m| m.target_kind == collapse_cert::TargetKind::FixedT0));
}

#[test]
fn cache_must_cover_the_data() {
    let (cfg, x) = small();
    let (ck, features, _, teacher) = searched(&cfg, &x);
    let sub = features.select_rows(&(0..100).collect::<Vec<_>>());
    let cache = cache_targets(&teacher, &sub, (0..100).collect()).unwrap();
    let t = Targets::from_cache(&cache, None).unwrap();
    let cfg = RunConfig { mode: Mode::FixedT0, ..cfg };
    assert!(matches!(train(&cfg, &x, &t, Some(&ck)), Err(Error::CacheMismatch(_))));
}
