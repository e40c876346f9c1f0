//! Synthetic mixture data and headerless-CSV feature ingestion.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::numeric::fmt17;
use crate::rng::Rng;

/// Generator parameters, also written as the `.meta.json` sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 16,
            c: 8,
            separation: 10.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N × D samples.
    pub x: Tensor,
    /// Generator ground truth; `-1` when the data came from a file.
    pub true_cluster: Vec<i64>,
    pub meta: Option<MixtureSpec>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }
}

/// Cluster centers: a scaled orthonormal frame (a regular simplex) when
/// `c <= d`, otherwise a cubic lattice. Pairwise distance is at least
/// `separation · unit`, where `unit` is `noise_sigma` (or 1 without noise).
pub fn cluster_means(spec: &MixtureSpec) -> Vec<Vec<f64>> {
    let unit = if spec.noise_sigma > 0.0 {
        spec.noise_sigma
    } else {
        1.0
    };
    let dist = spec.separation * unit;
    if spec.c <= spec.d {
        let scale = dist / std::f64::consts::SQRT_2;
        (0..spec.c)
            .map(|j| {
                let mut m = vec![0.0; spec.d];
                m[j] = scale;
                m
            })
            .collect()
    } else {
        let mut side = 1usize;
        while side.pow(spec.d as u32) < spec.c {
            side += 1;
        }
        (0..spec.c)
            .map(|j| {
                let mut rem = j;
                (0..spec.d)
                    .map(|_| {
                        let coord = rem % side;
                        rem /= side;
                        coord as f64 * dist
                    })
                    .collect()
            })
            .collect()
    }
}

/// Balanced Gaussian mixture; sample `i` belongs to cluster `i mod c`.
pub fn gen_mixture(spec: &MixtureSpec) -> Result<Dataset> {
    if spec.c < 2 {
        return Err(Error::invalid(format!("need c >= 2 clusters, got {}", spec.c)));
    }
    if spec.n < spec.c {
        return Err(Error::invalid(format!(
            "need n >= c, got n={} c={}",
            spec.n, spec.c
        )));
    }
    if spec.d == 0 {
        return Err(Error::invalid("need d >= 1"));
    }
    if !(spec.separation.is_finite() && spec.separation > 0.0) {
        return Err(Error::invalid("separation must be positive"));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    let means = cluster_means(spec);
    let mut rng = Rng::new(spec.seed);
    let mut x = Vec::with_capacity(spec.n * spec.d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % spec.c;
        labels.push(c as i64);
        for &mu in &means[c] {
            x.push(mu + spec.noise_sigma * rng.normal());
        }
    }
    Ok(Dataset {
        x: Tensor::matrix(spec.n, spec.d, x)?,
        true_cluster: labels,
        meta: Some(*spec),
    })
}

pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Headerless CSV, one sample per line, reals at 17 significant digits.
pub fn write_csv(path: &Path, x: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..x.rows() {
        let line: Vec<String> = x.row(i).iter().map(|&v| fmt17(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the CSV and its meta sidecar (when the dataset has one).
pub fn save(path: &Path, ds: &Dataset) -> Result<()> {
    write_csv(path, &ds.x)?;
    if let Some(meta) = &ds.meta {
        let mp = meta_path(path);
        let json = serde_json::to_string_pretty(meta)?;
        fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
    }
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut width = None;
    let mut data = Vec::new();
    let mut n = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(n + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {w} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
        n += 1;
    }
    let Some(d) = width else {
        return Err(Error::invalid("feature file has no rows"));
    };
    Ok(Dataset {
        x: Tensor::matrix(n, d, data)?,
        true_cluster: vec![-1; n],
        meta: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, d: usize, c: usize, sep: f64, noise: f64, seed: u64) -> MixtureSpec {
        MixtureSpec {
            n,
            d,
            c,
            separation: sep,
            noise_sigma: noise,
            seed,
        }
    }

    #[test]
    fn noiseless_n_equals_c_returns_means() {
        let s = spec(5, 3, 5, 4.0, 0.0, 1);
        let ds = gen_mixture(&s).unwrap();
        let means = cluster_means(&s);
        for i in 0..5 {
            assert_eq!(ds.x.row(i), &means[i][..]);
        }
    }

    #[test]
    fn means_are_separated() {
        for s in [spec(10, 16, 8, 10.0, 0.5, 0), spec(10, 2, 7, 3.0, 1.0, 0)] {
            let means = cluster_means(&s);
            for a in 0..s.c {
                for b in a + 1..s.c {
                    let d2: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    assert!(d2.sqrt() >= s.separation * s.noise_sigma - 1e-12);
                }
            }
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let s = spec(103, 4, 8, 10.0, 1.0, 9);
        let a = gen_mixture(&s).unwrap();
        let b = gen_mixture(&s).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 8];
        for &c in &a.true_cluster {
            counts[c as usize] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn invalid_counts() {
        assert!(gen_mixture(&spec(10, 2, 1, 10.0, 1.0, 0)).is_err());
        assert!(gen_mixture(&spec(3, 2, 4, 10.0, 1.0, 0)).is_err());
    }

    #[test]
    fn csv_parse_examples() {
        let ds = parse_features(b"1,2\n3,4\n5,6\n").unwrap();
        assert_eq!((ds.n(), ds.d()), (3, 2));
        assert_eq!(ds.true_cluster, vec![-1; 3]);
        assert!(matches!(parse_features(b""), Err(Error::InvalidInput(_))));
        match parse_features(b"1,2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_features(b"1,2\n3,x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = gen_mixture(&spec(50, 3, 5, 10.0, 1.3, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        save(&p, &ds).unwrap();
        let back = load_features(&p).unwrap();
        assert_eq!(back.x, ds.x);
        let meta: MixtureSpec =
            serde_json::from_str(&fs::read_to_string(meta_path(&p)).unwrap()).unwrap();
        assert_eq!(meta, ds.meta.unwrap());
    }
}
