//! Teacher-guided VAE with a raw z-only witness head.
//!
//! Pathways: `x → z` (encoder), `(z, T(x)) → x̂` (decoder, teacher input
//! optional), `z → S_raw` (witness). The witness head's input width is the
//! latent width, and [`raw_witness`] takes nothing but `z`, so a constant
//! latent code forces a constant witness.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::prob::AssignmentMatrix;
use crate::rng::Rng;

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Input width D.
    pub input: usize,
    /// Latent width L.
    pub latent: usize,
    /// Teacher / witness classes K.
    pub classes: usize,
    /// Hidden width H.
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// in × out
    pub w: Tensor,
    /// 1 × out
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = rng.normals(fan_in * fan_out).into_iter().map(|v| v * std).collect();
        Self {
            w: Tensor::matrix(fan_in, fan_out, w).expect("shape"),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Encoder `D → H → H → 2L`, decoder `L(+K) → H → H → D`, head `L → H → K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub decoder_uses_teacher: bool,
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
    pub raw_head: Vec<Linear>,
}

impl ModelParams {
    pub fn init(dims: Dims, decoder_uses_teacher: bool, seed: u64) -> Result<Self> {
        Self::validate_dims(&dims)?;
        let mut rng = Rng::new(seed);
        let Dims {
            input: d,
            latent: l,
            classes: k,
            hidden: h,
        } = dims;
        let dec_in = if decoder_uses_teacher { l + k } else { l };
        Ok(Self {
            dims,
            decoder_uses_teacher,
            encoder: vec![
                Linear::init(d, h, 1.0, &mut rng),
                Linear::init(h, h, 1.0, &mut rng),
                Linear::init(h, 2 * l, 1.0, &mut rng),
            ],
            decoder: vec![
                Linear::init(dec_in, h, 1.0, &mut rng),
                Linear::init(h, h, 1.0, &mut rng),
                Linear::init(h, d, 1.0, &mut rng),
            ],
            raw_head: vec![Linear::init(l, h, 1.0, &mut rng), Linear::init(h, k, 1.0, &mut rng)],
        })
    }

    /// All weights and biases zero.
    pub fn zeros(dims: Dims, decoder_uses_teacher: bool) -> Result<Self> {
        Self::validate_dims(&dims)?;
        let Dims {
            input: d,
            latent: l,
            classes: k,
            hidden: h,
        } = dims;
        let dec_in = if decoder_uses_teacher { l + k } else { l };
        Ok(Self {
            dims,
            decoder_uses_teacher,
            encoder: vec![Linear::zeros(d, h), Linear::zeros(h, h), Linear::zeros(h, 2 * l)],
            decoder: vec![Linear::zeros(dec_in, h), Linear::zeros(h, h), Linear::zeros(h, d)],
            raw_head: vec![Linear::zeros(l, h), Linear::zeros(h, k)],
        })
    }

    fn validate_dims(dims: &Dims) -> Result<()> {
        if dims.input == 0 || dims.latent == 0 || dims.hidden == 0 {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if dims.classes < 2 {
            return Err(Error::Config("witness needs K >= 2 classes".into()));
        }
        Ok(())
    }

    /// Checks the structural invariants, in particular that the witness head
    /// reads exactly `L` inputs.
    pub fn validate(&self) -> Result<()> {
        Self::validate_dims(&self.dims)?;
        let Dims {
            input: d,
            latent: l,
            classes: k,
            hidden: h,
        } = self.dims;
        let dec_in = if self.decoder_uses_teacher { l + k } else { l };
        let expect = |net: &[Linear], shapes: &[(usize, usize)], name: &str| -> Result<()> {
            if net.len() != shapes.len() {
                return Err(Error::Config(format!("{name}: expected {} layers", shapes.len())));
            }
            for (layer, &(i, o)) in net.iter().zip(shapes) {
                if layer.w.shape() != [i, o] || layer.b.shape() != [1, o] {
                    return Err(Error::Config(format!(
                        "{name}: layer shape {:?} does not match {i}x{o}",
                        layer.w.shape()
                    )));
                }
            }
            Ok(())
        };
        expect(&self.encoder, &[(d, h), (h, h), (h, 2 * l)], "encoder")?;
        expect(&self.decoder, &[(dec_in, h), (h, h), (h, d)], "decoder")?;
        expect(&self.raw_head, &[(l, h), (h, k)], "raw_head")
    }

    /// Stable parameter names, matching [`Self::tensors`] order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (net, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder), ("raw_head", &self.raw_head)] {
            for i in 0..layers.len() {
                out.push(format!("{net}.{i}.w"));
                out.push(format!("{net}.{i}.b"));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.raw_head)
            .flat_map(|l| [&l.w, &l.b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.raw_head.iter_mut())
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    /// Overwrites every tensor from `src`, in [`Self::tensors`] order.
    pub fn assign_from(&mut self, src: &[Tensor]) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != src.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (slot, t) in slots.iter_mut().zip(src) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "assign_from",
                    left: slot.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            **slot = t.clone();
        }
        Ok(())
    }

    pub fn num_tensors(&self) -> usize {
        2 * (self.encoder.len() + self.decoder.len() + self.raw_head.len())
    }
}

/// Parameters registered on a tape, one `(w, b)` pair per layer.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
    pub raw_head: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Registers all parameters; `trainable` selects `param` vs `constant` leaves.
    pub fn register(tape: &mut Tape, p: &ModelParams, trainable: bool) -> Self {
        let mut reg = |net: &[Linear]| -> Vec<(Var, Var)> {
            net.iter()
                .map(|l| {
                    if trainable {
                        (tape.param(l.w.clone()), tape.param(l.b.clone()))
                    } else {
                        (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                    }
                })
                .collect()
        };
        Self {
            encoder: reg(&p.encoder),
            decoder: reg(&p.decoder),
            raw_head: reg(&p.raw_head),
        }
    }

    /// Rebuilds the layer structure from vars in [`ModelParams::tensors`] order.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.num_tensors() {
            return Err(Error::invalid("parameter var count mismatch"));
        }
        let mut it = vars.chunks_exact(2).map(|c| (c[0], c[1]));
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        Ok(Self {
            encoder: take(params.encoder.len()),
            decoder: take(params.decoder.len()),
            raw_head: take(params.raw_head.len()),
        })
    }

    pub fn all(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.raw_head)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Gradients for every parameter, zero-filled, in [`ModelParams::tensors`] order.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
            .collect()
    }
}

/// Affine layers with tanh between them; the last layer is linear.
fn mlp(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let a = tape.matmul(h, w)?;
        h = tape.bias_add(a, b)?;
        if i + 1 < layers.len() {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

pub fn encode_on(tape: &mut Tape, pv: &ParamVars, dims: &Dims, x: Var) -> Result<(Var, Var)> {
    let width = tape.value(x).shape().get(1).copied();
    if width != Some(dims.input) {
        return Err(Error::Shape {
            op: "encode",
            left: tape.value(x).shape().to_vec(),
            right: vec![dims.input],
        });
    }
    let out = mlp(tape, &pv.encoder, x)?;
    let mu = tape.slice_cols(out, 0, dims.latent)?;
    let lv = tape.slice_cols(out, dims.latent, 2 * dims.latent)?;
    let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok((mu, lv))
}

pub fn decode_on(
    tape: &mut Tape,
    pv: &ParamVars,
    decoder_uses_teacher: bool,
    z: Var,
    teacher: Option<Var>,
) -> Result<Var> {
    let input = if decoder_uses_teacher {
        let t = teacher.ok_or_else(|| {
            Error::Config("decoder is teacher-conditioned but no teacher rows were given".into())
        })?;
        tape.concat_cols(z, t)?
    } else {
        z
    };
    mlp(tape, &pv.decoder, input)
}

/// Witness logits and log-probabilities from `z` alone.
pub fn witness_on(tape: &mut Tape, pv: &ParamVars, z: Var) -> Result<(Var, Var)> {
    let logits = mlp(tape, &pv.raw_head, z)?;
    let logp = tape.log_softmax_rows(logits)?;
    Ok((logits, logp))
}

/// Posterior mean and clamped log-variance.
pub fn encode(params: &ModelParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let (mu, lv) = encode_on(&mut tape, &pv, &params.dims, xv)?;
    Ok((tape.value(mu).clone(), tape.value(lv).clone()))
}

/// Reconstruction; `teacher_rows` is ignored unless the decoder is teacher-conditioned.
pub fn decode(params: &ModelParams, z: &Tensor, teacher_rows: Option<&AssignmentMatrix>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let zv = tape.constant(z.clone());
    let tv = match (params.decoder_uses_teacher, teacher_rows) {
        (true, Some(t)) => {
            if t.k() != params.dims.classes || t.n() != z.rows() {
                return Err(Error::Shape {
                    op: "decode",
                    left: vec![z.rows(), params.dims.classes],
                    right: vec![t.n(), t.k()],
                });
            }
            Some(tape.constant(Tensor::matrix(t.n(), t.k(), t.as_flat().to_vec())?))
        }
        _ => None,
    };
    let out = decode_on(&mut tape, &pv, params.decoder_uses_teacher, zv, tv)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone)]
pub struct RawWitness {
    pub probs: AssignmentMatrix,
    pub logits: Tensor,
    pub log_probs: Tensor,
}

/// The certified witness `softmax(g(z))`. Takes only `z`.
pub fn raw_witness(params: &ModelParams, z: &Tensor) -> Result<RawWitness> {
    let (_, l) = z.dims2("raw_witness")?;
    if l != params.dims.latent {
        return Err(Error::Shape {
            op: "raw_witness",
            left: z.shape().to_vec(),
            right: vec![params.dims.latent],
        });
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, false);
    let zv = tape.constant(z.clone());
    let (logits, logp) = witness_on(&mut tape, &pv, zv)?;
    let log_probs = tape.value(logp).clone();
    let probs = AssignmentMatrix::from_flat(
        z.rows(),
        params.dims.classes,
        log_probs.data().iter().map(|v| v.exp()).collect(),
    )?;
    Ok(RawWitness {
        probs,
        logits: tape.value(logits).clone(),
        log_probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_z: f64,
    pub lambda_align: f64,
    pub lambda_bal: f64,
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_z", self.beta_z),
            ("lambda_align", self.lambda_align),
            ("lambda_bal", self.lambda_bal),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_z: f64,
    pub align_raw: f64,
    pub balance: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Handles to the objective's nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub logits: Var,
    pub log_probs: Var,
    pub recon: Var,
    pub kl_z: Var,
    pub align_raw: Var,
    pub balance: Var,
    /// Everything but alignment: `recon + β·kl_z + λ_bal·balance`.
    pub base: Var,
    pub total: Var,
}

/// A recorded forward pass of the objective, ready for backward passes.
#[derive(Debug)]
pub struct LossGraph {
    pub tape: Tape,
    pub params: ParamVars,
    pub vars: LossVars,
}

impl LossGraph {
    /// Parameter gradients of `node`, in [`ModelParams::tensors`] order.
    pub fn param_grads(&self, node: Var) -> Result<Vec<Tensor>> {
        let g = self.tape.backward(node)?;
        Ok(self.params.collect(&self.tape, &g))
    }
}

fn rows_tensor(m: &AssignmentMatrix) -> Tensor {
    Tensor::matrix(m.n(), m.k(), m.as_flat().to_vec()).expect("shape")
}

fn check_batch(dims: &Dims, x: &Tensor, teacher_rows: &AssignmentMatrix, noise: &Tensor) -> Result<()> {
    let n = x.rows();
    if teacher_rows.n() != n || teacher_rows.k() != dims.classes {
        return Err(Error::Shape {
            op: "losses",
            left: vec![n, dims.classes],
            right: vec![teacher_rows.n(), teacher_rows.k()],
        });
    }
    if noise.shape() != [n, dims.latent] {
        return Err(Error::Shape {
            op: "losses",
            left: vec![n, dims.latent],
            right: noise.shape().to_vec(),
        });
    }
    Ok(())
}

/// Records the objective onto `tape` using already-registered parameters.
#[allow(clippy::too_many_arguments)]
pub fn record_losses(
    tape: &mut Tape,
    pv: &ParamVars,
    dims: &Dims,
    decoder_uses_teacher: bool,
    x: &Tensor,
    teacher_rows: &AssignmentMatrix,
    noise: &Tensor,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    check_batch(dims, x, teacher_rows, noise)?;
    let nf = x.rows() as f64;
    let xv = tape.constant(x.clone());
    let tv = tape.constant(rows_tensor(teacher_rows));

    let (mu, lv) = encode_on(tape, pv, dims, xv)?;
    let z = tape.gaussian_reparam(mu, lv, noise.clone())?;
    let xhat = decode_on(tape, pv, decoder_uses_teacher, z, Some(tv))?;
    let (logits, logp) = witness_on(tape, pv, z)?;

    let diff = tape.sub(xhat, xv)?;
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let recon = tape.scale(sse, 1.0 / nf);

    let mu2 = tape.square(mu);
    let var = tape.exp(lv);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, lv)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    let kl_z = tape.scale(s, 0.5 / nf);

    let t_ln_t: f64 = teacher_rows
        .as_flat()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let cross = tape.mul(tv, logp)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0 / nf);
    let align_raw = tape.add_scalar(neg, t_ln_t / nf);

    let probs = tape.exp(logp);
    let mean = tape.mean_rows(probs)?;
    let ln_mean = tape.ln(mean);
    let ent = tape.mul(mean, ln_mean)?;
    let neg_h = tape.sum(ent);
    let balance = tape.add_scalar(neg_h, (dims.classes as f64).ln());

    let kl_w = tape.scale(kl_z, weights.beta_z);
    let base0 = tape.add(recon, kl_w)?;
    let bal_w = tape.scale(balance, weights.lambda_bal);
    let base = tape.add(base0, bal_w)?;
    let al_w = tape.scale(align_raw, weights.lambda_align);
    let with_align = tape.add(base0, al_w)?;
    let total = tape.add(with_align, bal_w)?;

    Ok(LossVars {
        mu,
        logvar: lv,
        z,
        logits,
        log_probs: logp,
        recon,
        kl_z,
        align_raw,
        balance,
        base,
        total,
    })
}

/// Records the objective
/// `recon + β_z·KL_z + λ_align·KL(T‖S_raw) + λ_bal·KL(S̄‖Unif)` on a batch.
///
/// `recon` is the squared error summed over dimensions and averaged over the
/// batch; `KL_z` is the closed-form Gaussian KL to `N(0, I)`, batch-averaged.
/// `noise` supplies the reparameterization draws.
pub fn losses(
    params: &ModelParams,
    x: &Tensor,
    teacher_rows: &AssignmentMatrix,
    noise: &Tensor,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGraph)> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params, true);
    let vars = record_losses(
        &mut tape,
        &pv,
        &params.dims,
        params.decoder_uses_teacher,
        x,
        teacher_rows,
        noise,
        weights,
    )?;
    let value = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        recon: value(vars.recon),
        kl_z: value(vars.kl_z),
        align_raw: value(vars.align_raw),
        balance: value(vars.balance),
        total: value(vars.total),
        weights: *weights,
    };
    Ok((
        breakdown,
        LossGraph {
            tape,
            params: pv,
            vars,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            input: 5,
            latent: 3,
            classes: 4,
            hidden: 6,
        }
    }

    fn x_batch(n: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::matrix(n, 5, r.normals(n * 5)).unwrap()
    }

    fn one_hot_rows(n: usize, k: usize) -> AssignmentMatrix {
        let mut d = vec![0.0; n * k];
        for i in 0..n {
            d[i * k + i % k] = 1.0;
        }
        AssignmentMatrix::from_flat(n, k, d).unwrap()
    }

    #[test]
    fn zero_weights_encode_to_bias() {
        let mut p = ModelParams::zeros(dims(), true).unwrap();
        let last = p.encoder.last_mut().unwrap();
        last.b = Tensor::matrix(1, 6, vec![0.1, 0.2, 0.3, -1.0, 0.5, 20.0]).unwrap();
        let (mu, lv) = encode(&p, &x_batch(4, 1)).unwrap();
        for i in 0..4 {
            assert_eq!(mu.row(i), &[0.1, 0.2, 0.3]);
            assert_eq!(lv.row(i), &[-1.0, 0.5, 10.0]);
        }
    }

    #[test]
    fn encode_identical_rows_and_large_inputs() {
        let p = ModelParams::init(dims(), true, 3).unwrap();
        let row = vec![0.3, -0.2, 1.0, 0.0, 2.0];
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (mu, lv) = encode(&p, &x).unwrap();
        assert_eq!(mu.row(0), mu.row(2));
        assert_eq!(lv.row(0), lv.row(1));
        let big = Tensor::full(&[2, 5], 1e3);
        let (mu, lv) = encode(&p, &big).unwrap();
        assert!(mu.data().iter().chain(lv.data()).all(|v| v.is_finite()));
        assert!(lv.data().iter().all(|v| v.abs() <= LOGVAR_CLAMP));
        assert!(encode(&p, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn decoder_teacher_handling() {
        let plain = ModelParams::init(dims(), false, 1).unwrap();
        let z = Tensor::full(&[4, 3], 0.25);
        let a = decode(&plain, &z, None).unwrap();
        let b = decode(&plain, &z, Some(&one_hot_rows(4, 4))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 5]);

        let cond = ModelParams::init(dims(), true, 1).unwrap();
        assert!(matches!(decode(&cond, &z, None), Err(Error::Config(_))));
        // Constant z, varying T(x): the decoder output still varies.
        let out = decode(&cond, &z, Some(&one_hot_rows(4, 4))).unwrap();
        assert_ne!(out.row(0), out.row(1));
    }

    #[test]
    fn witness_is_z_only() {
        let p = ModelParams::init(dims(), true, 9).unwrap();
        let z = Tensor::full(&[6, 3], -0.7);
        let w = raw_witness(&p, &z).unwrap();
        for i in 1..6 {
            assert_eq!(w.probs.row(i), w.probs.row(0));
        }
        let zero = ModelParams::zeros(dims(), true).unwrap();
        let w = raw_witness(&zero, &z).unwrap();
        assert!(w.probs.rows().all(|r| r.iter().all(|&v| v == 0.25)));

        let mut r = Rng::new(4);
        let z = Tensor::matrix(5, 3, r.normals(15)).unwrap();
        let base = raw_witness(&p, &z).unwrap();
        let mut z2 = z.clone();
        z2.data_mut()[2 * 3 + 1] += 0.5;
        let moved = raw_witness(&p, &z2).unwrap();
        for i in 0..5 {
            if i == 2 {
                assert_ne!(base.probs.row(i), moved.probs.row(i));
            } else {
                assert_eq!(base.probs.row(i), moved.probs.row(i));
            }
        }
        assert!(raw_witness(&p, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn head_input_width_is_latent() {
        let p = ModelParams::init(dims(), true, 0).unwrap();
        assert_eq!(p.raw_head[0].w.rows(), p.dims.latent);
        let mut bad = p.clone();
        bad.raw_head[0] = Linear::zeros(p.dims.input, p.dims.hidden);
        assert!(bad.validate().is_err());
        p.validate().unwrap();
    }

    #[test]
    fn loss_examples() {
        let zero = ModelParams::zeros(dims(), true).unwrap();
        let n = 8;
        let w = LossWeights {
            beta_z: 1.0,
            lambda_align: 1.0,
            lambda_bal: 1.0,
        };
        let uniform = AssignmentMatrix::from_flat(n, 4, vec![0.25; n * 4]).unwrap();
        let (lb, _) = losses(&zero, &x_batch(n, 2), &uniform, &Tensor::zeros(&[n, 3]), &w).unwrap();
        assert_eq!(lb.kl_z, 0.0);
        assert!(lb.align_raw.abs() < 1e-15);
        assert!(lb.balance.abs() < 1e-15);

        let k8 = Dims { classes: 8, ..dims() };
        let zero8 = ModelParams::zeros(k8, true).unwrap();
        let (lb, _) = losses(&zero8, &x_batch(n, 2), &one_hot_rows(n, 8), &Tensor::zeros(&[n, 3]), &w).unwrap();
        assert!((lb.align_raw - 8f64.ln()).abs() < 1e-12);
        assert!((lb.align_raw - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn total_is_composed_exactly() {
        let p = ModelParams::init(dims(), true, 5).unwrap();
        let n = 7;
        let mut r = Rng::new(6);
        let noise = Tensor::matrix(n, 3, r.normals(n * 3)).unwrap();
        let w = LossWeights {
            beta_z: 4.0,
            lambda_align: 2.5,
            lambda_bal: 0.3,
        };
        let (lb, _) = losses(&p, &x_batch(n, 3), &one_hot_rows(n, 4), &noise, &w).unwrap();
        let want = lb.recon + w.beta_z * lb.kl_z + w.lambda_align * lb.align_raw + w.lambda_bal * lb.balance;
        assert_eq!(lb.total, want);
        for v in [lb.recon, lb.kl_z, lb.align_raw, lb.balance] {
            assert!(v >= -1e-9);
        }
        let bad = LossWeights { beta_z: -1.0, ..w };
        assert!(losses(&p, &x_batch(n, 3), &one_hot_rows(n, 4), &noise, &bad).is_err());
    }
}
