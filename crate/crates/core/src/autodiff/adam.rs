use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("adam: parameter/gradient/state count mismatch"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::full(&[2, 2], 0.5)];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2, 2])], &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let hyper = AdamHyper::default();
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let g = [Tensor::scalar(3.7)];
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].item();
            adam_step(&mut p, &g, &mut s, &hyper).unwrap();
            last = before - p[0].item();
        }
        assert!((last - hyper.lr).abs() < 0.05 * hyper.lr, "step {last}");
    }

    #[test]
    fn deterministic_and_checks_shapes() {
        let hyper = AdamHyper::default();
        let run = || {
            let mut p = vec![Tensor::full(&[3], 1.0)];
            let mut s = AdamState::new(&p);
            for i in 0..10 {
                let g = [Tensor::full(&[3], (i as f64).sin())];
                adam_step(&mut p, &g, &mut s, &hyper).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut p = vec![Tensor::full(&[3], 1.0)];
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &hyper).is_err());
    }
}
