use collapse_cert::autodiff::Tensor;
use collapse_cert::metrics::{certify, tau_sensitivity, TargetKind};
use collapse_cert::prob::{log_softmax, teacher_mi, AssignmentMatrix};
use collapse_cert::rng::Rng;
use collapse_cert::trainer::{lambda_schedule, Schedule, Tier};
use collapse_cert::vae::{losses, raw_witness, Dims, LossWeights, ModelParams};
use proptest::prelude::*;

fn dims(latent: usize, classes: usize) -> Dims {
    Dims {
        input: 3,
        latent,
        classes,
        hidden: 5,
    }
}

fn soft_rows(rng: &mut Rng, n: usize, k: usize) -> AssignmentMatrix {
    let flat: Vec<f64> = (0..n)
        .flat_map(|_| log_softmax(&rng.normals(k).into_iter().map(|v| 3.0 * v).collect::<Vec<_>>()).unwrap())
        .collect();
    AssignmentMatrix::from_log_rows(n, k, &flat).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn equal_latents_give_bitwise_equal_witness_rows(
        seed in any::<u64>(), latent in 1usize..5, classes in 2usize..7, n in 2usize..12,
        z in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let p = ModelParams::init(dims(latent, classes), true, seed).unwrap();
        let row: Vec<f64> = z.iter().cycle().take(latent).copied().collect();
        let zt = Tensor::from_rows(&vec![row; n]).unwrap();
        let w = raw_witness(&p, &zt).unwrap();
        for i in 1..n {
            let same = w.probs.row(i).iter().zip(w.probs.row(0)).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn witness_below_teacher_mi_is_not_constant(seed in any::<u64>(), n in 2usize..30, classes in 2usize..6) {
        let mut rng = Rng::new(seed);
        let p = ModelParams::init(dims(2, classes), false, seed).unwrap();
        let z = Tensor::matrix(n, 2, rng.normals(2 * n).into_iter().map(|v| v * 2.0).collect()).unwrap();
        let w = raw_witness(&p, &z).unwrap();
        // Teacher rows near the witness, so the alignment cost is often below I_T.
        let mixed: Vec<f64> = w.probs.as_flat().iter().map(|v| 0.9 * v + 0.1 / classes as f64).collect();
        let t = AssignmentMatrix::from_flat(n, classes, mixed).unwrap();
        let r = certify(&w.log_probs, &t, 0.1, TargetKind::SearchedTeacher, 0).unwrap();
        if r.l_align_raw < teacher_mi(&t).unwrap() - 1e-9 {
            let mut max_dist: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d: f64 = w.probs.row(i).iter().zip(w.probs.row(j)).map(|(a, b)| (a - b).abs()).sum();
                    max_dist = max_dist.max(d);
                }
            }
            prop_assert!(max_dist > 0.0);
        }
    }

    #[test]
    fn schedule_is_pure_and_ordered(g in -5.0f64..5.0, base in 0.0f64..10.0, d1 in 0.0f64..10.0, d2 in 0.0f64..10.0, band in 0.0f64..1.0) {
        let s = Schedule { enabled: true, lambda_base: base, lambda_guard: base + d1, lambda_rescue: base + d1 + d2, delta_band: band };
        prop_assert!(s.validate().is_ok());
        let (tier, lambda) = lambda_schedule(g, &s);
        prop_assert_eq!(lambda_schedule(g, &s), (tier, lambda));
        let want = if g > band { Tier::Base } else if g > 0.0 { Tier::Guard } else { Tier::Rescue };
        prop_assert_eq!(tier, want);
        // Lower margins never get less alignment pressure.
        let (_, lower) = lambda_schedule(g - 0.5, &s);
        prop_assert!(lower >= lambda);
    }

    #[test]
    fn tau_table_is_offset_by_tau(seed in any::<u64>(), taus in prop::collection::vec(0.0f64..2.0, 1..6)) {
        let mut rng = Rng::new(seed);
        let t = soft_rows(&mut rng, 10, 4);
        let w = soft_rows(&mut rng, 10, 4);
        let logw = Tensor::matrix(10, 4, w.as_flat().iter().map(|v| v.ln()).collect()).unwrap();
        let r = certify(&logw, &t, 0.1, TargetKind::FixedT0, 1).unwrap();
        for (tau, g) in tau_sensitivity(&r, &taus).unwrap() {
            prop_assert_eq!(g, r.bare_margin - tau);
            prop_assert_eq!(g - r.g_tau, (r.bare_margin - tau) - (r.bare_margin - 0.1));
        }
    }
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let mut rng = Rng::new(17);
    let d = dims(3, 2);
    for trial in 0..5 {
        let mut p = ModelParams::zeros(d, false).unwrap();
        let mu: Vec<f64> = rng.normals(3).into_iter().map(|v| 1.5 * v).collect();
        let lv: Vec<f64> = (0..3).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let mut bias = mu.clone();
        bias.extend(&lv);
        p.encoder.last_mut().unwrap().b = Tensor::matrix(1, 6, bias).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        let rows = AssignmentMatrix::from_flat(1, 2, vec![0.5, 0.5]).unwrap();
        let w = LossWeights {
            beta_z: 1.0,
            lambda_align: 0.0,
            lambda_bal: 0.0,
        };
        let (lb, _) = losses(&p, &x, &rows, &Tensor::zeros(&[1, 3]), &w).unwrap();

        // E_q[ln q(z) − ln p(z)] by sampling z ~ q.
        let samples = 100_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            for j in 0..3 {
                let eps = rng.normal();
                let sd = (0.5 * lv[j]).exp();
                let z = mu[j] + sd * eps;
                acc += -0.5 * eps * eps - 0.5 * lv[j] + 0.5 * z * z;
            }
        }
        let mc = acc / samples as f64;
        assert!(
            (mc - lb.kl_z).abs() <= 0.01 * lb.kl_z,
            "trial {trial}: closed form {} vs Monte Carlo {mc}",
            lb.kl_z
        );
    }
}
