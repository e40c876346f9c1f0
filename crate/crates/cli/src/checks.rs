use clap::Args;
use collapse_cert::autodiff::gradcheck;
use collapse_cert::prob::{decomposition_residual, log_softmax, softmax};
use collapse_cert::trainer::free_logit_flow_check;
use collapse_cert::vae::{record_losses, Dims, LossWeights, ModelParams, ParamVars};
use collapse_cert::{AssignmentMatrix, Rng, Tensor};

use crate::{fail, CliResult};

#[derive(Args)]
pub struct GradcheckArgs {
    /// Number of random model configurations.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
pub struct IdentityArgs {
    /// Random assignment matrices for the decomposition identity.
    #[arg(long, default_value_t = 10_000)]
    cases: usize,
    /// Free-logit flow instances.
    #[arg(long, default_value_t = 20)]
    flows: usize,
    #[arg(long, default_value_t = 2000)]
    flow_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    flow_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn random_rows(rng: &mut Rng, n: usize, k: usize) -> CliResult<AssignmentMatrix> {
    let mut flat = Vec::with_capacity(n * k);
    for _ in 0..n {
        let logits: Vec<f64> = rng.normals(k).into_iter().map(|v| 2.0 * v).collect();
        flat.extend(log_softmax(&logits)?);
    }
    Ok(AssignmentMatrix::from_log_rows(n, k, &flat)?)
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.cases == 0 {
        return Err(fail(2, "--cases must be >= 1"));
    }
    let mut rng = Rng::new(a.seed);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for case in 0..a.cases {
        let dims = Dims {
            input: 2 + rng.below(3),
            latent: 1 + rng.below(3),
            classes: 2 + rng.below(3),
            hidden: 2 + rng.below(4),
        };
        let n = 2 + rng.below(5);
        let uses_teacher = rng.below(2) == 0;
        let params = ModelParams::init(dims, uses_teacher, rng.next_u64())?;
        let x = Tensor::matrix(n, dims.input, rng.normals(n * dims.input))?;
        let rows = random_rows(&mut rng, n, dims.classes)?;
        let noise = Tensor::matrix(n, dims.latent, rng.normals(n * dims.latent))?;
        let weights = LossWeights {
            beta_z: 0.5 + 4.0 * rng.uniform(),
            lambda_align: 10.0 * rng.uniform(),
            lambda_bal: 2.0 * rng.uniform(),
        };
        let gc = gradcheck::check(&params.to_vec(), gradcheck::STEP, |tape, vars| {
            let pv = ParamVars::from_vars(&params, vars)?;
            Ok(record_losses(tape, &pv, &dims, uses_teacher, &x, &rows, &noise, &weights)?.total)
        })?;
        println!(
            "case {case:>3}: n={n} dims={}x{}x{}x{} entries={} max_rel_err={:.3e}",
            dims.input, dims.hidden, dims.latent, dims.classes, gc.entries, gc.max_rel_err
        );
        worst = worst.max(gc.max_rel_err);
        entries += gc.entries;
    }
    println!("{} cases, {entries} entries, max relative error {worst:.3e} (tol {:.1e})", a.cases, a.tol);
    if worst > a.tol {
        return Err(fail(6, format!("gradient check failed: {worst:.3e} > {:.1e}", a.tol)));
    }
    Ok(())
}

pub fn identity(a: &IdentityArgs) -> CliResult<()> {
    let mut rng = Rng::new(a.seed);
    let mut residual: f64 = 0.0;
    for _ in 0..a.cases {
        let n = 1 + rng.below(24);
        let k = 2 + rng.below(7);
        let rows = random_rows(&mut rng, n, k)?;
        let alpha = softmax(&rng.normals(k).into_iter().map(|v| 2.0 * v).collect::<Vec<_>>())?;
        residual = residual.max(decomposition_residual(&rows, &alpha)?);
    }
    println!("decomposition: {} cases, max residual {residual:.3e}", a.cases);

    let mut increase = f64::NEG_INFINITY;
    let mut last: f64 = 0.0;
    for _ in 0..a.flows {
        let n = 1 + rng.below(64);
        let k = 2 + rng.below(7);
        let rows = random_rows(&mut rng, n, k)?;
        let tr = free_logit_flow_check(&rows, a.flow_steps, a.flow_lr)?;
        increase = increase.max(tr.max_increase);
        last = last.max(*tr.alignment.last().expect("steps >= 2"));
    }
    if a.flows > 0 {
        println!(
            "free-logit flow: {} instances x {} steps, max step increase {increase:.3e}, max final alignment {last:.3e}",
            a.flows, a.flow_steps
        );
    }

    let mut problems = Vec::new();
    if residual > 1e-10 {
        problems.push(format!("decomposition residual {residual:.3e} > 1e-10"));
    }
    if a.flows > 0 && increase > 1e-12 {
        problems.push(format!("flow alignment increased by {increase:.3e}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(fail(6, problems.join("; ")))
    }
}
