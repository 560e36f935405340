//! Acceptance suite. Runs every criterion, prints one `PASS`/`FAIL` line for
//! each, and exits non-zero if any failed.

use std::f64::consts::PI;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vaekit::analysis::{fit_glm, Link};
use vaekit::autodiff::finite_diff_check_many;
use vaekit::datasets::{gen_factor_images, save_dataset, LabeledDataset};
use vaekit::hypersphere::{ball_volume, radius_concentration_mc, shell_ratio};
use vaekit::networks::{ArchitectureSpec, VaeModel};
use vaekit::objective::{
    assemble_objective, default_bandwidths, kl_per_dim, mmd_rbf, mmd_rbf_value, reparameterize,
    ssim_value, DivergenceKind, GaussianLatent, ObjectiveConfig, ObjectiveInputs, SsimParams,
};
use vaekit::trainer::{diagnose_collapse, train, CollapseReport, TrainConfig};
use vaekit::{Graph, Tensor};

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normals(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn uniforms(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Full negative ELBO of a small model, differentiated with respect to every
/// parameter and compared with central differences.
fn gradient_check() -> Outcome {
    const LIMIT: Duration = Duration::from_secs(30);
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniforms(&mut rng, &[3, 1, 4, 4], 0.0, 1.0);
    let eps = normals(&mut rng, &[3, 2]);
    let cfg = ObjectiveConfig::default();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut kinked = 0;
    let specs = [
        ("mlp", ArchitectureSpec::mlp(vec![1, 4, 4], 2)),
        ("conv", ArchitectureSpec::conv(vec![1, 4, 4], 2)),
    ];
    for (_, spec) in specs {
        let model = VaeModel::init(spec, 5).unwrap();
        let points: Vec<Tensor> = model.params().map(|(_, t)| t.clone()).collect();
        let check = finite_diff_check_many(
            |g: &mut Graph, vars| {
                let params = model.bind_vars(g, vars.to_vec())?;
                let xv = g.constant(x.clone());
                let latent = model.encode(g, &params, xv)?;
                let ev = g.constant(eps.clone());
                let z = reparameterize(g, &latent, ev)?;
                let x_hat = model.decode(g, &params, z)?;
                let inputs = ObjectiveInputs {
                    x: xv,
                    x_hats: &[x_hat],
                    latent,
                    z_samples: &[z],
                    prior_samples: None,
                };
                Ok(assemble_objective(g, &inputs, &cfg)?.0)
            },
            &points,
            STEP,
        )
        .unwrap();
        worst = worst.max(check.max_rel_error);
        checked += check.checked;
        kinked += check.kinked.len();
    }
    let elapsed = start.elapsed();
    outcome(
        worst < TOL && elapsed < LIMIT && checked > 0,
        format!(
            "max rel error {worst:.2e} over {checked} parameters of an MLP and a conv model ({kinked} on a ReLU kink), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Closed-form KL against a Monte Carlo estimate of `E_q[log q − log p]`.
fn kl_oracle() -> Outcome {
    const PAIRS: usize = 50;
    const SAMPLES: usize = 100_000;
    const LIMIT: Duration = Duration::from_secs(10);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_z = 0.0f64;
    for _ in 0..PAIRS {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let var: f64 = rng.random_range(0.25..4.0);
        let lv = var.ln();
        let analytic = kl_per_dim(
            &Tensor::new(vec![1, 1], vec![mu]).unwrap(),
            &Tensor::new(vec![1, 1], vec![lv]).unwrap(),
        )
        .unwrap()[0];
        let sigma = var.sqrt();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..SAMPLES {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu + sigma * e;
            let log_ratio = -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
            sum += log_ratio;
            sum_sq += log_ratio * log_ratio;
        }
        let n = SAMPLES as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) * n / (n - 1.0) / n).sqrt();
        worst_z = worst_z.max((analytic - mean).abs() / se);
    }
    let elapsed = start.elapsed();
    outcome(
        worst_z < 3.0 && elapsed < LIMIT,
        format!(
            "{PAIRS} pairs, largest deviation {worst_z:.2} standard errors, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Zero noise returns μ exactly, and dz/dμ is the identity.
fn reparameterization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu_t = normals(&mut rng, &[16, 8]);
    let lv_t = normals(&mut rng, &[16, 8]);
    let mut g = Graph::new();
    let mu = g.param(mu_t.clone());
    let lv = g.param(lv_t);
    let latent = GaussianLatent::new(&g, mu, lv).unwrap();
    let eps = g.constant(Tensor::zeros(&[16, 8]));
    let z = reparameterize(&mut g, &latent, eps).unwrap();
    let exact = g.value(z).data() == mu_t.data();
    let total = g.sum(z);
    let grads = g.backward(total).unwrap();
    let unit = grads.wrt(mu).data().iter().all(|&v| v == 1.0);
    outcome(
        exact && unit,
        format!("z == mu bitwise: {exact}, dz/dmu == 1 everywhere: {unit}"),
    )
}

struct Run {
    report: CollapseReport,
    r_squared: f64,
    lambda: f64,
    elapsed: Duration,
}

fn ellipse_run(dataset: &LabeledDataset, divergence: DivergenceKind) -> Run {
    let start = Instant::now();
    let spec = ArchitectureSpec::mlp(vec![1, 16, 16], 8);
    let model = VaeModel::init(spec, 0).unwrap();
    let mut cfg = TrainConfig {
        epochs: 400,
        batch_size: 64,
        learning_rate: 1e-4,
        seed: 0,
        ..TrainConfig::default()
    };
    cfg.objective.divergence = divergence;
    match divergence {
        DivergenceKind::Kl => cfg.objective.lambda = 100.0,
        DivergenceKind::Mmd => cfg.auto_lambda = true,
    }
    let out = train(model, dataset, &cfg).unwrap();
    let report = diagnose_collapse(&out.model, dataset, cfg.collapse_kl_threshold).unwrap();
    let (mu, _) = out.model.encode_tensor(&dataset.samples).unwrap();
    let r_squared = fit_glm(&mu, dataset.targets.as_ref().unwrap(), Link::Identity)
        .ok()
        .and_then(|f| f.r_squared())
        .unwrap_or(0.0);
    Run {
        report,
        r_squared,
        lambda: out.lambda,
        elapsed: start.elapsed(),
    }
}

const TRAIN_LIMIT: Duration = Duration::from_secs(600);

fn kl_collapse(run: &Run) -> Outcome {
    let r = &run.report;
    outcome(
        r.active_dims == 0 && r.recon_variance_ratio < 0.05 && run.elapsed < TRAIN_LIMIT,
        format!(
            "KL x{}: active dims {}, variance ratio {:.2e}, {:.0}s",
            run.lambda,
            r.active_dims,
            r.recon_variance_ratio,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn mmd_escape(run: &Run) -> Outcome {
    let r = &run.report;
    outcome(
        !r.collapsed && r.active_dims >= 1 && run.r_squared >= 0.8 && run.elapsed < TRAIN_LIMIT,
        format!(
            "MMD lambda {:.3}: collapsed {}, active dims {}, variance ratio {:.3}, radius r^2 {:.3}, {:.0}s",
            run.lambda,
            r.collapsed,
            r.active_dims,
            r.recon_variance_ratio,
            run.r_squared,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn mmd_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = normals(&mut rng, &[64, 8]);
    let bw = default_bandwidths(8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xv2 = g.constant(x.clone());
    let m = mmd_rbf(&mut g, xv, xv2, &bw).unwrap();
    let self_graph = g.value(m).item();
    let self_value = mmd_rbf_value(&x, &x, &bw).unwrap();

    let a = normals(&mut rng, &[10_000, 8]);
    let b = normals(&mut rng, &[10_000, 8]);
    let between = mmd_rbf_value(&a, &b, &bw).unwrap();
    outcome(
        self_graph.abs() <= 1e-12 && self_value.abs() <= 1e-12 && between < 0.01,
        format!(
            "mmd(X,X) = {self_graph:.1e} / {self_value:.1e}, two 1e4-point N(0,I_8) draws {between:.2e}"
        ),
    )
}

fn ssim_properties() -> Outcome {
    let params = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniforms(&mut rng, &[16, 16], 0.0, 1.0);
    let identity = ssim_value(&x, &x, params).unwrap();

    let dark = Tensor::zeros(&[16, 16]);
    let grey = Tensor::full(&[16, 16], 0.5);
    let constant = ssim_value(&dark, &grey, params).unwrap();
    let expected = params.c1 / (0.25 + params.c1);

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..1000 {
        let a = uniforms(&mut rng, &[12, 12], 0.0, 1.0);
        let b = if i % 4 == 0 {
            a.map(|v| 1.0 - v)
        } else {
            uniforms(&mut rng, &[12, 12], 0.0, 1.0)
        };
        let d = 1.0 - ssim_value(&a, &b, params).unwrap();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    outcome(
        (identity - 1.0).abs() <= 1e-12 && (constant - expected).abs() <= 1e-9 && lo >= 0.0 && hi <= 2.0,
        format!(
            "ssim(x,x) = {identity}, constant pair {constant:.6e} vs {expected:.6e}, dssim over 1000 pairs in [{lo:.3}, {hi:.3}]"
        ),
    )
}

fn hypersphere() -> Outcome {
    let s100 = shell_ratio(100, 1.0, 1e-3).unwrap();
    let s6000 = shell_ratio(6000, 1.0, 1e-3).unwrap();
    let mc = radius_concentration_mc(10, 100_000, 0).unwrap();
    let v2 = ball_volume(2, 1.0).unwrap();
    let v3 = ball_volume(3, 1.0).unwrap();
    let pass = (s100.ratio_exact - 0.09521).abs() <= 1e-5
        && (s100.ratio_approx - 0.1).abs() <= 1e-12
        && s6000.ratio_exact > 0.99
        && mc.passes_dkw()
        && (v2 - PI).abs() <= 1e-12
        && (v3 - 4.0 * PI / 3.0).abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "shell(100) {:.5} (approx {}), shell(6000) {:.5}, n=10 KS {:.4} vs DKW {:.4}, V2 {v2}, V3 {v3}",
            s100.ratio_exact, s100.ratio_approx, s6000.ratio_exact, mc.ks_statistic, mc.dkw_bound
        ),
    )
}

fn glm() -> Outcome {
    let (n, d) = (1000, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = normals(&mut rng, &[n, d]);
    let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let intercept = 0.7;
    let y: Vec<f64> = z
        .data()
        .chunks(d)
        .map(|row| intercept + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let fit = fit_glm(&z, &y, Link::Identity).unwrap();
    let coef_err = fit.coefficients[..d]
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a - b).abs())
        .fold((fit.intercept() - intercept).abs(), f64::max);
    let r2 = fit.r_squared().unwrap();

    let mut shuffled = y.clone();
    shuffled.shuffle(&mut rng);
    let r2_perm = fit_glm(&z, &shuffled, Link::Identity).unwrap().r_squared().unwrap();
    outcome(
        coef_err <= 1e-8 && (r2 - 1.0).abs() <= 1e-12 && r2_perm < 0.05,
        format!("coefficient error {coef_err:.1e}, r^2 {r2}, permuted r^2 {r2_perm:.4}"),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ellipse.vaed");
    save_dataset(&gen_factor_images(200, 16, 4).unwrap(), &data).unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let cfg = dir.path().join(format!("{name}.toml"));
        fs::write(
            &cfg,
            format!(
                "[data]\ntrain = \"ellipse.vaed\"\n\n[model]\nkind = \"mlp\"\nlatent_dim = 4\nhidden = [32, 16]\n\n\
                 [objective]\ndivergence = \"mmd\"\nlambda = \"auto\"\n\n[train]\nepochs = 3\nbatch_size = 32\nseed = 5\n\n\
                 [output]\ndir = \"{name}\"\n"
            ),
        )
        .unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_vaekit"))
            .arg("train")
            .arg(&cfg)
            .env_remove("VAE_SEED")
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(
                false,
                format!("train exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)),
            );
        }
        let out = dir.path().join(name);
        runs.push((
            fs::read(out.join("metrics.csv")).unwrap(),
            fs::read(out.join("checkpoint.vaec")).unwrap(),
        ));
    }
    let metrics = runs[0].0 == runs[1].0;
    let checkpoint = runs[0].1 == runs[1].1;
    outcome(
        metrics && checkpoint,
        format!(
            "metrics identical: {metrics} ({} bytes), checkpoint identical: {checkpoint} ({} bytes)",
            runs[0].0.len(),
            runs[0].1.len()
        ),
    )
}

fn main() {
    let ellipse = gen_factor_images(2000, 16, 1).unwrap();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient correctness", Box::new(gradient_check)),
        ("closed-form KL", Box::new(kl_oracle)),
        ("reparameterization", Box::new(reparameterization)),
        ("KL collapse", Box::new(|| kl_collapse(&ellipse_run(&ellipse, DivergenceKind::Kl)))),
        ("MMD escape", Box::new(|| mmd_escape(&ellipse_run(&ellipse, DivergenceKind::Mmd)))),
        ("MMD estimator", Box::new(mmd_properties)),
        ("SSIM", Box::new(ssim_properties)),
        ("hypersphere", Box::new(hypersphere)),
        ("GLM read-out", Box::new(glm)),
        ("CLI determinism", Box::new(cli_determinism)),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| outcome(false, "panicked".into()));
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} {:<22} {} {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
