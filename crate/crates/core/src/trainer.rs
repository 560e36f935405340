//! Minibatch Adam training of the VAE objective, posterior-collapse
//! diagnostics, and the `VAEC` checkpoint format.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::networks::VaeModel;
use crate::objective::{
    assemble_objective, auto_lambda, kl_per_dim, reparameterize, DivergenceKind, LossReport,
    ObjectiveConfig, ObjectiveInputs,
};

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

/// Reconstructions whose spread falls below this fraction of the data's
/// spread count as collapsed to the mean.
pub const COLLAPSE_VARIANCE_RATIO: f64 = 0.05;

/// Rows per forward pass when encoding whole datasets.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Replace `objective.lambda` with [`auto_lambda`] evaluated on the first
    /// batch at initialization.
    pub auto_lambda: bool,
    /// Per-dimension KL (nats) above which a latent dimension counts as active.
    pub collapse_kl_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            objective: ObjectiveConfig::default(),
            auto_lambda: false,
            collapse_kl_threshold: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::contract(format!("adam {name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::contract("adam eps must be positive"));
        }
        if !(self.collapse_kl_threshold >= 0.0) {
            return Err(Error::contract("collapse threshold must be ≥ 0"));
        }
        self.objective.validate()
    }
}

/// Adam moments, one pair per parameter tensor in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn for_model(model: &VaeModel) -> Self {
        let zeros: Vec<Tensor> = model.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step_count: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update, `θ ← θ − lr · m̂ / (√v̂ + eps)`.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::contract(format!(
            "adam got {} parameters, {} gradients, {}/{} moments",
            params.len(),
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape()
            || p.shape() != state.first_moment[i].shape()
            || p.shape() != state.second_moment[i].shape()
        {
            return Err(Error::contract(format!(
                "parameter {i} {:?} misaligned with gradient {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Per-batch objective evaluation with gradients.
struct Evaluated {
    report: LossReport,
    grads: Vec<Tensor>,
}

fn draw_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Builds the objective for `batch` with fresh noise from `rng`: `mc_samples`
/// draws of `ε` (then prior samples for MMD), each `[B, d]`.
fn evaluate(
    model: &VaeModel,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<Evaluated> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, with_grads);
    let x = g.constant(batch.clone());
    let latent = model.encode(&mut g, &params, x)?;
    let shape = g.shape(latent.mu).to_vec();
    let mut zs = Vec::with_capacity(cfg.mc_samples);
    let mut x_hats = Vec::with_capacity(cfg.mc_samples);
    for _ in 0..cfg.mc_samples {
        let eps = g.constant(draw_normal(rng, &shape));
        let z = reparameterize(&mut g, &latent, eps)?;
        x_hats.push(model.decode(&mut g, &params, z)?);
        zs.push(z);
    }
    let prior_samples = match cfg.divergence {
        DivergenceKind::Mmd => Some(g.constant(draw_normal(rng, &shape))),
        DivergenceKind::Kl => None,
    };
    let inputs = ObjectiveInputs {
        x,
        x_hats: &x_hats,
        latent,
        z_samples: &zs,
        prior_samples,
    };
    let (total, report) = assemble_objective(&mut g, &inputs, cfg)?;
    let grads = if with_grads && report.total.is_finite() {
        let mut all = g.backward(total)?;
        params
            .vars()
            .iter()
            .map(|&v| all.take(v).expect("trainable parameter"))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Evaluated { report, grads })
}

fn non_finite_term(report: &LossReport, grads: &[Tensor]) -> Option<&'static str> {
    if !report.recon.is_finite() {
        Some("reconstruction")
    } else if !report.divergence.is_finite() {
        Some("divergence")
    } else if !report.total.is_finite() {
        Some("total")
    } else if grads.iter().any(|g| !g.is_finite()) {
        Some("gradient")
    } else {
        None
    }
}

/// Resumable training loop state: optimizer moments, the resolved `λ`, and
/// the random stream that drives shuffling and `ε` sampling.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    state: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    batch: usize,
}

impl Trainer {
    /// Validates the configuration and resolves `λ` (see [`TrainConfig::auto_lambda`]).
    pub fn new(model: &VaeModel, dataset: &LabeledDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::contract("cannot train on an empty dataset"));
        }
        if dataset.sample_shape() != model.spec().input_shape.as_slice() {
            return Err(Error::shape(
                "train",
                format!(
                    "dataset samples {:?} do not match model input {:?}",
                    dataset.sample_shape(),
                    model.spec().input_shape
                ),
            ));
        }
        let mut objective = cfg.objective.clone();
        if cfg.auto_lambda {
            let head = dataset.samples.slice_rows(0, cfg.batch_size.min(dataset.len()))?;
            let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a3b_da00_0001);
            let eval = evaluate(model, &head, &objective, &mut probe_rng, false)?;
            objective.lambda = auto_lambda(eval.report.recon, eval.report.divergence);
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            state: AdamState::for_model(model),
            cfg,
            objective,
            rng,
            epoch: 0,
            batch: 0,
        })
    }

    /// Reassembles a trainer from saved pieces; `lambda` is used as-is.
    pub fn from_parts(cfg: TrainConfig, lambda: f64, state: AdamState, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut objective = cfg.objective.clone();
        objective.lambda = lambda;
        objective.validate()?;
        Ok(Trainer {
            cfg,
            objective,
            state,
            rng,
            epoch: 0,
            batch: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.objective.lambda
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One Monte Carlo gradient step on `batch` (`[B, input_shape…]`).
    pub fn step(&mut self, model: &mut VaeModel, batch: &Tensor) -> Result<LossReport> {
        let eval = evaluate(model, batch, &self.objective, &mut self.rng, true).map_err(|e| match e {
            Error::Domain { op: "gaussian_latent", .. } => Error::NonFinite {
                epoch: self.epoch,
                batch: self.batch,
                term: "posterior variance",
            },
            other => other,
        })?;
        if let Some(term) = non_finite_term(&eval.report, &eval.grads) {
            return Err(Error::NonFinite {
                epoch: self.epoch,
                batch: self.batch,
                term,
            });
        }
        adam_step(model.params_mut(), &eval.grads, &mut self.state, &AdamParams::from(&self.cfg))?;
        self.batch += 1;
        Ok(eval.report)
    }

    /// Shuffles the dataset, steps through every minibatch (the last may be
    /// short), and returns the sample-weighted mean report.
    pub fn run_epoch(&mut self, model: &mut VaeModel, dataset: &LabeledDataset) -> Result<LossReport> {
        let n = dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        self.batch = 0;
        let d = model.latent_dim();
        let (mut recon, mut div) = (0.0, 0.0);
        let mut per_dim = vec![0.0; d];
        for idx in order.chunks(self.cfg.batch_size) {
            let batch = dataset.samples.select_rows(idx)?;
            let r = self.step(model, &batch)?;
            let w = idx.len() as f64 / n as f64;
            recon += w * r.recon;
            div += w * r.divergence;
            for (acc, v) in per_dim.iter_mut().zip(&r.per_dim_kl) {
                *acc += w * v;
            }
        }
        self.epoch += 1;
        let lambda = self.objective.lambda;
        Ok(LossReport {
            recon,
            divergence: div,
            lambda,
            total: recon + lambda * div,
            per_dim_kl: per_dim,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub history: Vec<LossReport>,
    pub state: AdamState,
    pub lambda: f64,
}

/// Runs `cfg.epochs` epochs. A fixed `(model, dataset, cfg)` reproduces the
/// history bit for bit.
pub fn train(model: VaeModel, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, dataset, cfg, |_, _| {})
}

/// [`train`], calling `on_epoch(epoch_number, report)` after every epoch.
pub fn train_with_progress(
    model: VaeModel,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome> {
    let mut model = model;
    let mut trainer = Trainer::new(&model, dataset, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let report = trainer.run_epoch(&mut model, dataset)?;
        on_epoch(epoch, &report);
        history.push(report);
    }
    Ok(TrainOutcome {
        lambda: trainer.lambda(),
        state: trainer.state,
        model,
        history,
    })
}

/// Objective of a frozen batch with noise from `rng`, without gradients.
pub fn evaluate_batch(
    model: &VaeModel,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    evaluate(model, batch, cfg, rng, false).map(|e| e.report)
}

/// Evidence that the posterior has (or has not) collapsed onto the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub per_dim_kl: Vec<f64>,
    pub active_dims: usize,
    pub mean_mu_norm: f64,
    pub mean_sigma: f64,
    /// Total per-feature variance of `decode(μ(x))` across the dataset over
    /// that of the inputs; zero when the inputs themselves do not vary.
    pub recon_variance_ratio: f64,
    pub collapsed: bool,
}

fn total_variance(rows: &[f64], n: usize) -> f64 {
    let width = rows.len() / n;
    let mut mean = vec![0.0; width];
    for row in rows.chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = 0.0;
    for row in rows.chunks(width) {
        for (m, v) in mean.iter().zip(row) {
            var += (v - m) * (v - m);
        }
    }
    var / n as f64
}

/// Encodes the whole dataset, decodes the posterior means, and reports
/// per-dimension KL and reconstruction spread. Collapsed means no active
/// dimension or a variance ratio below [`COLLAPSE_VARIANCE_RATIO`].
pub fn diagnose_collapse(model: &VaeModel, dataset: &LabeledDataset, kl_threshold: f64) -> Result<CollapseReport> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot diagnose on an empty dataset"));
    }
    let n = dataset.len();
    let mut mus = Vec::new();
    let mut logvars = Vec::new();
    let mut recons = Vec::with_capacity(dataset.samples.numel());
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let chunk = dataset.samples.slice_rows(start, len)?;
        let (mu, logvar) = model.encode_tensor(&chunk)?;
        recons.extend_from_slice(model.decode_tensor(&mu)?.data());
        mus.push(mu);
        logvars.push(logvar);
        start += len;
    }
    let mu = Tensor::concat_rows(&mus)?;
    let logvar = Tensor::concat_rows(&logvars)?;
    let per_dim_kl = kl_per_dim(&mu, &logvar)?;
    let active_dims = per_dim_kl.iter().filter(|&&k| k > kl_threshold).count();
    let d = model.latent_dim();
    let mean_mu_norm = mu
        .data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64;
    let mean_sigma = logvar.data().iter().map(|lv| (0.5 * lv).exp()).sum::<f64>() / logvar.numel() as f64;
    let input_var = total_variance(dataset.samples.data(), n);
    let recon_var = total_variance(&recons, n);
    let recon_variance_ratio = if input_var > 0.0 { recon_var / input_var } else { 0.0 };
    Ok(CollapseReport {
        collapsed: active_dims == 0 || recon_variance_ratio < COLLAPSE_VARIANCE_RATIO,
        per_dim_kl,
        active_dims,
        mean_mu_norm,
        mean_sigma,
        recon_variance_ratio,
    })
}

/// One CSV row per epoch: `epoch,recon,divergence,lambda,total,active_dims`.
pub fn write_metrics_csv<W: Write>(history: &[LossReport], kl_threshold: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "recon", "divergence", "lambda", "total", "active_dims"])
        .map_err(csv_err)?;
    for (i, r) in history.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.recon.to_string(),
            r.divergence.to_string(),
            r.lambda.to_string(),
            r.total.to_string(),
            r.active_dims(kl_threshold).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ArchitectureSpec;

    fn hp() -> AdamParams {
        AdamParams::from(&TrainConfig::default())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [Tensor::from_vec(vec![1.0, -2.0])];
        let mut state = AdamState {
            first_moment: vec![Tensor::zeros(&[2])],
            second_moment: vec![Tensor::zeros(&[2])],
            step_count: 0,
        };
        adam_step(p.iter_mut(), &[Tensor::zeros(&[2])], &mut state, &hp()).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [Tensor::from_vec(vec![0.0, 0.0, 0.0])];
        let mut state = AdamState {
            first_moment: vec![Tensor::zeros(&[3])],
            second_moment: vec![Tensor::zeros(&[3])],
            step_count: 0,
        };
        let g = Tensor::from_vec(vec![3.0, -0.02, 150.0]);
        adam_step(p.iter_mut(), std::slice::from_ref(&g), &mut state, &hp()).unwrap();
        // m̂ = g and v̂ = g², so each update is lr·g/(|g| + eps)
        for (w, gv) in p[0].data().iter().zip(g.data()) {
            let expected = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15);
            assert!((w.abs() - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn misaligned_gradients_rejected() {
        let mut p = [Tensor::zeros(&[2])];
        let mut state = AdamState {
            first_moment: vec![Tensor::zeros(&[2])],
            second_moment: vec![Tensor::zeros(&[2])],
            step_count: 0,
        };
        assert!(adam_step(p.iter_mut(), &[Tensor::zeros(&[3])], &mut state, &hp()).is_err());
        assert!(adam_step(p.iter_mut(), &[], &mut state, &hp()).is_err());
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.adam_beta2 = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hand_set_prior_model_is_collapsed() {
        let mut model = VaeModel::init(ArchitectureSpec::mlp(vec![2], 2), 0).unwrap();
        model.params_mut().for_each(|t| t.data_mut().fill(0.0));
        let ds = crate::datasets::gen_spiral(20, 0.1, 1).unwrap();
        let rep = diagnose_collapse(&model, &ds, 0.01).unwrap();
        assert!(rep.per_dim_kl.iter().all(|&k| k == 0.0));
        assert_eq!(rep.active_dims, 0);
        assert_eq!(rep.recon_variance_ratio, 0.0);
        assert_eq!(rep.mean_sigma, 1.0);
        assert!(rep.collapsed);
    }

    #[test]
    fn empty_dataset_errors() {
        let model = VaeModel::init(ArchitectureSpec::mlp(vec![2], 2), 0).unwrap();
        let ds = crate::datasets::gen_spiral(4, 0.0, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(&model, &ds, cfg).is_err());
    }
}
