//! Probabilistic machinery of the VAE: reparameterized sampling, the
//! closed-form Gaussian KL, the RBF-kernel MMD, reconstruction losses, and
//! assembly of the negative ELBO / Info-VAE objective.
//!
//! All objectives are in minimization form: `total = recon + λ · divergence`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dParams, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Encoder output for a batch: posterior mean and log-variance, both `[batch, d]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianLatent {
    pub fn new(g: &Graph, mu: Var, logvar: Var) -> Result<Self> {
        let (sm, sl) = (g.shape(mu), g.shape(logvar));
        if sm != sl || sm.len() != 2 {
            return Err(Error::shape(
                "gaussian_latent",
                format!("mu {sm:?} and logvar {sl:?} must be equal [batch, d] shapes"),
            ));
        }
        if let Some(&lv) = g.value(logvar).data().iter().find(|lv| {
            let var = lv.exp();
            !(var.is_finite() && var > 0.0)
        }) {
            return Err(Error::domain(
                "gaussian_latent",
                format!("logvar {lv} gives a variance that is not finite and positive"),
            ));
        }
        Ok(GaussianLatent { mu, logvar })
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.mu)[0]
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.mu)[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Mmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconKind {
    Mse,
    #[serde(rename = "gaussian_nll")]
    GaussianNll,
    Dssim,
}

/// Uniform-window SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// Window 7 with `c1 = (0.01 L)²`, `c2 = (0.03 L)²`.
    pub fn for_dynamic_range(l: f64) -> Self {
        SsimParams {
            window: 7,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_dynamic_range(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub divergence: DivergenceKind,
    pub lambda: f64,
    pub recon: ReconKind,
    /// Monte Carlo samples of `z` per data point.
    pub mc_samples: usize,
    /// RBF bandwidths; `None` selects [`default_bandwidths`] for the latent size.
    pub mmd_bandwidths: Option<Vec<f64>>,
    pub ssim: SsimParams,
    pub dynamic_range: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            divergence: DivergenceKind::Kl,
            lambda: 1.0,
            recon: ReconKind::Mse,
            mc_samples: 1,
            mmd_bandwidths: None,
            ssim: SsimParams::default(),
            dynamic_range: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.mc_samples == 0 {
            return Err(Error::contract("mc_samples must be at least 1"));
        }
        if let Some(bw) = &self.mmd_bandwidths {
            if bw.is_empty() || bw.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
                return Err(Error::contract(format!("bandwidths must be positive, got {bw:?}")));
            }
        }
        if self.ssim.window % 2 == 0 {
            return Err(Error::contract(format!("ssim window must be odd, got {}", self.ssim.window)));
        }
        if !(self.ssim.c1 > 0.0 && self.ssim.c2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::contract("ssim constants and dynamic range must be positive"));
        }
        Ok(())
    }

    pub fn bandwidths(&self, latent_dim: usize) -> Vec<f64> {
        self.mmd_bandwidths
            .clone()
            .unwrap_or_else(|| default_bandwidths(latent_dim))
    }
}

/// `{0.25, 0.5, 1, 2, 4} · d`
pub fn default_bandwidths(latent_dim: usize) -> Vec<f64> {
    [0.25, 0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|s| s * latent_dim as f64)
        .collect()
}

/// Weight that puts `λ · divergence` on the scale of the reconstruction term
/// at initialization, clamped to `[1, 10⁴]`.
pub fn auto_lambda(recon0: f64, divergence0: f64) -> f64 {
    (recon0 / divergence0.max(1e-8)).clamp(1.0, 1e4)
}

/// Decomposed objective for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub divergence: f64,
    pub lambda: f64,
    pub total: f64,
    /// Batch-averaged KL of each latent dimension against `N(0, 1)`,
    /// reported for both divergence kinds.
    pub per_dim_kl: Vec<f64>,
}

impl LossReport {
    pub fn active_dims(&self, threshold: f64) -> usize {
        self.per_dim_kl.iter().filter(|&&k| k > threshold).count()
    }
}

/// `z = μ + exp(logvar / 2) ⊙ ε`, differentiable in μ and logvar.
pub fn reparameterize(g: &mut Graph, latent: &GaussianLatent, eps: Var) -> Result<Var> {
    if g.shape(eps) != g.shape(latent.mu) {
        return Err(Error::shape(
            "reparameterize",
            format!("eps {:?} vs mu {:?}", g.shape(eps), g.shape(latent.mu)),
        ));
    }
    let half = g.scale(latent.logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    g.add(latent.mu, noise)
}

/// KL of `N(μ, σ²)` against `N(0, 1)`, summed over dimensions and averaged
/// over the batch, together with the per-dimension batch averages.
///
/// Each element is `−½(1 + logvar − μ² − σ²)`, evaluated as
/// `½(μ² + expm1(logvar) − logvar)` so small terms do not cancel below zero.
pub fn kl_to_standard_normal(g: &mut Graph, latent: &GaussianLatent) -> Result<(Var, Vec<f64>)> {
    let mu2 = g.square(latent.mu);
    let em1 = g.expm1(latent.logvar);
    let gap = g.sub(em1, latent.logvar)?;
    let inner = g.add(mu2, gap)?;
    let elem = g.scale(inner, 0.5);
    let per_dim = g.mean_axis(elem, 0)?;
    let per_dim_values = g.value(per_dim).data().to_vec();
    Ok((g.sum(per_dim), per_dim_values))
}

/// Per-dimension KL averaged over the rows of plain `μ`/`logvar` arrays.
pub fn kl_per_dim(mu: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    if mu.shape() != logvar.shape() || mu.ndim() != 2 {
        return Err(Error::shape(
            "kl_per_dim",
            format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let (n, d) = (mu.shape()[0], mu.shape()[1]);
    let mut acc = vec![0.0; d];
    for (row_mu, row_lv) in mu.data().chunks(d).zip(logvar.data().chunks(d)) {
        for j in 0..d {
            let (m, lv) = (row_mu[j], row_lv[j]);
            acc[j] += 0.5 * (m * m + (lv.exp_m1() - lv));
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    Ok(acc)
}

fn pairwise_sq_dists(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (n, m) = (g.shape(a)[0], g.shape(b)[0]);
    let a2 = g.square(a);
    let na = g.sum_axis(a2, 1)?;
    let na = g.reshape(na, &[n, 1])?;
    let b2 = g.square(b);
    let nb = g.sum_axis(b2, 1)?;
    let nb = g.reshape(nb, &[1, m])?;
    let bt = g.transpose(b)?;
    let cross = g.matmul(a, bt)?;
    let cross2 = g.scale(cross, 2.0);
    let sum = g.add(na, nb)?;
    g.sub(sum, cross2)
}

fn mean_kernel(g: &mut Graph, sq: Var, bandwidths: &[f64]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &h in bandwidths {
        let arg = g.scale(sq, -1.0 / h);
        let k = g.exp(arg);
        let m = g.mean(k);
        acc = Some(match acc {
            None => m,
            Some(prev) => g.add(prev, m)?,
        });
    }
    acc.ok_or_else(|| Error::contract("at least one bandwidth is required"))
}

fn check_mmd_inputs(za: &[usize], zb: &[usize], bandwidths: &[f64]) -> Result<()> {
    if za.len() != 2 || zb.len() != 2 || za[1] != zb[1] {
        return Err(Error::shape(
            "mmd_rbf",
            format!("samples {za:?} and {zb:?} must be [n, d] with equal d"),
        ));
    }
    if za[0] < 2 || zb[0] < 2 {
        return Err(Error::contract(format!(
            "mmd needs at least two samples per set, got {} and {}",
            za[0], zb[0]
        )));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::contract(format!("bandwidths must be positive, got {bandwidths:?}")));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD under `Σ_h exp(−‖x − y‖² / h)`:
/// `mean k(z,z') + mean k(p,p') − 2 mean k(z,p)`, floored at zero.
pub fn mmd_rbf(g: &mut Graph, z: Var, prior: Var, bandwidths: &[f64]) -> Result<Var> {
    check_mmd_inputs(g.shape(z), g.shape(prior), bandwidths)?;
    let dzz = pairwise_sq_dists(g, z, z)?;
    let dpp = pairwise_sq_dists(g, prior, prior)?;
    let dzp = pairwise_sq_dists(g, z, prior)?;
    let kzz = mean_kernel(g, dzz, bandwidths)?;
    let kpp = mean_kernel(g, dpp, bandwidths)?;
    let kzp = mean_kernel(g, dzp, bandwidths)?;
    let same = g.add(kzz, kpp)?;
    let cross = g.scale(kzp, 2.0);
    let mmd = g.sub(same, cross)?;
    Ok(g.relu(mmd))
}

/// Direct evaluation of [`mmd_rbf`] without a graph, summing kernel values
/// over explicit coordinate differences. Suitable for large sample sets.
pub fn mmd_rbf_value(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    check_mmd_inputs(x.shape(), y.shape(), bandwidths)?;
    let d = x.shape()[1];
    let inv: Vec<f64> = bandwidths.iter().map(|h| -1.0 / h).collect();
    let kernel = |a: &[f64], b: &[f64]| -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        inv.iter().map(|c| (sq * c).exp()).sum()
    };
    let within = |t: &Tensor| -> f64 {
        let rows: Vec<&[f64]> = t.data().chunks(d).collect();
        let n = rows.len();
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += kernel(rows[i], rows[j]);
            }
        }
        let diag = n as f64 * bandwidths.len() as f64;
        (2.0 * off + diag) / (n * n) as f64
    };
    let mut cross = 0.0;
    for a in x.data().chunks(d) {
        for b in y.data().chunks(d) {
            cross += kernel(a, b);
        }
    }
    let cross = cross / (x.shape()[0] * y.shape()[0]) as f64;
    Ok((within(x) + within(y) - 2.0 * cross).max(0.0))
}

/// Views `[H,W]`, `[B,H,W]` or `[B,C,H,W]` data as `[planes, 1, H, W]`.
fn as_planes(g: &mut Graph, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    let (planes, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        4 => (s[0] * s[1], s[2], s[3]),
        _ => {
            return Err(Error::shape(
                "ssim",
                format!("expected 2D images (optionally batched), got {s:?}"),
            ))
        }
    };
    g.reshape(v, &[planes, 1, h, w])
}

/// Mean SSIM over all fully contained `window × window` patches, with uniform
/// window weights. Differentiable in both images.
pub fn ssim(g: &mut Graph, x: Var, y: Var, params: SsimParams) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", g.shape(x), g.shape(y)),
        ));
    }
    let x = as_planes(g, x)?;
    let y = as_planes(g, y)?;
    let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
    let win = params.window;
    if win % 2 == 0 || win > h.min(w) {
        return Err(Error::contract(format!(
            "ssim window {win} must be odd and fit a {h}x{w} image"
        )));
    }
    let kernel = g.constant(Tensor::full(&[1, 1, win, win], 1.0 / (win * win) as f64));
    let conv = Conv2dParams {
        stride: 1,
        padding: 0,
    };
    let mx = g.conv2d(x, kernel, conv)?;
    let my = g.conv2d(y, kernel, conv)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let exx = g.conv2d(xx, kernel, conv)?;
    let eyy = g.conv2d(yy, kernel, conv)?;
    let exy = g.conv2d(xy, kernel, conv)?;

    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let lum_num = g.scale(mxy, 2.0);
    let lum_num = g.add_scalar(lum_num, params.c1);
    let cs_num = g.scale(cxy, 2.0);
    let cs_num = g.add_scalar(cs_num, params.c2);
    let num = g.mul(lum_num, cs_num)?;

    let lum_den = g.add(mx2, my2)?;
    let lum_den = g.add_scalar(lum_den, params.c1);
    let cs_den = g.add(vx, vy)?;
    let cs_den = g.add_scalar(cs_den, params.c2);
    let den = g.mul(lum_den, cs_den)?;

    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Plain-value SSIM of two equally shaped 2D images `[H, W]` (or stacks of
/// them), using two-pass window statistics.
pub fn ssim_value(x: &Tensor, y: &Tensor, params: SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let s = x.shape();
    let (h, w) = match s.len() {
        2..=4 => (s[s.len() - 2], s[s.len() - 1]),
        _ => return Err(Error::shape("ssim", format!("expected 2D images, got {s:?}"))),
    };
    let win = params.window;
    if win % 2 == 0 || win > h.min(w) {
        return Err(Error::contract(format!(
            "ssim window {win} must be odd and fit a {h}x{w} image"
        )));
    }
    let plane = h * w;
    let count = (win * win) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for (px, py) in x.data().chunks(plane).zip(y.data().chunks(plane)) {
        for i in 0..=h - win {
            for j in 0..=w - win {
                let patch = |img: &[f64]| -> Vec<f64> {
                    (0..win)
                        .flat_map(|a| (0..win).map(move |b| (a, b)))
                        .map(|(a, b)| img[(i + a) * w + j + b])
                        .collect()
                };
                let (a, b) = (patch(px), patch(py));
                let ma = a.iter().sum::<f64>() / count;
                let mb = b.iter().sum::<f64>() / count;
                let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / count;
                let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / count;
                let cab = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / count;
                total += ((2.0 * ma * mb + params.c1) * (2.0 * cab + params.c2))
                    / ((ma * ma + mb * mb + params.c1) * (va + vb + params.c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Scalar reconstruction loss between data `x` and decoder output `x_hat`.
pub fn recon_loss(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    kind: ReconKind,
    ssim_params: SsimParams,
) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::shape(
            "recon_loss",
            format!("{:?} vs {:?}", g.shape(x), g.shape(x_hat)),
        ));
    }
    match kind {
        ReconKind::Mse => {
            let diff = g.sub(x, x_hat)?;
            let sq = g.square(diff);
            Ok(g.mean(sq))
        }
        ReconKind::GaussianNll => {
            // unit decoder variance: ½·MSE + ½·ln(2π) per element
            let diff = g.sub(x, x_hat)?;
            let sq = g.square(diff);
            let mse = g.mean(sq);
            let half = g.scale(mse, 0.5);
            Ok(g.add_scalar(half, 0.5 * (2.0 * PI).ln()))
        }
        ReconKind::Dssim => {
            let s = ssim(g, x, x_hat, ssim_params)?;
            let neg = g.neg(s);
            Ok(g.add_scalar(neg, 1.0))
        }
    }
}

/// Inputs to [`assemble_objective`] that live in the graph.
#[derive(Clone, Debug)]
pub struct ObjectiveInputs<'a> {
    pub x: Var,
    /// One decoder output per Monte Carlo sample.
    pub x_hats: &'a [Var],
    pub latent: GaussianLatent,
    /// The reparameterized samples that produced `x_hats`.
    pub z_samples: &'a [Var],
    /// Fresh draws from `N(0, I)`; required for the MMD divergence.
    pub prior_samples: Option<Var>,
}

/// Builds `recon + λ · divergence` and its decomposition.
///
/// With the KL divergence and `λ = 1` this is the negative ELBO; with the MMD
/// divergence it is the negated Info-VAE objective.
pub fn assemble_objective(
    g: &mut Graph,
    inputs: &ObjectiveInputs<'_>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    if inputs.x_hats.is_empty() || inputs.x_hats.len() != inputs.z_samples.len() {
        return Err(Error::contract(format!(
            "need one reconstruction per z sample, got {} and {}",
            inputs.x_hats.len(),
            inputs.z_samples.len()
        )));
    }

    let mut recon: Option<Var> = None;
    for &x_hat in inputs.x_hats {
        let r = recon_loss(g, inputs.x, x_hat, cfg.recon, cfg.ssim)?;
        recon = Some(match recon {
            None => r,
            Some(prev) => g.add(prev, r)?,
        });
    }
    let mut recon = recon.expect("non-empty");
    if inputs.x_hats.len() > 1 {
        recon = g.scale(recon, 1.0 / inputs.x_hats.len() as f64);
    }

    let (kl, per_dim_kl) = kl_to_standard_normal(g, &inputs.latent)?;
    let divergence = match cfg.divergence {
        DivergenceKind::Kl => kl,
        DivergenceKind::Mmd => {
            let prior = inputs.prior_samples.ok_or_else(|| {
                Error::contract("the MMD divergence needs samples from the prior")
            })?;
            let bw = cfg.bandwidths(inputs.latent.dim(g));
            let mut acc: Option<Var> = None;
            for &z in inputs.z_samples {
                let m = mmd_rbf(g, z, prior, &bw)?;
                acc = Some(match acc {
                    None => m,
                    Some(prev) => g.add(prev, m)?,
                });
            }
            let acc = acc.expect("non-empty");
            if inputs.z_samples.len() > 1 {
                g.scale(acc, 1.0 / inputs.z_samples.len() as f64)
            } else {
                acc
            }
        }
    };
    let weighted = g.scale(divergence, cfg.lambda);
    let total = g.add(recon, weighted)?;
    let report = LossReport {
        recon: g.value(recon).item(),
        divergence: g.value(divergence).item(),
        lambda: cfg.lambda,
        total: g.value(total).item(),
        per_dim_kl,
    };
    Ok((total, report))
}
