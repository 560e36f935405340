//! Interpretable read-out of latent codes: a generalized linear model from
//! latents to a scalar target, and per-dimension Pearson correlations.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::trainer::csv_err;

/// Ridge added to the Gram diagonal purely to keep the solve well posed.
pub const GRAM_RIDGE: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;
/// Smallest admissible `pivot² / max Gram diagonal` in the Cholesky factor.
const MIN_RELATIVE_PIVOT: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FitQuality {
    RSquared(f64),
    Deviance(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmFit {
    pub link: Link,
    /// One weight per latent dimension, then the intercept.
    pub coefficients: Vec<f64>,
    pub quality: FitQuality,
    pub per_dim_correlation: Vec<f64>,
    /// Newton iterations (1 for the identity link).
    pub iterations: usize,
}

impl GlmFit {
    pub fn r_squared(&self) -> Option<f64> {
        match self.quality {
            FitQuality::RSquared(r) => Some(r),
            FitQuality::Deviance(_) => None,
        }
    }

    pub fn deviance(&self) -> Option<f64> {
        match self.quality {
            FitQuality::Deviance(d) => Some(d),
            FitQuality::RSquared(_) => None,
        }
    }

    pub fn intercept(&self) -> f64 {
        *self.coefficients.last().expect("intercept present")
    }

    /// Linear predictor `Xβ` for each row of `latents`.
    pub fn linear_predictor(&self, latents: &Tensor) -> Result<Vec<f64>> {
        let d = self.coefficients.len() - 1;
        if latents.ndim() != 2 || latents.shape()[1] != d {
            return Err(Error::shape(
                "glm_predict",
                format!("latents {:?} for {d} coefficients", latents.shape()),
            ));
        }
        Ok(latents
            .data()
            .chunks(d)
            .map(|row| {
                row.iter()
                    .zip(&self.coefficients)
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
                    + self.intercept()
            })
            .collect())
    }

    /// Mean response: `Xβ` (identity) or `σ(Xβ)` (logistic).
    pub fn predict(&self, latents: &Tensor) -> Result<Vec<f64>> {
        let eta = self.linear_predictor(latents)?;
        Ok(match self.link {
            Link::Identity => eta,
            Link::Logistic => eta.into_iter().map(sigmoid).collect(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Design matrix with a trailing column of ones.
fn design(latents: &Tensor) -> DMatrix<f64> {
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    let x = latents.data();
    DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i * d + j] } else { 1.0 })
}

/// Solves `(XᵀWX + εI) β = rhs`.
fn solve_ridged(x: &DMatrix<f64>, weights: Option<&DVector<f64>>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let mut gram = match weights {
        Some(w) => {
            let mut xw = x.clone();
            for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
                row *= wi;
            }
            x.transpose() * xw
        }
        None => x.transpose() * x,
    };
    for i in 0..gram.nrows() {
        gram[(i, i)] += GRAM_RIDGE;
    }
    let max_diag = gram.diagonal().iter().cloned().fold(0.0, f64::max);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("Gram matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().map(|p| p * p).fold(f64::INFINITY, f64::min);
    if !(min_pivot / max_diag >= MIN_RELATIVE_PIVOT) {
        return Err(Error::Singular(format!(
            "design is rank deficient beyond the ridge (relative pivot {:.3e})",
            min_pivot / max_diag
        )));
    }
    let beta = chol.solve(rhs);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Singular("non-finite coefficients".into()));
    }
    Ok(beta)
}

/// Fits `E[target] = g⁻¹(Σ βᵢ zᵢ + β₀)`.
///
/// The identity link solves the normal equations; the logistic link runs
/// iteratively reweighted least squares until the score norm drops below
/// `1e-8` or 100 iterations pass.
pub fn fit_glm(latents: &Tensor, targets: &[f64], link: Link) -> Result<GlmFit> {
    if latents.ndim() != 2 {
        return Err(Error::shape("fit_glm", format!("latents must be [n, d], got {:?}", latents.shape())));
    }
    let (n, d) = (latents.shape()[0], latents.shape()[1]);
    if targets.len() != n {
        return Err(Error::shape("fit_glm", format!("{} targets for {n} rows", targets.len())));
    }
    if n <= d + 1 {
        return Err(Error::contract(format!("need more than {} rows, got {n}", d + 1)));
    }
    if !latents.is_finite() || targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::contract("latents and targets must be finite"));
    }
    if link == Link::Logistic && targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::contract("the logistic link needs targets in {0, 1}"));
    }

    let x = design(latents);
    let y = DVector::from_column_slice(targets);
    let per_dim_correlation = latent_target_scatter(latents, targets)?
        .into_iter()
        .map(|c| c.r)
        .collect();

    let (beta, quality, iterations) = match link {
        Link::Identity => {
            let beta = solve_ridged(&x, None, &(x.transpose() * &y))?;
            let resid = &y - &x * &beta;
            let mean = y.mean();
            let ss_res = resid.norm_squared();
            let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            let r2 = if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else if ss_res == 0.0 {
                1.0
            } else {
                0.0
            };
            (beta, FitQuality::RSquared(r2), 1)
        }
        Link::Logistic => {
            let mut beta = DVector::zeros(d + 1);
            let mut iterations = 0;
            loop {
                let eta = &x * &beta;
                let p = eta.map(sigmoid);
                let score = x.transpose() * (&y - &p);
                if score.norm() < IRLS_GRAD_TOL || iterations == IRLS_MAX_ITER {
                    break;
                }
                let w = p.map(|pi| pi * (1.0 - pi));
                beta += solve_ridged(&x, Some(&w), &score)?;
                iterations += 1;
            }
            let eta = &x * &beta;
            let loglik: f64 = eta
                .iter()
                .zip(y.iter())
                .map(|(&e, &t)| t * e - softplus(e))
                .sum();
            (beta, FitQuality::Deviance(-2.0 * loglik), iterations)
        }
    };
    Ok(GlmFit {
        link,
        coefficients: beta.iter().copied().collect(),
        quality,
        per_dim_correlation,
        iterations,
    })
}

/// Pearson correlation of one latent dimension with the target, plus the
/// raw `(latent, target)` pairs for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterColumn {
    pub r: f64,
    /// The dimension (or the target) has zero variance; `r` is reported as 0.
    pub degenerate: bool,
    pub pairs: Vec<(f64, f64)>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn latent_target_scatter(latents: &Tensor, targets: &[f64]) -> Result<Vec<ScatterColumn>> {
    if latents.ndim() != 2 || latents.shape()[0] != targets.len() {
        return Err(Error::shape(
            "latent_target_scatter",
            format!("latents {:?} vs {} targets", latents.shape(), targets.len()),
        ));
    }
    let d = latents.shape()[1];
    Ok((0..d)
        .map(|j| {
            let col: Vec<f64> = latents.data().iter().skip(j).step_by(d).copied().collect();
            let r = pearson(&col, targets);
            ScatterColumn {
                r: r.unwrap_or(0.0),
                degenerate: r.is_none(),
                pairs: col.into_iter().zip(targets.iter().copied()).collect(),
            }
        })
        .collect())
}

/// `dim,r,coefficient` per latent dimension, then a `summary` row holding the
/// fit quality and the intercept.
pub fn write_glm_csv<W: Write>(fit: &GlmFit, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dim", "r", "coefficient"]).map_err(csv_err)?;
    for (j, (r, c)) in fit.per_dim_correlation.iter().zip(&fit.coefficients).enumerate() {
        w.write_record([j.to_string(), r.to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    let (label, value) = match fit.quality {
        FitQuality::RSquared(v) => ("r_squared", v),
        FitQuality::Deviance(v) => ("deviance", v),
    };
    w.write_record(["summary".to_string(), format!("{label}={value}"), format!("intercept={}", fit.intercept())])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
