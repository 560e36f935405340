//! Geometry of high-dimensional balls: volumes, the share of volume held by a
//! thin outer shell, and a Monte Carlo check that uniform points in the unit
//! ball pile up near its surface.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::trainer::csv_err;

/// Confidence level for the Dvoretzky–Kiefer–Wolfowitz band.
pub const DKW_ALPHA: f64 = 0.01;
pub const MIN_MC_POINTS: usize = 1000;
const SHARD_POINTS: usize = 8192;
pub const REPORTED_QUANTILES: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

/// `πⁿᐟ² Rⁿ / Γ(n/2 + 1)`, evaluated through `ln Γ` so large `n` neither
/// overflows nor underflows prematurely.
pub fn ball_volume(n: u32, radius: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("ball dimension must be at least 1"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::contract(format!("ball radius must be positive, got {radius}")));
    }
    let half = f64::from(n) / 2.0;
    Ok((half * std::f64::consts::PI.ln() + f64::from(n) * radius.ln() - ln_gamma(half + 1.0)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShellResult {
    pub n: u32,
    pub radius: f64,
    pub epsilon: f64,
    /// `1 − (1 − ε/R)ⁿ`
    pub ratio_exact: f64,
    /// First-order estimate `nε/R`.
    pub ratio_approx: f64,
}

/// Fraction of the radius-`R` ball lying within `ε` of its surface.
pub fn shell_ratio(n: u32, radius: f64, epsilon: f64) -> Result<ShellResult> {
    if n == 0 {
        return Err(Error::contract("ball dimension must be at least 1"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::contract(format!("ball radius must be positive, got {radius}")));
    }
    if !(epsilon > 0.0 && epsilon < radius) {
        return Err(Error::contract(format!(
            "shell thickness must lie in (0, R={radius}), got {epsilon}"
        )));
    }
    let t = epsilon / radius;
    let ratio_exact = -(f64::from(n) * (-t).ln_1p()).exp_m1();
    Ok(ShellResult {
        n,
        radius,
        epsilon,
        ratio_exact: ratio_exact.clamp(0.0, 1.0),
        ratio_approx: f64::from(n) * t,
    })
}

/// Smallest `n` whose shell of relative thickness `eps_ratio` holds more
/// than `threshold` of the volume.
pub fn dimension_for_shell_mass(eps_ratio: f64, threshold: f64) -> Result<u32> {
    if !(eps_ratio > 0.0 && eps_ratio < 1.0) || !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract("eps_ratio and threshold must lie in (0, 1)"));
    }
    // 1 − (1−t)ⁿ > q  ⇔  n > ln(1−q) / ln(1−t)
    let bound = (-threshold).ln_1p() / (-eps_ratio).ln_1p();
    let mut n = bound.floor().max(1.0) as u32;
    while shell_ratio(n, 1.0, eps_ratio)?.ratio_exact <= threshold {
        n += 1;
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusConcentration {
    pub n: u32,
    /// Sorted radii of every sampled point.
    pub radii: Vec<f64>,
    /// `(probability, empirical quantile, theoretical quantile p^{1/n})`.
    pub quantiles: Vec<(f64, f64, f64)>,
    /// Kolmogorov–Smirnov distance between the empirical CDF and `rⁿ`.
    pub ks_statistic: f64,
    pub dkw_bound: f64,
}

impl RadiusConcentration {
    pub fn passes_dkw(&self) -> bool {
        self.ks_statistic <= self.dkw_bound
    }

    pub fn empirical_cdf(&self, r: f64) -> f64 {
        self.radii.partition_point(|&x| x <= r) as f64 / self.radii.len() as f64
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.radii.len();
        let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.radii[idx]
    }
}

fn sample_shard(n: u32, count: usize, seed: u64, shard: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    let mut dir = vec![0.0; n as usize];
    (0..count)
        .map(|_| {
            let norm = loop {
                for v in dir.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let s = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if s > 0.0 {
                    break s;
                }
            };
            let u: f64 = rng.random();
            let r = u.powf(1.0 / f64::from(n));
            dir.iter().map(|v| (v / norm * r).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

/// Draws `num_points` uniform points from the unit `n`-ball and compares the
/// distribution of their norms with the exact CDF `rⁿ`.
///
/// Points are generated in fixed-size shards, each on its own ChaCha stream,
/// so the result is independent of how many threads do the work.
pub fn radius_concentration_mc(n: u32, num_points: usize, seed: u64) -> Result<RadiusConcentration> {
    if n == 0 {
        return Err(Error::contract("ball dimension must be at least 1"));
    }
    if num_points < MIN_MC_POINTS {
        return Err(Error::contract(format!(
            "need at least {MIN_MC_POINTS} points, got {num_points}"
        )));
    }
    let shards = num_points.div_ceil(SHARD_POINTS);
    let threads = std::thread::available_parallelism().map_or(1, |p| p.get()).min(shards);
    let mut parts: Vec<Vec<f64>> = vec![Vec::new(); shards];
    std::thread::scope(|scope| {
        for (t, chunk) in parts.chunks_mut(shards.div_ceil(threads)).enumerate() {
            let first = t * shards.div_ceil(threads);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let shard = first + k;
                    let count = SHARD_POINTS.min(num_points - shard * SHARD_POINTS);
                    *slot = sample_shard(n, count, seed, shard as u64);
                }
            });
        }
    });
    let mut radii: Vec<f64> = parts.concat();
    radii.sort_by(f64::total_cmp);

    let total = radii.len() as f64;
    let nf = f64::from(n);
    let ks_statistic = radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let f = r.powf(nf);
            ((i + 1) as f64 / total - f).max(f - i as f64 / total)
        })
        .fold(0.0, f64::max);
    let dkw_bound = ((2.0 / DKW_ALPHA).ln() / (2.0 * total)).sqrt();

    let mut out = RadiusConcentration {
        n,
        radii,
        quantiles: Vec::new(),
        ks_statistic,
        dkw_bound,
    };
    out.quantiles = REPORTED_QUANTILES
        .iter()
        .map(|&p| (p, out.quantile(p), p.powf(1.0 / nf)))
        .collect();
    Ok(out)
}

/// `n,eps_ratio,ratio_exact,ratio_approx` for every grid point, unit radius.
pub fn write_shell_sweep_csv<W: Write>(dims: &[u32], eps_ratios: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "eps_ratio", "ratio_exact", "ratio_approx"])
        .map_err(csv_err)?;
    for &n in dims {
        for &e in eps_ratios {
            let s = shell_ratio(n, 1.0, e)?;
            w.write_record([n.to_string(), e.to_string(), s.ratio_exact.to_string(), s.ratio_approx.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `n,p,empirical,theoretical` rows for each Monte Carlo run in turn.
pub fn write_radius_quantiles_csv<W: Write>(runs: &[RadiusConcentration], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "p", "empirical", "theoretical"]).map_err(csv_err)?;
    for rc in runs {
        for &(p, emp, th) in &rc.quantiles {
            w.write_record([rc.n.to_string(), p.to_string(), emp.to_string(), th.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn low_dimensional_volumes() {
        assert!((ball_volume(2, 1.0).unwrap() - PI).abs() < 1e-12 * PI);
        assert!((ball_volume(3, 1.0).unwrap() - 4.0 * PI / 3.0).abs() < 1e-12 * 4.0);
        assert!((ball_volume(10, 1.0).unwrap() - PI.powi(5) / 120.0).abs() < 1e-11);
        assert!((ball_volume(1, 2.5).unwrap() - 5.0).abs() < 1e-12);
        assert!(ball_volume(0, 1.0).is_err());
        assert!(ball_volume(3, 0.0).is_err());
    }

    #[test]
    fn shell_examples() {
        let s = shell_ratio(100, 1.0, 0.001).unwrap();
        assert!((s.ratio_exact - 0.095_207_853).abs() < 1e-8);
        assert!((s.ratio_approx - 0.1).abs() < 1e-15);
        let one = shell_ratio(1, 2.0, 0.5).unwrap();
        assert!((one.ratio_exact - 0.25).abs() < 1e-15 && (one.ratio_approx - 0.25).abs() < 1e-15);
        let big = shell_ratio(10_000, 1.0, 0.001).unwrap();
        assert!((big.ratio_exact - (1.0 - (10_000.0 * (-0.001f64).ln_1p()).exp())).abs() < 1e-12);
        assert!(big.ratio_exact > 0.9999 && big.ratio_approx == 10.0);
        assert!(matches!(shell_ratio(3, 1.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn shell_threshold_dimension() {
        let n = dimension_for_shell_mass(0.001, 0.99).unwrap();
        assert!(n <= 6000);
        assert!(shell_ratio(n, 1.0, 0.001).unwrap().ratio_exact > 0.99);
        assert!(shell_ratio(n - 1, 1.0, 0.001).unwrap().ratio_exact <= 0.99);
    }

    #[test]
    fn mc_median_and_tail() {
        let rc = radius_concentration_mc(10, 20_000, 0).unwrap();
        assert!((rc.quantile(0.5) - 0.5f64.powf(0.1)).abs() < 0.01);
        assert!(rc.passes_dkw());
        let rc50 = radius_concentration_mc(50, 20_000, 4).unwrap();
        assert!((rc50.empirical_cdf(0.9) - 0.9f64.powi(50)).abs() < 0.003);
        let rc1 = radius_concentration_mc(1, 5_000, 5).unwrap();
        assert!((rc1.quantile(0.5) - 0.5).abs() < 0.03);
    }

    #[test]
    fn mc_is_deterministic_and_validates() {
        let a = radius_concentration_mc(4, 10_000, 11).unwrap();
        let b = radius_concentration_mc(4, 10_000, 11).unwrap();
        assert_eq!(a, b);
        assert!(radius_concentration_mc(4, 999, 11).is_err());
    }

    #[test]
    fn sweep_csv_shape() {
        let mut buf = Vec::new();
        write_shell_sweep_csv(&[10, 100], &[0.001, 0.01], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
