//! Synthetic datasets with known generative factors, and the `VAED` container.
//!
//! `VAED` layout (all integers little-endian):
//!
//! ```text
//! "VAED" | version u16 | flags u8 (bit0 targets, bit1 factors)
//! name: u32 len + UTF-8 | generator: u32 len + UTF-8 | seed u64
//! ndim u32 | extents u64 × ndim          (extents[0] = sample count n)
//! [factor count k u64]                   (when bit1 is set)
//! samples f64 × Π extents | [targets f64 × n] | [factors f64 × n·k]
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::codec::{checked_numel, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"VAED";
pub const DATASET_VERSION: u16 = 1;

const FLAG_TARGETS: u8 = 0b01;
const FLAG_FACTORS: u8 = 0b10;

/// Ratio of the vertical to the horizontal semi-axis of generated ellipses.
pub const ELLIPSE_ASPECT: f64 = 0.75;
/// Horizontal semi-axis range, as fractions of the image side.
pub const RADIUS_RANGE: (f64, f64) = (0.1, 0.4);
/// Sub-pixel grid used for coverage-based antialiasing.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[n, sample shape…]`
    pub samples: Tensor,
    pub targets: Option<Vec<f64>>,
    /// `[n, k]`
    pub factors: Option<Tensor>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(
        samples: Tensor,
        targets: Option<Vec<f64>>,
        factors: Option<Tensor>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if samples.ndim() < 2 {
            return Err(Error::shape(
                "dataset",
                format!("samples must be [n, …], got {:?}", samples.shape()),
            ));
        }
        let n = samples.shape()[0];
        if let Some(t) = &targets {
            if t.len() != n {
                return Err(Error::shape("dataset", format!("{} targets for {n} samples", t.len())));
            }
        }
        if let Some(f) = &factors {
            if f.ndim() != 2 || f.shape()[0] != n {
                return Err(Error::shape(
                    "dataset",
                    format!("factors {:?} for {n} samples", f.shape()),
                ));
            }
        }
        if !samples.is_finite() {
            return Err(Error::contract("dataset samples must be finite"));
        }
        Ok(LabeledDataset {
            samples,
            targets,
            factors,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }
}

/// Noisy points on a normalized spiral.
///
/// `t ~ U[π/2, 4π]`, point `= (t cos t, t sin t) / (4π) + N(0, σ²)`; the
/// factor is `t`.
pub fn gen_spiral(n: usize, noise_sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::contract("spiral needs at least one point"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::contract(format!("noise sigma must be ≥ 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(2 * n);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.random_range(PI / 2.0..4.0 * PI);
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let (x, y) = spiral_point(t);
        points.push(x + noise_sigma * nx);
        points.push(y + noise_sigma * ny);
        ts.push(t);
    }
    LabeledDataset::new(
        Tensor::from_parts(vec![n, 2], points),
        None,
        Some(Tensor::from_parts(vec![n, 1], ts)),
        DatasetMeta {
            name: format!("spiral-n{n}"),
            seed,
            generator: "spiral".into(),
        },
    )
}

/// Noise-free spiral position for arc parameter `t`.
pub fn spiral_point(t: f64) -> (f64, f64) {
    let scale = 4.0 * PI;
    (t * t.cos() / scale, t * t.sin() / scale)
}

/// Renders a filled, axis-aligned ellipse with horizontal semi-axis `radius`
/// and vertical semi-axis `ELLIPSE_ASPECT · radius`, centred at `(cx, cy)` in
/// pixel coordinates. Each pixel holds the covered fraction of a 4×4
/// sub-sample grid, so intensities lie in `[0, 1]`.
pub fn render_ellipse(side: usize, cx: f64, cy: f64, radius: f64) -> Vec<f64> {
    let (a, b) = (radius, ELLIPSE_ASPECT * radius);
    let per = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut img = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let mut hits = 0usize;
            for si in 0..SUPERSAMPLE {
                let y = row as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64;
                for sj in 0..SUPERSAMPLE {
                    let x = col as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64;
                    let (u, v) = ((x - cx) / a, (y - cy) / b);
                    if u * u + v * v <= 1.0 {
                        hits += 1;
                    }
                }
            }
            img[row * side + col] = hits as f64 / per;
        }
    }
    img
}

/// Grayscale `side × side` ellipse images (`[n, 1, side, side]`) with factors
/// `(center_x, center_y, radius)` and target `radius`, all in pixels.
///
/// Centres are drawn inside a fixed margin sized for the largest radius, so
/// the three factors are mutually independent.
pub fn gen_factor_images(n: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if side < 8 {
        return Err(Error::contract(format!("image side must be ≥ 8, got {side}")));
    }
    if n == 0 {
        return Err(Error::contract("need at least one image"));
    }
    let s = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut factors = Vec::with_capacity(3 * n);
    let mut targets = Vec::with_capacity(n);
    let (margin_x, margin_y) = (RADIUS_RANGE.1 * s, ELLIPSE_ASPECT * RADIUS_RANGE.1 * s);
    for _ in 0..n {
        let r = rng.random_range(RADIUS_RANGE.0 * s..=RADIUS_RANGE.1 * s);
        let cx = rng.random_range(margin_x..=s - margin_x);
        let cy = rng.random_range(margin_y..=s - margin_y);
        pixels.extend(render_ellipse(side, cx, cy, r));
        factors.extend([cx, cy, r]);
        targets.push(r);
    }
    LabeledDataset::new(
        Tensor::from_parts(vec![n, 1, side, side], pixels),
        Some(targets),
        Some(Tensor::from_parts(vec![n, 3], factors)),
        DatasetMeta {
            name: format!("ellipse-n{n}-s{side}"),
            seed,
            generator: "ellipse".into(),
        },
    )
}

pub fn encode_dataset(ds: &LabeledDataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    let mut flags = 0;
    if ds.targets.is_some() {
        flags |= FLAG_TARGETS;
    }
    if ds.factors.is_some() {
        flags |= FLAG_FACTORS;
    }
    w.u8(flags);
    w.str(&ds.meta.name);
    w.str(&ds.meta.generator);
    w.u64(ds.meta.seed);
    let shape = ds.samples.shape();
    w.u32(shape.len() as u32);
    for &e in shape {
        w.u64(e as u64);
    }
    if let Some(f) = &ds.factors {
        w.u64(f.shape()[1] as u64);
    }
    w.f64s(ds.samples.data());
    if let Some(t) = &ds.targets {
        w.f64s(t);
    }
    if let Some(f) = &ds.factors {
        w.f64s(f.data());
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = ByteReader::new(bytes, "dataset");
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a VAED dataset (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let flags = r.u8()?;
    if flags & !(FLAG_TARGETS | FLAG_FACTORS) != 0 {
        return Err(Error::Format(format!("unknown dataset flags {flags:#04b}")));
    }
    let name = r.str()?;
    let generator = r.str()?;
    let seed = r.u64()?;
    let ndim = r.u32()? as usize;
    if ndim < 2 {
        return Err(Error::Format(format!("sample table needs ≥ 2 extents, got {ndim}")));
    }
    let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let numel = checked_numel(&shape, "sample table")?;
    let n = shape[0];
    let k = if flags & FLAG_FACTORS != 0 {
        Some(r.len()?)
    } else {
        None
    };
    let samples = Tensor::new(shape, r.f64s(numel)?)?;
    let targets = if flags & FLAG_TARGETS != 0 {
        Some(r.f64s(n)?)
    } else {
        None
    };
    let factors = match k {
        Some(k) => {
            let count = checked_numel(&[n, k], "factor table")?;
            Some(Tensor::new(vec![n, k], r.f64s(count)?)?)
        }
        None => None,
    };
    r.expect_end()?;
    LabeledDataset::new(
        samples,
        targets,
        factors,
        DatasetMeta {
            name,
            seed,
            generator,
        },
    )
    .map_err(|e| Error::Format(format!("dataset payload rejected: {e}")))
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_dataset(&fs::read(path)?)
}
