//! Command-line front end. [`run`] parses arguments, executes one command,
//! and returns the process exit code:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 2    | usage or configuration error              |
//! | 3    | numerical abort (non-finite loss, singular fit) |
//! | 4    | I/O or file-format error                  |

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{fit_glm, latent_target_scatter, write_glm_csv, Link};
use crate::autodiff::Tensor;
use crate::config::{seed_from_env, RunConfig};
use crate::datasets::{gen_factor_images, gen_spiral, load_dataset, save_dataset, DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};
use crate::hypersphere::{radius_concentration_mc, shell_ratio, write_radius_quantiles_csv, write_shell_sweep_csv};
use crate::networks::VaeModel;
use crate::trainer::{
    csv_err, diagnose_collapse, load_checkpoint, save_checkpoint, train_with_progress, write_metrics_csv,
    CollapseReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.vaec";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "vaekit", version, about = "Train and inspect variational autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train from a TOML run configuration.
    Train { config: PathBuf },
    /// Report per-dimension KL and collapse indicators for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        kl_threshold: f64,
        /// Per-dimension CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regress a target on the posterior means.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
        link: LinkArg,
        /// Use ground-truth factor column K as the target instead of the stored target.
        #[arg(long, value_name = "K")]
        factor: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write `dim,latent,target` scatter rows here.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Decode draws from the standard-normal prior into a dataset file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shell-volume ratios and radius concentration in high dimensions.
    Sphere {
        /// Dimensions, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u32>,
        /// Relative shell thicknesses ε/R, comma separated.
        #[arg(long = "eps-ratio", value_delimiter = ',', required = true)]
        eps_ratio: Vec<f64>,
        /// Also sample this many uniform points per dimension and test the radius CDF.
        #[arg(long)]
        mc_points: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quantiles_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum GenKind {
    /// Noisy 2-D spiral with its arc parameter as factor.
    Spiral {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filled-ellipse images with centre and radius factors.
    Ellipse {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkArg {
    Identity,
    Logistic,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::Singular(_) | Error::Domain { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Format(_) | Error::Integrity(_) => EXIT_IO,
        Error::Shape { .. } | Error::Contract(_) | Error::Spec(_) | Error::Config(_) => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return e.exit_code();
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Sends CSV to `path` if given, otherwise to `out`.
fn with_sink(path: Option<&Path>, out: &mut dyn Write, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(out),
    }
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen { kind } => cmd_gen(kind, out),
        Command::Train { config } => cmd_train(&config, out, err),
        Command::Diagnose {
            checkpoint,
            data,
            kl_threshold,
            out: dest,
        } => cmd_diagnose(&checkpoint, &data, kl_threshold, dest.as_deref(), out),
        Command::Analyze {
            checkpoint,
            data,
            link,
            factor,
            out: dest,
            scatter,
        } => cmd_analyze(&checkpoint, &data, link, factor, dest.as_deref(), scatter.as_deref(), out),
        Command::Sample {
            checkpoint,
            count,
            seed,
            out: dest,
        } => cmd_sample(&checkpoint, count, seed, &dest, out),
        Command::Sphere {
            n,
            eps_ratio,
            mc_points,
            seed,
            out: dest,
            quantiles_out,
        } => cmd_sphere(&n, &eps_ratio, mc_points, seed, dest.as_deref(), quantiles_out.as_deref(), out),
    }
}

fn cmd_gen(kind: GenKind, out: &mut dyn Write) -> Result<()> {
    let (ds, path) = match kind {
        GenKind::Spiral { n, noise, seed, out } => (gen_spiral(n, noise, seed)?, out),
        GenKind::Ellipse { n, side, seed, out } => (gen_factor_images(n, side, seed)?, out),
    };
    save_dataset(&ds, &path)?;
    writeln!(out, "wrote {} samples of shape {:?} to {}", ds.len(), ds.sample_shape(), path.display())?;
    Ok(())
}

/// `key=value` lines describing a collapse diagnosis.
pub fn write_collapse_summary(report: &CollapseReport, lambda: Option<f64>, w: &mut dyn Write) -> Result<()> {
    if let Some(l) = lambda {
        writeln!(w, "lambda={l}")?;
    }
    writeln!(w, "active_dims={}", report.active_dims)?;
    writeln!(w, "recon_variance_ratio={}", report.recon_variance_ratio)?;
    writeln!(w, "mean_mu_norm={}", report.mean_mu_norm)?;
    writeln!(w, "mean_sigma={}", report.mean_sigma)?;
    let kl: Vec<String> = report.per_dim_kl.iter().map(|k| k.to_string()).collect();
    writeln!(w, "per_dim_kl={}", kl.join(","))?;
    writeln!(w, "collapsed={}", report.collapsed)?;
    Ok(())
}

fn cmd_train(config: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let run = RunConfig::load(config, seed_from_env()?)?;
    let ds = at_path(&run.data_path, load_dataset(&run.data_path))?;
    let spec = run.architecture(ds.sample_shape())?;
    fs::create_dir_all(&run.output_dir)?;
    let model = VaeModel::init(spec, run.train.seed)?;
    let epochs = run.train.epochs;
    let outcome = train_with_progress(model, &ds, &run.train, |epoch, r| {
        let _ = writeln!(
            err,
            "epoch {epoch}/{epochs} recon={:.6} divergence={:.6} total={:.6}",
            r.recon, r.divergence, r.total
        );
    })?;

    save_checkpoint(&outcome.model, &outcome.state, run.output_dir.join(CHECKPOINT_FILE))?;
    let mut metrics = create(&run.output_dir.join(METRICS_FILE))?;
    write_metrics_csv(&outcome.history, run.train.collapse_kl_threshold, &mut metrics)?;
    metrics.flush()?;

    let report = diagnose_collapse(&outcome.model, &ds, run.train.collapse_kl_threshold)?;
    let mut summary = Vec::new();
    write_collapse_summary(&report, Some(outcome.lambda), &mut summary)?;
    fs::write(run.output_dir.join(SUMMARY_FILE), &summary)?;
    out.write_all(&summary)?;
    Ok(())
}

/// Prefixes I/O and format errors with the offending path.
fn at_path<T>(path: &Path, res: Result<T>) -> Result<T> {
    res.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(VaeModel, LabeledDataset)> {
    let (model, _) = at_path(checkpoint, load_checkpoint(checkpoint))?;
    let ds = at_path(data, load_dataset(data))?;
    if ds.sample_shape() != model.spec().input_shape.as_slice() {
        return Err(Error::contract(format!(
            "dataset samples {:?} do not match checkpoint input {:?}",
            ds.sample_shape(),
            model.spec().input_shape
        )));
    }
    Ok((model, ds))
}

fn cmd_diagnose(checkpoint: &Path, data: &Path, threshold: f64, dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (model, ds) = load_pair(checkpoint, data)?;
    let report = diagnose_collapse(&model, &ds, threshold)?;
    with_sink(dest, out, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["dim", "kl", "active"]).map_err(csv_err)?;
        for (j, kl) in report.per_dim_kl.iter().enumerate() {
            csv.write_record([j.to_string(), kl.to_string(), (*kl > threshold).to_string()])
                .map_err(csv_err)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    if dest.is_some() {
        write_collapse_summary(&report, None, out)?;
    }
    Ok(())
}

fn cmd_analyze(
    checkpoint: &Path,
    data: &Path,
    link: LinkArg,
    factor: Option<usize>,
    dest: Option<&Path>,
    scatter: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (model, ds) = load_pair(checkpoint, data)?;
    let targets: Vec<f64> = match factor {
        Some(k) => {
            let f = ds
                .factors
                .as_ref()
                .ok_or_else(|| Error::contract("dataset has no factors"))?;
            let width = f.shape()[1];
            if k >= width {
                return Err(Error::contract(format!("factor {k} out of range (dataset has {width})")));
            }
            f.data().iter().skip(k).step_by(width).copied().collect()
        }
        None => ds
            .targets
            .clone()
            .ok_or_else(|| Error::contract("dataset has no targets; pass --factor"))?,
    };
    let mut mus = Vec::new();
    for start in (0..ds.len()).step_by(256) {
        let chunk = ds.samples.slice_rows(start, 256.min(ds.len() - start))?;
        mus.push(model.encode_tensor(&chunk)?.0);
    }
    let mu = Tensor::concat_rows(&mus)?;
    let link = match link {
        LinkArg::Identity => Link::Identity,
        LinkArg::Logistic => Link::Logistic,
    };
    let fit = fit_glm(&mu, &targets, link)?;
    with_sink(dest, out, |w| write_glm_csv(&fit, w))?;
    if let Some(path) = scatter {
        let cols = latent_target_scatter(&mu, &targets)?;
        let mut csv = csv::Writer::from_writer(create(path)?);
        csv.write_record(["dim", "latent", "target"]).map_err(csv_err)?;
        for (j, col) in cols.iter().enumerate() {
            for (z, t) in &col.pairs {
                csv.write_record([j.to_string(), z.to_string(), t.to_string()])
                    .map_err(csv_err)?;
            }
        }
        csv.flush()?;
    }
    Ok(())
}

fn cmd_sample(checkpoint: &Path, count: usize, seed: u64, dest: &Path, out: &mut dyn Write) -> Result<()> {
    if count == 0 {
        return Err(Error::contract("--count must be at least 1"));
    }
    let (model, _) = at_path(checkpoint, load_checkpoint(checkpoint))?;
    let d = model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..count * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z = Tensor::new(vec![count, d], z)?;
    let decoded = model.decode_tensor(&z)?;
    let mut shape = vec![count];
    shape.extend_from_slice(&model.spec().input_shape);
    let ds = LabeledDataset::new(
        decoded.reshape(&shape)?,
        None,
        Some(z),
        DatasetMeta {
            name: format!("prior-sample-{count}"),
            seed,
            generator: "sample".into(),
        },
    )?;
    save_dataset(&ds, dest)?;
    writeln!(out, "wrote {count} decoded prior samples to {}", dest.display())?;
    Ok(())
}

fn cmd_sphere(
    dims: &[u32],
    eps_ratios: &[f64],
    mc_points: Option<usize>,
    seed: u64,
    dest: Option<&Path>,
    quantiles: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    for &n in dims {
        for &e in eps_ratios {
            shell_ratio(n, 1.0, e)?;
        }
    }
    with_sink(dest, out, |w| write_shell_sweep_csv(dims, eps_ratios, w))?;
    let Some(points) = mc_points else {
        return Ok(());
    };
    let runs = dims
        .iter()
        .map(|&n| radius_concentration_mc(n, points, seed))
        .collect::<Result<Vec<_>>>()?;
    for rc in &runs {
        writeln!(
            out,
            "# radius n={} points={} ks={:.6} dkw_bound={:.6} pass={}",
            rc.n,
            rc.radii.len(),
            rc.ks_statistic,
            rc.dkw_bound,
            rc.passes_dkw()
        )?;
    }
    if let Some(path) = quantiles {
        write_radius_quantiles_csv(&runs, create(path)?)?;
    }
    Ok(())
}
