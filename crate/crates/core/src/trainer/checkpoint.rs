//! `VAEC` checkpoints (all integers little-endian):
//!
//! ```text
//! "VAEC" | version u16
//! spec:  kind u8 (0 = MLP, 1 = Conv2D) | input ndim u32 + extents u64… | latent_dim u64
//!        MLP:  hidden count u32 + widths u64…
//!        Conv: channel count u32 + channels u64… | kernel u64 | stride u64
//! seed u64
//! params: count u32, then per tensor: name (u32 len + UTF-8) | ndim u32 | extents u64… | f64…
//! optimizer: step_count u64 | moments flag u8 | [first moments f64… | second moments f64…]
//! ```
//!
//! Moments follow parameter order and shapes.

use std::fs;
use std::path::Path;

use super::AdamState;
use crate::autodiff::Tensor;
use crate::codec::{checked_numel, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::networks::{Architecture, ArchitectureSpec, VaeModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAEC";
pub const CHECKPOINT_VERSION: u16 = 1;

fn write_dims(w: &mut ByteWriter, dims: &[usize]) {
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u64(d as u64);
    }
}

fn read_dims(r: &mut ByteReader<'_>) -> Result<Vec<usize>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.len()).collect()
}

fn write_spec(w: &mut ByteWriter, spec: &ArchitectureSpec) {
    match &spec.arch {
        Architecture::Mlp { .. } => w.u8(0),
        Architecture::Conv2d { .. } => w.u8(1),
    }
    write_dims(w, &spec.input_shape);
    w.u64(spec.latent_dim as u64);
    match &spec.arch {
        Architecture::Mlp { hidden } => write_dims(w, hidden),
        Architecture::Conv2d {
            channels,
            kernel,
            stride,
        } => {
            write_dims(w, channels);
            w.u64(*kernel as u64);
            w.u64(*stride as u64);
        }
    }
}

fn read_spec(r: &mut ByteReader<'_>) -> Result<ArchitectureSpec> {
    let kind = r.u8()?;
    let input_shape = read_dims(r)?;
    let latent_dim = r.len()?;
    let arch = match kind {
        0 => Architecture::Mlp {
            hidden: read_dims(r)?,
        },
        1 => Architecture::Conv2d {
            channels: read_dims(r)?,
            kernel: r.len()?,
            stride: r.len()?,
        },
        k => return Err(Error::Format(format!("unknown architecture kind {k}"))),
    };
    Ok(ArchitectureSpec {
        input_shape,
        latent_dim,
        arch,
    })
}

pub fn encode_checkpoint(model: &VaeModel, state: &AdamState) -> Result<Vec<u8>> {
    let n = model.params().count();
    let moments = state.first_moment.len();
    if moments != 0 && (moments != n || state.second_moment.len() != n) {
        return Err(Error::contract(format!(
            "optimizer state has {moments} moments for {n} parameters"
        )));
    }
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    write_spec(&mut w, model.spec());
    w.u64(model.seed());
    w.u32(n as u32);
    for (name, t) in model.params() {
        w.str(name);
        write_dims(&mut w, t.shape());
        w.f64s(t.data());
    }
    w.u64(state.step_count);
    if moments == 0 {
        w.u8(0);
    } else {
        w.u8(1);
        for m in &state.first_moment {
            w.f64s(m.data());
        }
        for v in &state.second_moment {
            w.f64s(v.data());
        }
    }
    Ok(w.finish())
}

/// Parses a checkpoint; nothing is returned unless the whole file is valid.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(VaeModel, AdamState)> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a VAEC checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let spec = read_spec(&mut r)?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?;
        let shape = read_dims(&mut r)?;
        let numel = checked_numel(&shape, "parameter")?;
        let data = r.f64s(numel)?;
        params.push((name, Tensor::from_parts(shape, data)));
    }
    let step_count = r.u64()?;
    let (first_moment, second_moment) = match r.u8()? {
        0 => (Vec::new(), Vec::new()),
        1 => {
            let read_set = |r: &mut ByteReader<'_>| -> Result<Vec<Tensor>> {
                params
                    .iter()
                    .map(|(_, p)| Ok(Tensor::from_parts(p.shape().to_vec(), r.f64s(p.numel())?)))
                    .collect()
            };
            let m = read_set(&mut r)?;
            let v = read_set(&mut r)?;
            (m, v)
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    r.expect_end()?;
    let model = VaeModel::from_params(spec, params, seed).map_err(|e| match e {
        Error::Spec(s) => Error::Integrity(format!("embedded spec is invalid: {s}")),
        other => other,
    })?;
    let state = AdamState {
        first_moment,
        second_moment,
        step_count,
    };
    Ok((model, state))
}

pub fn save_checkpoint(model: &VaeModel, state: &AdamState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(VaeModel, AdamState)> {
    decode_checkpoint(&fs::read(path)?)
}
