//! Encoder/decoder families: a fully connected pair for vectors and a
//! convolutional pair for `[C, H, W]` images.
//!
//! Parameters live in plain [`Tensor`]s owned by [`VaeModel`]; a forward pass
//! binds them into a [`Graph`] first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv_out_extent, Conv2dParams, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::objective::GaussianLatent;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Hidden widths of the encoder; the decoder mirrors them.
    Mlp { hidden: Vec<usize> },
    /// Encoder output channels per stride-`stride` stage. The decoder
    /// undoes each stage with nearest upsampling followed by a stride-1 conv.
    Conv2d {
        channels: Vec<usize>,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    /// Per-sample shape, without the batch extent. Conv specs need `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub latent_dim: usize,
    pub arch: Architecture,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used by the initializer; zero marks a bias.
    pub fan_in: usize,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec { name, shape, fan_in }
    }

    fn bias(name: String, width: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![width],
            fan_in: 0,
        }
    }
}

/// Spatial extents after each encoder stage, starting with the input.
#[derive(Clone, Debug, PartialEq, Eq)]
struct ConvPlan {
    extents: Vec<(usize, usize)>,
    padding: usize,
}

impl ArchitectureSpec {
    /// `[input → 128 → 64 → 2d]` fully connected.
    pub fn mlp(input_shape: Vec<usize>, latent_dim: usize) -> Self {
        ArchitectureSpec {
            input_shape,
            latent_dim,
            arch: Architecture::Mlp {
                hidden: vec![128, 64],
            },
        }
    }

    /// Channels `[C → 8 → 16]`, kernel 3, stride 2.
    pub fn conv(input_shape: Vec<usize>, latent_dim: usize) -> Self {
        ArchitectureSpec {
            input_shape,
            latent_dim,
            arch: Architecture::Conv2d {
                channels: vec![8, 16],
                kernel: 3,
                stride: 2,
            },
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn conv_plan(&self) -> Result<ConvPlan> {
        let Architecture::Conv2d {
            channels,
            kernel,
            stride,
        } = &self.arch
        else {
            return Err(Error::Spec("not a convolutional spec".into()));
        };
        if self.input_shape.len() != 3 {
            return Err(Error::Spec(format!(
                "conv input must be [C, H, W], got {:?}",
                self.input_shape
            )));
        }
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Spec(format!("invalid channel schedule {channels:?}")));
        }
        if *kernel % 2 == 0 || *stride == 0 {
            return Err(Error::Spec(format!(
                "kernel must be odd and stride positive, got kernel {kernel}, stride {stride}"
            )));
        }
        let padding = (kernel - 1) / 2;
        let mut extents = vec![(self.input_shape[1], self.input_shape[2])];
        for _ in channels {
            let (h, w) = *extents.last().expect("seeded");
            let next = (
                conv_out_extent(h, *kernel, *stride, padding),
                conv_out_extent(w, *kernel, *stride, padding),
            );
            let (Some(oh), Some(ow)) = next else {
                return Err(Error::Spec(format!("stage collapses a {h}x{w} map")));
            };
            if oh * stride != h || ow * stride != w {
                return Err(Error::Spec(format!(
                    "{h}x{w} is not divisible by stride {stride}; the decoder could not restore it"
                )));
            }
            extents.push((oh, ow));
        }
        Ok(ConvPlan { extents, padding })
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Spec("latent_dim must be at least 1".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("invalid input shape {:?}", self.input_shape)));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Spec(format!("zero-width hidden layer in {hidden:?}")));
                }
                Ok(())
            }
            Architecture::Conv2d { .. } => self.conv_plan().map(|_| ()),
        }
    }

    /// Encoder parameters followed by decoder parameters, in binding order.
    pub fn param_layout(&self) -> Result<(Vec<ParamSpec>, Vec<ParamSpec>)> {
        self.validate()?;
        let d = self.latent_dim;
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut dims = vec![self.input_len()];
                dims.extend(hidden);
                dims.push(2 * d);
                for (i, w) in dims.windows(2).enumerate() {
                    enc.push(ParamSpec::weight(format!("enc.{i}.weight"), vec![w[0], w[1]], w[0]));
                    enc.push(ParamSpec::bias(format!("enc.{i}.bias"), w[1]));
                }
                let mut dims = vec![d];
                dims.extend(hidden.iter().rev());
                dims.push(self.input_len());
                for (i, w) in dims.windows(2).enumerate() {
                    dec.push(ParamSpec::weight(format!("dec.{i}.weight"), vec![w[0], w[1]], w[0]));
                    dec.push(ParamSpec::bias(format!("dec.{i}.bias"), w[1]));
                }
            }
            Architecture::Conv2d {
                channels, kernel, ..
            } => {
                let plan = self.conv_plan()?;
                let k = *kernel;
                let mut chans = vec![self.input_shape[0]];
                chans.extend(channels);
                for (i, c) in chans.windows(2).enumerate() {
                    enc.push(ParamSpec::weight(
                        format!("enc.conv{i}.weight"),
                        vec![c[1], c[0], k, k],
                        c[0] * k * k,
                    ));
                    enc.push(ParamSpec::bias(format!("enc.conv{i}.bias"), c[1]));
                }
                let (h, w) = *plan.extents.last().expect("non-empty");
                let flat = chans.last().expect("non-empty") * h * w;
                enc.push(ParamSpec::weight("enc.head.weight".into(), vec![flat, 2 * d], flat));
                enc.push(ParamSpec::bias("enc.head.bias".into(), 2 * d));

                dec.push(ParamSpec::weight("dec.fc.weight".into(), vec![d, flat], d));
                dec.push(ParamSpec::bias("dec.fc.bias".into(), flat));
                for (i, c) in chans.windows(2).enumerate().rev() {
                    dec.push(ParamSpec::weight(
                        format!("dec.conv{i}.weight"),
                        vec![c[0], c[1], k, k],
                        c[1] * k * k,
                    ));
                    dec.push(ParamSpec::bias(format!("dec.conv{i}.bias"), c[0]));
                }
            }
        }
        Ok((enc, dec))
    }
}

/// Encoder and decoder parameters for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    spec: ArchitectureSpec,
    encoder: Vec<(String, Tensor)>,
    decoder: Vec<(String, Tensor)>,
    seed: u64,
}

/// Graph handles for every model parameter, in layout order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    encoder_len: usize,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn encoder(&self) -> &[Var] {
        &self.vars[..self.encoder_len]
    }

    fn decoder(&self) -> &[Var] {
        &self.vars[self.encoder_len..]
    }
}

impl VaeModel {
    /// Weights uniform in `±1/√fan_in`, biases zero; deterministic in `seed`.
    pub fn init(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        let (enc, dec) = spec.param_layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |p: &ParamSpec| -> (String, Tensor) {
            let n: usize = p.shape.iter().product();
            let data = if p.fan_in == 0 {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (p.fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            (p.name.clone(), Tensor::from_parts(p.shape.clone(), data))
        };
        let encoder = enc.iter().map(&mut draw).collect();
        let decoder = dec.iter().map(&mut draw).collect();
        Ok(VaeModel {
            spec,
            encoder,
            decoder,
            seed,
        })
    }

    /// Assembles a model from explicit parameters, checking them against the
    /// layout implied by `spec`.
    pub fn from_params(spec: ArchitectureSpec, params: Vec<(String, Tensor)>, seed: u64) -> Result<Self> {
        let (enc, dec) = spec.param_layout()?;
        if params.len() != enc.len() + dec.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, got {}",
                enc.len() + dec.len(),
                params.len()
            )));
        }
        for (expected, (name, t)) in enc.iter().chain(&dec).zip(&params) {
            if &expected.name != name || expected.shape != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    expected.name,
                    expected.shape
                )));
            }
        }
        let mut params = params;
        let decoder = params.split_off(enc.len());
        Ok(VaeModel {
            spec,
            encoder: params,
            decoder,
            seed,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn encoder_params(&self) -> &[(String, Tensor)] {
        &self.encoder
    }

    pub fn decoder_params(&self) -> &[(String, Tensor)] {
        &self.decoder
    }

    pub fn params(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|(_, t)| t.numel()).sum()
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            encoder_len: self.encoder.len(),
        }
    }

    /// Uses caller-provided graph nodes, in [`VaeModel::params`] order, as the
    /// model parameters. Shapes must match the layout.
    pub fn bind_vars(&self, g: &Graph, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.param_count_tensors() {
            return Err(Error::contract(format!(
                "{} parameter nodes for {} parameter tensors",
                vars.len(),
                self.param_count_tensors()
            )));
        }
        for ((name, t), &v) in self.params().zip(&vars) {
            if g.shape(v) != t.shape() {
                return Err(Error::shape(
                    "bind_vars",
                    format!("{name} expects {:?}, got {:?}", t.shape(), g.shape(v)),
                ));
            }
        }
        Ok(BoundParams {
            vars,
            encoder_len: self.encoder.len(),
        })
    }

    fn param_count_tensors(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    fn conv_bias(g: &mut Graph, x: Var, w: Var, b: Var, conv: Conv2dParams) -> Result<Var> {
        let y = g.conv2d(x, w, conv)?;
        let c = g.shape(b)[0];
        let b = g.reshape(b, &[c, 1, 1])?;
        g.add(y, b)
    }

    /// Posterior parameters `(μ, log σ²)` for a batch shaped `[B, input_shape…]`.
    pub fn encode(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<GaussianLatent> {
        let shape = g.shape(x).to_vec();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(
                "encode",
                format!(
                    "batch {shape:?} does not match input shape {:?}",
                    self.spec.input_shape
                ),
            ));
        }
        let batch = shape[0];
        let d = self.spec.latent_dim;
        let p = params.encoder();
        let head = match &self.spec.arch {
            Architecture::Mlp { .. } => {
                let mut h = g.reshape(x, &[batch, self.spec.input_len()])?;
                let layers = p.len() / 2;
                for i in 0..layers {
                    h = Self::linear(g, h, p[2 * i], p[2 * i + 1])?;
                    if i + 1 < layers {
                        h = g.relu(h);
                    }
                }
                h
            }
            Architecture::Conv2d { stride, .. } => {
                let plan = self.spec.conv_plan()?;
                let conv = Conv2dParams {
                    stride: *stride,
                    padding: plan.padding,
                };
                let stages = plan.extents.len() - 1;
                let mut h = x;
                for i in 0..stages {
                    h = Self::conv_bias(g, h, p[2 * i], p[2 * i + 1], conv)?;
                    h = g.relu(h);
                }
                let flat: usize = g.shape(h)[1..].iter().product();
                let h = g.reshape(h, &[batch, flat])?;
                Self::linear(g, h, p[2 * stages], p[2 * stages + 1])?
            }
        };
        let mu = g.narrow(head, 1, 0, d)?;
        let logvar = g.narrow(head, 1, d, d)?;
        GaussianLatent::new(g, mu, logvar)
    }

    /// Decoder mean for latent codes `[B, d]`, shaped `[B, input_shape…]`.
    /// The last layer is linear.
    pub fn decode(&self, g: &mut Graph, params: &BoundParams, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.latent_dim {
            return Err(Error::shape(
                "decode",
                format!("latent batch {shape:?} is not [B, {}]", self.spec.latent_dim),
            ));
        }
        let batch = shape[0];
        let p = params.decoder();
        let mut out_shape = vec![batch];
        out_shape.extend(&self.spec.input_shape);
        match &self.spec.arch {
            Architecture::Mlp { .. } => {
                let layers = p.len() / 2;
                let mut h = z;
                for i in 0..layers {
                    h = Self::linear(g, h, p[2 * i], p[2 * i + 1])?;
                    if i + 1 < layers {
                        h = g.relu(h);
                    }
                }
                g.reshape(h, &out_shape)
            }
            Architecture::Conv2d {
                channels, stride, ..
            } => {
                let plan = self.spec.conv_plan()?;
                let (h0, w0) = *plan.extents.last().expect("non-empty");
                let c0 = *channels.last().expect("non-empty");
                let mut h = Self::linear(g, z, p[0], p[1])?;
                h = g.relu(h);
                h = g.reshape(h, &[batch, c0, h0, w0])?;
                let conv = Conv2dParams {
                    stride: 1,
                    padding: plan.padding,
                };
                let stages = channels.len();
                for s in 0..stages {
                    h = g.upsample_nearest(h, *stride)?;
                    h = Self::conv_bias(g, h, p[2 + 2 * s], p[3 + 2 * s], conv)?;
                    if s + 1 < stages {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }

    /// `(μ, log σ²)` as plain tensors.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let lat = self.encode(&mut g, &p, xv)?;
        Ok((g.value(lat.mu).clone(), g.value(lat.logvar).clone()))
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.decode(&mut g, &p, zv)?;
        Ok(g.value(out).clone())
    }
}
