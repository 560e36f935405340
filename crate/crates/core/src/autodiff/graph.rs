use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of one [`Graph`]. Ids are dense insertion indices, so a
/// node's parents always carry smaller ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Expm1(Var),
    Log(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    MeanAxis(Var, usize),
    BroadcastTo(Var),
    Reshape(Var),
    Transpose(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeometry,
    },
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Build-once, backward-once record of a computation.
///
/// Every operation evaluates eagerly and stores its forward value; `backward`
/// walks the nodes in reverse insertion order. A graph is not `Sync`-shared;
/// use one graph per thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to graph nodes, indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a node that is known to require one.
    ///
    /// Panics when `v` does not require gradients.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("node {} has no gradient", v.0))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shapes(name, va.shape(), vb.shape())?;
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_map(&out_shape, va.shape());
            let mb = kernels::broadcast_map(&out_shape, vb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        Ok(self.push(Tensor::from_parts(out_shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::domain("div", format!("zero divisor at flat index {i}")));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot contract {sa:?} with {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `exp(x) − 1` without cancellation near zero.
    pub fn expm1(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp_m1, Op::Expm1(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("argument {v} is not positive")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ---- reductions ----

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, name: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                name,
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, out))
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis(a, axis, "sum_axis")?;
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut data) = self.reduce_axis(a, axis, "mean_axis")?;
        let len = self.shape(a)[axis] as f64;
        for v in &mut data {
            *v /= len;
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanAxis(a, axis), &[a]))
    }

    // ---- shape manipulation ----

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let out = kernels::broadcast_shapes("broadcast_to", src.shape(), shape)?;
        if out != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} does not broadcast to {shape:?}", src.shape()),
            ));
        }
        let map = kernels::broadcast_map(shape, src.shape());
        let data = map.iter().map(|&i| src.data()[i]).collect();
        Ok(self.push(Tensor::from_parts(out, data), Op::BroadcastTo(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            )
        })?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Transpose of a 2D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    // ---- image ops ----

    /// Cross-correlation of `[N,C,H,W]` input with `[O,C,KH,KW]` weights,
    /// evaluated as im2col followed by a matrix product.
    pub fn conv2d(&mut self, input: Var, weight: Var, params: Conv2dParams) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?} incompatible with weight {sw:?}"),
            ));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let out_h = kernels::conv_out_extent(h, kh, params.stride, params.padding);
        let out_w = kernels::conv_out_extent(w, kw, params.stride, params.padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} with {params:?} does not fit {h}x{w}"),
            ));
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride: params.stride,
            padding: params.padding,
            out_h,
            out_w,
        };
        let (x, wt) = (self.value(input).data(), self.value(weight).data());
        let plane = c * h * w;
        let out_plane = o * out_h * out_w;
        let mut out = vec![0.0; n * out_plane];
        for b in 0..n {
            let cols = kernels::im2col(&x[b * plane..(b + 1) * plane], &geom);
            kernels::matmul_acc(
                wt,
                &cols,
                &mut out[b * out_plane..(b + 1) * out_plane],
                o,
                geom.cols_rows(),
                geom.cols_width(),
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, o, out_h, out_w], out),
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            &[input, weight],
        ))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("expected [N,C,H,W] and factor ≥ 1, got {s:?} ×{factor}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = src[(p * h + i / factor) * w + j / factor];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::UpsampleNearest { input, factor },
            &[input],
        ))
    }

    // ---- reverse pass ----

    /// Reverse-mode accumulation of `d loss / d node` for every node that
    /// requires a gradient. Leaves that do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::from_parts(shape, vec![0.0; node.value.numel()]),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.binary_back(id, a, b, g, grads, |_, _, g| (g, g));
            }
            Op::Sub(a, b) => {
                self.binary_back(id, a, b, g, grads, |_, _, g| (g, -g));
            }
            Op::Mul(a, b) => {
                self.binary_back(id, a, b, g, grads, |x, y, g| (g * y, g * x));
            }
            Op::Div(a, b) => {
                self.binary_back(id, a, b, g, grads, |x, y, g| (g / y, -g * x / (y * y)));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul_a_bt_acc(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_at_b_acc(va, g, gb, m, k, n);
                }
            }
            Op::Neg(a) => self.unary_back(a, g, grads, |_, _, g| -g),
            Op::Scale(a, c) => self.unary_back(a, g, grads, move |_, _, g| g * c),
            Op::AddScalar(a) => self.unary_back(a, g, grads, |_, _, g| g),
            Op::Exp(a) => {
                let ga = self.slot(grads, a);
                if let Some(ga) = ga {
                    for ((acc, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *acc += gi * yi;
                    }
                }
            }
            Op::Expm1(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((acc, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *acc += gi * (yi + 1.0);
                    }
                }
            }
            Op::Log(a) => self.unary_back(a, g, grads, |x, _, g| g / x),
            Op::Relu(a) => self.unary_back(a, g, grads, |x, _, g| if x > 0.0 { g } else { 0.0 }),
            Op::Square(a) => self.unary_back(a, g, grads, |x, _, g| 2.0 * x * g),
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.shape(a).to_vec();
                let (outer, len, inner) = kernels::split_axis(&shape, axis);
                let factor = match node.op {
                    Op::MeanAxis(..) => 1.0 / len as f64,
                    _ => 1.0,
                };
                if let Some(ga) = self.slot(grads, a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * factor;
                            }
                        }
                    }
                }
            }
            Op::BroadcastTo(a) => {
                let map = kernels::broadcast_map(node.value.shape(), self.shape(a));
                if let Some(ga) = self.slot(grads, a) {
                    for (&i, &gi) in map.iter().zip(g) {
                        ga[i] += gi;
                    }
                }
            }
            Op::Reshape(a) => self.unary_back(a, g, grads, |_, _, g| g),
            Op::Transpose(a) => {
                let s = self.shape(a);
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                let shape = self.shape(input).to_vec();
                let (outer, extent, inner) = kernels::split_axis(&shape, axis);
                let len = node.value.shape()[axis];
                if let Some(ga) = self.slot(grads, input) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let n = self.shape(input)[0];
                let o = self.shape(weight)[0];
                let plane = geom.channels * geom.height * geom.width;
                let out_plane = o * geom.cols_width();
                let (x, wt) = (self.value(input).data(), self.value(weight).data());
                if self.nodes[weight.0].requires_grad {
                    let gw = self.slot(grads, weight).expect("weight requires grad");
                    for b in 0..n {
                        let cols = kernels::im2col(&x[b * plane..(b + 1) * plane], &geom);
                        kernels::matmul_a_bt_acc(
                            &g[b * out_plane..(b + 1) * out_plane],
                            &cols,
                            gw,
                            o,
                            geom.cols_width(),
                            geom.cols_rows(),
                        );
                    }
                }
                if let Some(gx) = self.slot(grads, input) {
                    let mut dcols = vec![0.0; geom.cols_rows() * geom.cols_width()];
                    for b in 0..n {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::matmul_at_b_acc(
                            wt,
                            &g[b * out_plane..(b + 1) * out_plane],
                            &mut dcols,
                            o,
                            geom.cols_rows(),
                            geom.cols_width(),
                        );
                        kernels::col2im_acc(&dcols, &geom, &mut gx[b * plane..(b + 1) * plane]);
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                let s = self.shape(input).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(gx) = self.slot(grads, input) {
                    for p in 0..planes {
                        for i in 0..oh {
                            for j in 0..ow {
                                gx[(p * h + i / factor) * w + j / factor] += g[(p * oh + i) * ow + j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Applies `d(input, output, upstream) -> contribution` elementwise.
    fn unary_back(
        &self,
        a: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64, f64) -> f64,
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.slot(grads, a) {
            for (i, (acc, &gi)) in ga.iter_mut().zip(g).enumerate() {
                *acc += d(x[i], 0.0, gi);
            }
        }
    }

    fn binary_back(
        &self,
        out: usize,
        a: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = self.nodes[out].value.shape();
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let same = va.shape() == out_shape && vb.shape() == out_shape;
        let (ma, mb) = if same {
            (None, None)
        } else {
            (
                Some(kernels::broadcast_map(out_shape, va.shape())),
                Some(kernels::broadcast_map(out_shape, vb.shape())),
            )
        };
        let mut da = need_a.then(|| vec![0.0; va.numel()]);
        let mut db = need_b.then(|| vec![0.0; vb.numel()]);
        for (o, &go) in g.iter().enumerate() {
            let ia = ma.as_ref().map_or(o, |m| m[o]);
            let ib = mb.as_ref().map_or(o, |m| m[o]);
            let (ca, cb) = d(va.data()[ia], vb.data()[ib], go);
            if let Some(da) = da.as_mut() {
                da[ia] += ca;
            }
            if let Some(db) = db.as_mut() {
                db[ib] += cb;
            }
        }
        // a and b may be the same node; accumulate sequentially.
        if let Some(da) = da {
            let slot = self.slot(grads, a).expect("requires grad");
            slot.iter_mut().zip(da).for_each(|(s, v)| *s += v);
        }
        if let Some(db) = db {
            let slot = self.slot(grads, b).expect("requires grad");
            slot.iter_mut().zip(db).for_each(|(s, v)| *s += v);
        }
    }

    /// Sign pattern of every ReLU input, plus whether any input sits exactly
    /// on the kink.
    pub(crate) fn relu_signature(&self) -> (Vec<bool>, bool) {
        let mut pattern = Vec::new();
        let mut on_kink = false;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &x in self.value(a).data() {
                    on_kink |= x == 0.0;
                    pattern.push(x > 0.0);
                }
            }
        }
        (pattern, on_kink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = t(&[3, 3], &[1., -2., 3., 4., 5., -6., 7., 8., 9.5]);
        let i = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn exp_log_inverse() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2.5]));
        let l = g.log(x).unwrap();
        let e = g.exp(l);
        assert!((g.value(e).item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
        let one = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        assert!(matches!(g.div(one, x), Err(Error::Domain { .. })));
        let bad = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(one, bad), Err(Error::Shape { .. })));
        assert!(matches!(g.matmul(one, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn relu_dead_region_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-1.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        assert_eq!(g.backward(loss).unwrap().wrt(x).data(), &[0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        assert_eq!(g.backward(loss).unwrap().wrt(x).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused), &Tensor::zeros(&[2, 2]));
        assert!(grads.get(loss).is_some());
    }

    #[test]
    fn shared_operand_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.5]));
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().wrt(x).data(), &[3.0]);
    }

    #[test]
    fn narrow_and_axis_reductions() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let right = g.narrow(x, 1, 2, 2).unwrap();
        assert_eq!(g.value(right).data(), &[3., 4., 7., 8.]);
        let s = g.sum_axis(right, 0).unwrap();
        assert_eq!(g.value(s).data(), &[10., 12.]);
        let m = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[2.5, 6.5]);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0., 0., 1., 1., 0., 0., 1., 1.]);
    }

    #[test]
    fn conv2d_box_filter() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = g
            .conv2d(x, w, Conv2dParams { stride: 1, padding: 0 })
            .unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[12., 16., 24., 28.]);
        let padded = g
            .conv2d(x, w, Conv2dParams { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(g.value(padded).data(), &[1., 5., 11., 28.]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 1, 2], &[1., 2.]));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().wrt(x).data(), &[4., 4.]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3, 2]));
        let b = g.param(Tensor::from_vec(vec![0.5, -0.5]));
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().wrt(b).data(), &[3.0, 3.0]);
    }
}
