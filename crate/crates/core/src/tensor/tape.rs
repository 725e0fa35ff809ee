//! Wengert tape: operations are recorded in forward order and replayed in
//! exact reverse for the backward pass. One tape is single-threaded and
//! deterministic; independent tapes may live on different threads.

use crate::error::{Error, Result};

use super::kernels::{self, Conv3dDims};
use super::{sigmoid, Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope, 0.1 in the network.
    LeakyRelu(f64),
    Softplus,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Abs(Var),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: Conv3dDims,
    },
    Down2(Var),
    Up2(Var),
    ConcatChannels(Var, Var),
    SoftplusNorm(Var),
    SoftmaxNorm(Var, T),
    ExpectedDepth(Var, Vec<T>),
    FuseAif {
        weights: Var,
        stack: Var,
    },
    DiffX(Var),
    DiffY(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated leaf gradient; summed across backward passes until reset.
    grad: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Register an input tensor. Gradients accumulate on it across
    /// backward passes when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        Ok(self.push(value, Op::Add(a, b), self.needs_grad(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        Ok(self.push(value, Op::Sub(a, b), self.needs_grad(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(value, Op::Mul(a, b), self.needs_grad(&[a, b])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push(value, Op::Neg(a), self.needs_grad(&[a]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), self.needs_grad(&[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        self.push(value, Op::Abs(a), self.needs_grad(&[a]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Activation::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                self.value(a).map(|x| if x > T::zero() { x } else { x * s })
            }
            Activation::Softplus => self.value(a).map(super::softplus),
        };
        self.push(value, Op::Act(a, kind), self.needs_grad(&[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total), Op::Sum(a), self.needs_grad(&[a]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(total / n), Op::Mean(a), self.needs_grad(&[a]))
    }

    /// 3D convolution over `[H, W, Cin, F]` with weights `[k, k, Cin, Cout, kf]`
    /// and bias `[Cout]`. Spatial zero padding `pad`, spatial stride `stride`;
    /// the stack axis is always stride 1 and zero-padded by `(kf-1)/2` so the
    /// frame extent is preserved.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        if ishape.len() != 4 {
            return Err(Error::invalid(format!(
                "conv3d input must be rank-4 [H,W,C,F], got {ishape:?}"
            )));
        }
        if wshape.len() != 5 {
            return Err(Error::invalid(format!(
                "conv3d weight must be rank-5 [k,k,Cin,Cout,kf], got {wshape:?}"
            )));
        }
        let (h, w, cin, f) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k0, k1, wcin, cout, kf) = (wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]);
        if k0 != k1 {
            return Err(Error::invalid(format!(
                "conv3d spatial kernel must be square, got {k0}x{k1}"
            )));
        }
        if k0 % 2 == 0 || kf % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv3d kernel extents must be odd, got k={k0}, kf={kf}"
            )));
        }
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                context: "conv3d input channels vs weight channels",
                lhs: ishape,
                rhs: wshape,
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::ShapeMismatch {
                context: "conv3d bias",
                lhs: self.value(bias).shape().to_vec(),
                rhs: vec![cout],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d stride must be >= 1"));
        }
        if h + 2 * pad < k0 || w + 2 * pad < k0 {
            return Err(Error::invalid(format!(
                "conv3d input {h}x{w} too small for kernel {k0} with pad {pad}"
            )));
        }
        let dims = Conv3dDims {
            h,
            w,
            cin,
            f,
            k: k0,
            cout,
            kf,
            stride,
            pad,
        };
        let data = kernels::conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            dims,
        );
        let value = Tensor::new(vec![dims.out_h(), dims.out_w(), cout, f], data)?;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// 2x2 average pooling over H and W. Both extents must be even.
    pub fn down2(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!(
                "down2 needs at least [H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "down2 requires even H and W, got {h}x{w}"
            )));
        }
        let rest: usize = shape[2..].iter().product();
        let data = kernels::down2_forward(self.value(a).data(), h, w, rest.max(1));
        let mut out_shape = shape.clone();
        out_shape[0] = h / 2;
        out_shape[1] = w / 2;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Down2(a), self.needs_grad(&[a])))
    }

    /// Nearest-neighbor 2x upsampling over H and W.
    pub fn up2(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!(
                "up2 needs at least [H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        let data = kernels::up2_forward(self.value(a).data(), h, w, rest.max(1));
        let mut out_shape = shape.clone();
        out_shape[0] = 2 * h;
        out_shape[1] = 2 * w;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Up2(a), self.needs_grad(&[a])))
    }

    /// Concatenate two `[H, W, C, F]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[3] {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let (h, w, ca, cb, f) = (sa[0], sa[1], sa[2], sb[2], sa[3]);
        let mut data = vec![T::zero(); h * w * (ca + cb) * f];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for px in 0..h * w {
            let o = px * (ca + cb) * f;
            data[o..o + ca * f].copy_from_slice(&da[px * ca * f..(px + 1) * ca * f]);
            data[o + ca * f..o + (ca + cb) * f].copy_from_slice(&db[px * cb * f..(px + 1) * cb * f]);
        }
        let value = Tensor::new(vec![h, w, ca + cb, f], data)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), self.needs_grad(&[a, b])))
    }

    /// Softplus normalization over the frame axis of `[H, W, C, F]` scores.
    pub fn softplus_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!(
                "softplus_norm expects [H,W,C,F], got {shape:?}"
            )));
        }
        if let Some(idx) = self.value(a).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "softplus_norm input",
                index: idx,
            });
        }
        let f = shape[3];
        let data = kernels::softplus_norm_forward(self.value(a).data(), f);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SoftplusNorm(a), self.needs_grad(&[a])))
    }

    /// Softmax over the frame axis of `[H, W, C, F]` scores, with max
    /// subtraction and a temperature factor (1 = plain softmax).
    pub fn softmax_norm(&mut self, a: Var, temperature: T) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!(
                "softmax_norm expects [H,W,C,F], got {shape:?}"
            )));
        }
        if temperature <= T::zero() {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let f = shape[3];
        let data = kernels::softmax_norm_forward(self.value(a).data(), f, temperature);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SoftmaxNorm(a, temperature), self.needs_grad(&[a])))
    }

    /// Per-pixel expectation over focus positions: `[H,W,C,F] -> [H,W,C]`.
    pub fn expected_depth(&mut self, weights: Var, positions: &[T]) -> Result<Var> {
        let shape = self.value(weights).shape().to_vec();
        if shape.len() != 4 || shape[3] != positions.len() {
            return Err(Error::ShapeMismatch {
                context: "expected_depth weights vs positions",
                lhs: shape,
                rhs: vec![positions.len()],
            });
        }
        let data = kernels::expected_depth_forward(self.value(weights).data(), positions);
        let value = Tensor::new(shape[..3].to_vec(), data)?;
        let rg = self.needs_grad(&[weights]);
        Ok(self.push(value, Op::ExpectedDepth(weights, positions.to_vec()), rg))
    }

    /// Weighted blend of stack slices: weights `[H,W,1,F]`, stack
    /// `[H,W,C,F]` -> `[H,W,C]`.
    pub fn fuse_aif(&mut self, weights: Var, stack: Var) -> Result<Var> {
        let ws = self.value(weights).shape().to_vec();
        let ss = self.value(stack).shape().to_vec();
        if ws.len() != 4 || ss.len() != 4 || ws[0] != ss[0] || ws[1] != ss[1] || ws[2] != 1 || ws[3] != ss[3] {
            return Err(Error::ShapeMismatch {
                context: "fuse_aif weights vs stack",
                lhs: ws,
                rhs: ss,
            });
        }
        let (c, f) = (ss[2], ss[3]);
        let data =
            kernels::fuse_aif_forward(self.value(weights).data(), self.value(stack).data(), c, f);
        let value = Tensor::new(vec![ss[0], ss[1], c], data)?;
        let rg = self.needs_grad(&[weights, stack]);
        Ok(self.push(value, Op::FuseAif { weights, stack }, rg))
    }

    /// Forward difference along W; output drops the last column.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 || shape[1] < 2 {
            return Err(Error::invalid(format!(
                "diff_x needs W >= 2, got shape {shape:?}"
            )));
        }
        let rest: usize = shape[2..].iter().product();
        let data = kernels::diff_x_forward(self.value(a).data(), shape[0], shape[1], rest.max(1));
        let mut out_shape = shape.clone();
        out_shape[1] -= 1;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::DiffX(a), self.needs_grad(&[a])))
    }

    /// Forward difference along H; output drops the last row.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 || shape[0] < 2 {
            return Err(Error::invalid(format!(
                "diff_y needs H >= 2, got shape {shape:?}"
            )));
        }
        let rest: usize = shape[2..].iter().product();
        let data = kernels::diff_y_forward(self.value(a).data(), shape[0], shape[1], rest.max(1));
        let mut out_shape = shape.clone();
        out_shape[0] -= 1;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::DiffY(a), self.needs_grad(&[a])))
    }

    /// Reverse pass from a scalar loss. Visits every recorded operation at
    /// or before the loss exactly once, in exact reverse recording order.
    /// Leaf gradients accumulate additively across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a one-element loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adjoint: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            self.apply_backward(i, &g, &mut adjoint);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                let grad = node
                    .grad
                    .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
                for (acc, &dv) in grad.data_mut().iter_mut().zip(&g) {
                    *acc = *acc + dv;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, adjoint: &mut [Option<Vec<T>>], v: Var, update: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = adjoint[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        update(buf);
    }

    fn apply_backward(&self, i: usize, g: &[T], adjoint: &mut [Option<Vec<T>>]) {
        // Cloning the op keeps the borrow checker out of the node arena.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adjoint, a, |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o = *o + x;
                    }
                });
                self.accumulate(adjoint, b, |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o = *o + x;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoint, a, |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o = *o + x;
                    }
                });
                self.accumulate(adjoint, b, |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.accumulate(adjoint, a, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(db) {
                        *o = *o + x * y;
                    }
                });
                self.accumulate(adjoint, b, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(da) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::Neg(a) => self.accumulate(adjoint, a, |buf| {
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o = *o - x;
                }
            }),
            Op::Scale(a, c) => self.accumulate(adjoint, a, |buf| {
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o = *o + x * c;
                }
            }),
            Op::Abs(a) => {
                let da = self.nodes[a.0].value.data();
                self.accumulate(adjoint, a, |buf| {
                    for ((o, &x), &v) in buf.iter_mut().zip(g).zip(da) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o = *o + x * s;
                    }
                });
            }
            Op::Act(a, kind) => {
                let da = self.nodes[a.0].value.data();
                self.accumulate(adjoint, a, |buf| match kind {
                    Activation::Relu => {
                        for ((o, &x), &v) in buf.iter_mut().zip(g).zip(da) {
                            if v > T::zero() {
                                *o = *o + x;
                            }
                        }
                    }
                    Activation::LeakyRelu(slope) => {
                        let s = T::from_f64(slope);
                        for ((o, &x), &v) in buf.iter_mut().zip(g).zip(da) {
                            *o = *o + if v > T::zero() { x } else { x * s };
                        }
                    }
                    Activation::Softplus => {
                        for ((o, &x), &v) in buf.iter_mut().zip(g).zip(da) {
                            *o = *o + x * sigmoid(v);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g[0];
                self.accumulate(adjoint, a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gs;
                    }
                });
            }
            Op::Mean(a) => {
                let gs = g[0] / T::from_f64(self.nodes[a.0].value.numel() as f64);
                self.accumulate(adjoint, a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gs;
                    }
                });
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                dims,
            } => {
                let din = self.nodes[input.0].value.data();
                let dw = self.nodes[weight.0].value.data();
                let mut gin = if self.nodes[input.0].requires_grad {
                    vec![T::zero(); din.len()]
                } else {
                    Vec::new()
                };
                let mut gw = if self.nodes[weight.0].requires_grad {
                    vec![T::zero(); dw.len()]
                } else {
                    Vec::new()
                };
                let mut gb = if self.nodes[bias.0].requires_grad {
                    vec![T::zero(); dims.cout]
                } else {
                    Vec::new()
                };
                kernels::conv3d_backward(din, dw, g, dims, &mut gin, &mut gw, &mut gb);
                if !gin.is_empty() {
                    self.accumulate(adjoint, input, |buf| {
                        for (o, &x) in buf.iter_mut().zip(&gin) {
                            *o = *o + x;
                        }
                    });
                }
                if !gw.is_empty() {
                    self.accumulate(adjoint, weight, |buf| {
                        for (o, &x) in buf.iter_mut().zip(&gw) {
                            *o = *o + x;
                        }
                    });
                }
                if !gb.is_empty() {
                    self.accumulate(adjoint, bias, |buf| {
                        for (o, &x) in buf.iter_mut().zip(&gb) {
                            *o = *o + x;
                        }
                    });
                }
            }
            Op::Down2(a) => {
                let shape = self.nodes[a.0].value.shape();
                let (h, w) = (shape[0], shape[1]);
                let rest: usize = shape[2..].iter().product();
                self.accumulate(adjoint, a, |buf| {
                    kernels::down2_backward(g, h, w, rest.max(1), buf);
                });
            }
            Op::Up2(a) => {
                let shape = self.nodes[a.0].value.shape();
                let (h, w) = (shape[0], shape[1]);
                let rest: usize = shape[2..].iter().product();
                self.accumulate(adjoint, a, |buf| {
                    kernels::up2_backward(g, h, w, rest.max(1), buf);
                });
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (h, w, ca, cb, f) = (sa[0], sa[1], sa[2], sb[2], sa[3]);
                self.accumulate(adjoint, a, |buf| {
                    for px in 0..h * w {
                        let o = px * (ca + cb) * f;
                        for idx in 0..ca * f {
                            buf[px * ca * f + idx] = buf[px * ca * f + idx] + g[o + idx];
                        }
                    }
                });
                self.accumulate(adjoint, b, |buf| {
                    for px in 0..h * w {
                        let o = px * (ca + cb) * f + ca * f;
                        for idx in 0..cb * f {
                            buf[px * cb * f + idx] = buf[px * cb * f + idx] + g[o + idx];
                        }
                    }
                });
            }
            Op::SoftplusNorm(a) => {
                let scores = self.nodes[a.0].value.data();
                let weights = self.nodes[i].value.data();
                let f = self.nodes[i].value.shape()[3];
                self.accumulate(adjoint, a, |buf| {
                    kernels::softplus_norm_backward(scores, weights, g, f, buf);
                });
            }
            Op::SoftmaxNorm(a, temperature) => {
                let weights = self.nodes[i].value.data();
                let f = self.nodes[i].value.shape()[3];
                self.accumulate(adjoint, a, |buf| {
                    kernels::softmax_norm_backward(weights, g, f, temperature, buf);
                });
            }
            Op::ExpectedDepth(a, positions) => {
                self.accumulate(adjoint, a, |buf| {
                    kernels::expected_depth_backward(g, &positions, buf);
                });
            }
            Op::FuseAif { weights, stack } => {
                let dw = self.nodes[weights.0].value.data();
                let ds = self.nodes[stack.0].value.data();
                let ss = self.nodes[stack.0].value.shape();
                let (c, f) = (ss[2], ss[3]);
                self.accumulate(adjoint, weights, |buf| {
                    kernels::fuse_aif_backward(dw, ds, g, c, f, buf, &mut []);
                });
                self.accumulate(adjoint, stack, |buf| {
                    kernels::fuse_aif_backward(dw, ds, g, c, f, &mut [], buf);
                });
            }
            Op::DiffX(a) => {
                let shape = self.nodes[a.0].value.shape();
                let (h, w) = (shape[0], shape[1]);
                let rest: usize = shape[2..].iter().product();
                self.accumulate(adjoint, a, |buf| {
                    kernels::diff_x_backward(g, h, w, rest.max(1), buf);
                });
            }
            Op::DiffY(a) => {
                let shape = self.nodes[a.0].value.shape();
                let (h, w) = (shape[0], shape[1]);
                let rest: usize = shape[2..].iter().product();
                self.accumulate(adjoint, a, |buf| {
                    kernels::diff_y_backward(g, h, w, rest.max(1), buf);
                });
            }
        }
    }
}
