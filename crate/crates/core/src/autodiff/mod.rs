//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass in execution order.
//! [`Tape::backward`] walks the record in reverse and leaves a gradient on every
//! node that depends on a leaf created with [`Tape::leaf`] or [`Tape::param`].
//! Parameter gradients are then added into a [`Parameters`] store with
//! [`Tape::accumulate_param_grads`], so repeated backward calls accumulate.
//!
//! Binary ops accept equal shapes, or a one-element tensor on either side.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig};
pub use kernels::PadMode;
pub use params::{ParamId, Parameter, Parameters};

use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Prelu,
    PixelShuffle,
    PixelUnshuffle,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Sum,
    Mean,
    SumSquares,
    Reshape,
    Powf,
    ClampMin,
    Ln,
    AvgPool2,
    SeparableFilter,
    StraightThrough,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    PixelShuffle {
        input: Var,
        r: usize,
    },
    PixelUnshuffle {
        input: Var,
        r: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Reshape(Var),
    Powf(Var, T),
    ClampMin(Var, T),
    Ln(Var),
    AvgPool2(Var),
    SeparableFilter {
        input: Var,
        kernel: Vec<T>,
    },
    StraightThrough(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { train: true, .. } => OpKind::BatchNormTrain,
            Op::BatchNorm { train: false, .. } => OpKind::BatchNormEval,
            Op::Prelu { .. } => OpKind::Prelu,
            Op::PixelShuffle { .. } => OpKind::PixelShuffle,
            Op::PixelUnshuffle { .. } => OpKind::PixelUnshuffle,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumSquares(_) => OpKind::SumSquares,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Powf(..) => OpKind::Powf,
            Op::ClampMin(..) => OpKind::ClampMin,
            Op::Ln(_) => OpKind::Ln,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::SeparableFilter { .. } => OpKind::SeparableFilter,
            Op::StraightThrough(_) => OpKind::StraightThrough,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Running statistics of one batch-norm layer, updated in place in train mode.
pub struct BnRunning<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnOptions {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnOptions {
    fn default() -> Self {
        BnOptions {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every gradient produced by `kind` by 1.5. Only meant for checking
    /// that the gradient checker notices a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Prelu { input, slope } => vec![input, slope],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::PixelShuffle { input, .. }
            | Op::PixelUnshuffle { input, .. }
            | Op::SeparableFilter { input, .. } => vec![input],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::Reshape(a)
            | Op::Powf(a, _)
            | Op::ClampMin(a, _)
            | Op::Ln(a)
            | Op::AvgPool2(a)
            | Op::StraightThrough(a) => vec![a],
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// A differentiable input; its gradient is available through [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn param(&mut self, params: &Parameters<T>, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient left on `v` by the most recent backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- layers ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::dim(format!(
                "conv weight {:?} does not fit input {:?}",
                self.shape(weight),
                self.shape(input)
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv bias {:?} for {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        if stride == 0 {
            return Err(Error::Precondition("conv stride must be positive".into()));
        }
        let k = kh;
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(Error::Precondition(format!(
                "reflection pad {pad} needs input larger than {h}x{w}"
            )));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            mode,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, cout, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    fn bn_check(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch norm affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization with batch statistics. When `running` is given, the
    /// running mean and (unbiased) variance are updated by exponential moving average.
    pub fn batchnorm2d_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<BnRunning<'_, T>>,
        opts: BnOptions,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_check(input, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::Precondition(format!(
                "batch norm over {m} value(s) per channel in train mode"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::of(opts.eps);
        let mf = T::of(m as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * hw;
                sum += x[base..base + hw].iter().copied().sum();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for &v in &x[base..base + hw] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / mf;
            let is = T::one() / (var + eps).sqrt();
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (x[i] - mean) * is;
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
            inv_std[ch] = is;
            means[ch] = mean;
            vars[ch] = var;
        }
        if let Some(run) = running {
            if run.mean.len() != c || run.var.len() != c {
                return Err(Error::dim("running stats length differs from channels"));
            }
            let mom = T::of(opts.momentum);
            let unbias = mf / T::of((m - 1) as f64);
            for ch in 0..c {
                run.mean[ch] = (T::one() - mom) * run.mean[ch] + mom * means[ch];
                run.var[ch] = (T::one() - mom) * run.var[ch] + mom * vars[ch] * unbias;
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
        ))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        opts: BnOptions,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_check(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("running stats length differs from channels"));
        }
        if running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Precondition("negative running variance".into()));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::of(opts.eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (x[i] - running_mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
        ))
    }

    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.shape(slope) != [shape[1]] {
            return Err(Error::dim(format!(
                "prelu slope {:?} for input {shape:?}",
                self.shape(slope)
            )));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let a = self.value(slope).data();
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { a[(i / inner) % c] * v })
            .collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Prelu { input, slope }))
    }

    /// Depth-to-space: `[N, C·r², H, W] -> [N, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::dim(format!(
                "pixel shuffle by {r} needs channels divisible by {}, got {c}",
                r * r
            )));
        }
        let out = kernels::pixel_shuffle(self.value(input).data(), (n, c, h, w), r, false);
        let value = Tensor::new(vec![n, c / (r * r), h * r, w * r], out)?;
        Ok(self.push(value, Op::PixelShuffle { input, r }))
    }

    /// Space-to-depth, the inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::dim(format!(
                "pixel unshuffle by {r} needs spatial dims divisible by it, got {h}x{w}"
            )));
        }
        let out =
            kernels::pixel_shuffle(self.value(input).data(), (n, c * r * r, h / r, w / r), r, true);
        let value = Tensor::new(vec![n, c * r * r, h / r, w / r], out)?;
        Ok(self.push(value, Op::PixelUnshuffle { input, r }))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        if tb.is_scalar() {
            let s = tb.data()[0];
            return Ok(ta.map(|x| f(x, s)));
        }
        if ta.is_scalar() {
            let s = ta.data()[0];
            return Ok(tb.map(|y| f(s, y)));
        }
        Err(Error::dim(format!(
            "incompatible shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast(a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(v, Op::Mean(a))
    }

    pub fn sum_of_squares(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().map(|&x| x * x).sum());
        self.push(v, Op::SumSquares(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `a^p`; defined for positive entries (clamp first).
    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        let v = self.value(a).map(|x| x.max(min));
        self.push(v, Op::ClampMin(a, min))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("cannot 2x2-pool a {h}x{w} map")));
        }
        let out = kernels::avg_pool2(self.value(a).data(), (n, c, h, w));
        let v = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(v, Op::AvgPool2(a)))
    }

    /// Valid-mode separable filtering of every plane with `kernel` along both axes.
    pub fn separable_filter(&mut self, a: Var, kernel: &[T]) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let k = kernel.len();
        if k == 0 || k > h || k > w {
            return Err(Error::Precondition(format!(
                "filter of size {k} does not fit a {h}x{w} map"
            )));
        }
        let out = kernels::separable_filter(self.value(a).data(), (n, c, h, w), kernel);
        let v = Tensor::new(vec![n, c, h + 1 - k, w + 1 - k], out)?;
        Ok(self.push(
            v,
            Op::SeparableFilter {
                input: a,
                kernel: kernel.to_vec(),
            },
        ))
    }

    /// Forward value `replacement`, gradient passed to `a` unchanged.
    pub fn straight_through(&mut self, a: Var, replacement: Tensor<T>) -> Result<Var> {
        self.value(a).check_same_shape(&replacement)?;
        Ok(self.push(replacement, Op::StraightThrough(a)))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_from(loss, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_from(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        self.value(root).check_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                let mut contribs = self.node_backward(i, &g)?;
                if self.fault == Some(self.nodes[i].op.kind()) {
                    let f = T::of(1.5);
                    for (_, t) in contribs.iter_mut() {
                        t.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                }
                for (p, t) in contribs {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&t)?,
                        slot => *slot = Some(t),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every parameter node into `params`.
    pub fn accumulate_param_grads(&self, params: &mut Parameters<T>) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.get_mut(*id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Gradient contribution for a broadcast operand: sum if it was a scalar.
    fn reduce_to(&self, target: Var, g: Tensor<T>) -> Tensor<T> {
        if self.value(target).shape() == g.shape() {
            g
        } else {
            Tensor::scalar(g.sum())
        }
    }

    fn elementwise_grad(&self, target: Var, g: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
        let t = Tensor::new(
            g.shape().to_vec(),
            g.data().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect(),
        )
        .expect("same shape as gradient");
        self.reduce_to(target, t)
    }

    /// Value at flat index `i` of `v`, honouring scalar broadcast.
    fn at(&self, v: Var, i: usize) -> T {
        let d = self.value(v).data();
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v).to_vec(), data);
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_input = self.nodes[input.0].requires_grad;
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    need_input,
                );
                let mut v = vec![(*weight, like(*weight, grads.weight)?)];
                if need_input {
                    v.push((*input, like(*input, grads.input)?));
                }
                if let Some(b) = bias {
                    v.push((*b, like(*b, grads.bias)?));
                }
                v
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = out.dims4()?;
                let hw = h * w;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            dbeta[ch] += gd[j];
                            dgamma[ch] += gd[j] * xhat[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                let mf = T::of((n * hw) as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let scale = gam[ch] * inv_std[ch];
                        for j in base..base + hw {
                            dx[j] = if *train {
                                scale / mf * (mf * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            } else {
                                scale * gd[j]
                            };
                        }
                    }
                }
                vec![
                    (*input, like(*input, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::Prelu { input, slope } => {
                let x = self.value(*input);
                let shape = x.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let a = self.value(*slope).data();
                let mut dslope = vec![T::zero(); c];
                let mut dx = vec![T::zero(); x.numel()];
                for (j, (&xv, &gv)) in x.data().iter().zip(g.data()).enumerate() {
                    let ch = (j / inner) % c;
                    if xv > T::zero() {
                        dx[j] = gv;
                    } else {
                        dx[j] = a[ch] * gv;
                        dslope[ch] += xv * gv;
                    }
                }
                vec![
                    (*input, like(*input, dx)?),
                    (*slope, like(*slope, dslope)?),
                ]
            }
            Op::PixelShuffle { input, r } => {
                let dims = self.value(*input).dims4()?;
                let d = kernels::pixel_shuffle(g.data(), dims, *r, true);
                vec![(*input, like(*input, d)?)]
            }
            Op::PixelUnshuffle { input, r } => {
                let d = kernels::pixel_shuffle(g.data(), out.dims4()?, *r, false);
                vec![(*input, like(*input, d)?)]
            }
            Op::Add(a, b) => vec![
                (*a, self.reduce_to(*a, g.clone())),
                (*b, self.reduce_to(*b, g.clone())),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.reduce_to(*a, g.clone())),
                (*b, self.reduce_to(*b, g.map(|v| -v))),
            ],
            Op::Mul(a, b) => vec![
                (*a, self.elementwise_grad(*a, g, |j, gv| gv * self.at(*b, j))),
                (*b, self.elementwise_grad(*b, g, |j, gv| gv * self.at(*a, j))),
            ],
            Op::Div(a, b) => vec![
                (*a, self.elementwise_grad(*a, g, |j, gv| gv / self.at(*b, j))),
                (
                    *b,
                    self.elementwise_grad(*b, g, |j, gv| {
                        let bv = self.at(*b, j);
                        -gv * self.at(*a, j) / (bv * bv)
                    }),
                ),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
            Op::AddScalar(a) | Op::StraightThrough(a) => vec![(*a, g.clone())],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.data()[0]))],
            Op::Mean(a) => {
                let n = T::of(self.value(*a).numel() as f64);
                vec![(*a, Tensor::full(self.shape(*a), g.data()[0] / n))]
            }
            Op::SumSquares(a) => {
                let two_g = T::of(2.0) * g.data()[0];
                vec![(*a, self.value(*a).map(|x| two_g * x))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.shape(*a))?)],
            Op::Powf(a, p) => {
                let x = self.value(*a);
                vec![(*a, x.zip_map(g, |xv, gv| *p * xv.powf(*p - T::one()) * gv)?)]
            }
            Op::ClampMin(a, m) => {
                let x = self.value(*a);
                vec![(
                    *a,
                    x.zip_map(g, |xv, gv| if xv > *m { gv } else { T::zero() })?,
                )]
            }
            Op::Ln(a) => vec![(*a, self.value(*a).zip_map(g, |xv, gv| gv / xv)?)],
            Op::AvgPool2(a) => {
                let d = kernels::avg_pool2_backward(g.data(), self.value(*a).dims4()?);
                vec![(*a, like(*a, d)?)]
            }
            Op::SeparableFilter { input, kernel } => {
                let d = kernels::separable_filter_backward(
                    g.data(),
                    self.value(*input).dims4()?,
                    kernel,
                );
                vec![(*input, like(*input, d)?)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sum_kernel_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_output_geometry_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1, PadMode::Reflect).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
        let bad_w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, bad_w, None, 1, 0, PadMode::Zero),
            Err(Error::Dimension(_))
        ));
        let tiny = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(
            tape.conv2d(tiny, w, None, 1, 2, PadMode::Reflect),
            Err(Error::Precondition(_))
        ));
        assert!(tape.conv2d(tiny, w, None, 1, 2, PadMode::Zero).is_ok());
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 2, 3, 3], |i| ((i * 7919) % 13) as f64 * 0.3 + 1.0));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .batchnorm2d_train(x, g, b, None, BnOptions::default())
            .unwrap();
        let v = tape.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| v[(s * 2 + ch) * 9..(s * 2 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let x = tape.constant(t(&[1, 2, 2, 2], &data));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let opts = BnOptions::default();
        let y = tape
            .batchnorm2d_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], opts)
            .unwrap();
        let s = 1.0 / (1.0 + opts.eps).sqrt();
        for (o, i) in tape.value(y).data().iter().zip(&data) {
            assert!((o - i * s).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batchnorm2d_train(x, g, b, None, BnOptions::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        tape.batchnorm2d_train(
            x,
            g,
            b,
            Some(BnRunning {
                mean: &mut m,
                var: &mut v,
            }),
            BnOptions::default(),
        )
        .unwrap();
        // batch mean 4, unbiased variance 20/3
        assert!((m[0] - 0.4).abs() < 1e-12);
        assert!((v[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn prelu_branches() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[3.0, -2.0]));
        let a = tape.constant(t(&[1], &[0.25]));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -0.5]);
    }

    #[test]
    fn pixel_shuffle_depth_to_space() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let same = tape.pixel_shuffle(x, 1).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let bad = tape.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(tape.pixel_shuffle(bad, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let same = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let ss = tape.sum_of_squares(x);
        assert_eq!(tape.scalar(ss), 25.0);
        let other = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(x, other), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_of_mean_is_one_over_n() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[5], |i| i as f64));
        let m = tape.mean(x);
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.2));
    }

    #[test]
    fn backward_simple_rules() {
        let mut params = Parameters::new();
        let id = params.add("p", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&params, id);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get(id).grad.data(), &[1.0, 1.0]);

        params.zero_grad();
        let mut tape = Tape::new();
        let p = tape.param(&params, id);
        let s = tape.sum_of_squares(p);
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get(id).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut params = Parameters::new();
        let id = params
            .add("w", Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.7).sin()))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f64 * 0.3).cos()));
        let w = tape.param(&params, id);
        let y = tape.conv2d(x, w, None, 1, 1, PadMode::Reflect).unwrap();
        let l = tape.sum_of_squares(y);
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        let once = params.get(id).grad.clone();
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        let twice = &params.get(id).grad;
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[3], &[0.2, 1.7, -0.4]));
        let q = tape.straight_through(z, t(&[3], &[0.0, 2.0, 0.0])).unwrap();
        let w = tape.constant(t(&[3], &[1.5, -2.0, 0.5]));
        let y = tape.mul(q, w).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[1.5, -2.0, 0.5]);
    }
}
