use rand::{Rng, RngCore};

use super::kernels::{self, Geometry};
use super::{numel_of, Scalar, Tensor};
use crate::error::{ensure, invalid, Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BnState<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }
}

/// How a batchnorm node obtains its statistics.
pub enum BnStats<'a, T: Scalar> {
    /// Normalize with batch statistics and fold them into the running state.
    Train(&'a mut BnState<T>),
    /// Normalize with the running statistics.
    Eval(&'a BnState<T>),
    /// Normalize with batch statistics, leaving the running state untouched.
    Batch(&'a BnState<T>),
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Geometry,
        cols: Vec<T>,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: Geometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Map {
        input: Var,
        derivative: fn(T) -> T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Each op appends a node; [`Graph::backward`]
/// replays the adjoints in reverse order of execution.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    trace: Vec<Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(invalid!("{what}: expected an NCHW tensor, got shape {shape:?}")),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.clear_grad();
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Adds the gradient recorded for `v` into `target`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        let g = self
            .grad(v)
            .ok_or_else(|| Error::InvalidState(format!("node {} has no gradient", v.0)))?;
        target.accumulate_grad(g)
    }

    /// Nodes whose adjoints ran during the last backward pass, in visit order.
    pub fn backward_trace(&self) -> &[Var] {
        &self.trace
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor::new(shape, data).expect("kernel output matches its shape")
    }

    fn check_conv_params(
        &self,
        op: &str,
        in_channels: usize,
        weight: Var,
        bias: Var,
        stride: usize,
        transposed: bool,
    ) -> Result<(usize, usize)> {
        let ws = self.shape(weight);
        ensure!(ws.len() == 4, "{op}: weight must be rank 4, got {ws:?}");
        ensure!(ws[2] == ws[3], "{op}: kernel must be square, got {}x{}", ws[2], ws[3]);
        ensure!(stride > 0, "{op}: stride must be positive");
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        ensure!(
            w_in == in_channels,
            "{op}: input channels {in_channels} do not match weight input channels {w_in}"
        );
        let bs = self.shape(bias);
        ensure!(
            bs == [w_out],
            "{op}: bias shape {bs:?} does not match output channels {w_out}"
        );
        Ok((w_out, ws[2]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(input), "conv2d")?;
        let (c_out, k) = self.check_conv_params("conv2d", c, weight, bias, stride, false)?;
        ensure!(
            h + 2 * pad >= k,
            "conv2d: input height {h} with padding {pad} is smaller than kernel {k}"
        );
        ensure!(
            w + 2 * pad >= k,
            "conv2d: input width {w} with padding {pad} is smaller than kernel {k}"
        );
        let geom = Geometry::conv(n, c, h, w, k, stride, pad);
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = self.make(vec![n, c_out, geom.oh, geom.ow], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// Transposed convolution; the weight layout is `[C_in, C_out, k, k]`,
    /// i.e. the same tensor a conv2d mapping `C_out -> C_in` would use.
    pub fn deconv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(input), "deconv2d")?;
        let (c_out, k) = self.check_conv_params("deconv2d", c, weight, bias, stride, true)?;
        ensure!(
            (h - 1) * stride + k > 2 * pad,
            "deconv2d: input height {h} yields an empty output (stride {stride}, pad {pad}, kernel {k})"
        );
        ensure!(
            (w - 1) * stride + k > 2 * pad,
            "deconv2d: input width {w} yields an empty output (stride {stride}, pad {pad}, kernel {k})"
        );
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (w - 1) * stride + k - 2 * pad;
        let geom = Geometry {
            n,
            c: c_out,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: w,
        };
        let out = kernels::deconv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            c,
            &geom,
        );
        let value = self.make(vec![n, c_out, oh, ow], out);
        Ok(self.push(
            value,
            Op::Deconv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    fn batch_moments(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
        let mf = T::of((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                for &v in &x[(ni * c + ci) * hw..][..hw] {
                    s += v;
                }
            }
            mean[ci] = s / mf;
            let mut q = T::zero();
            for ni in 0..n {
                for &v in &x[(ni * c + ci) * hw..][..hw] {
                    let d = v - mean[ci];
                    q += d * d;
                }
            }
            var[ci] = q / mf;
        }
        (mean, var)
    }

    /// Per-channel normalization over the batch and any trailing axes.
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, stats: BnStats<'_, T>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        ensure!(shape.len() >= 2, "batchnorm: expected [N, C, ...], got {shape:?}");
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        ensure!(self.shape(gamma) == [c], "batchnorm: gamma shape {:?} != [{c}]", self.shape(gamma));
        ensure!(self.shape(beta) == [c], "batchnorm: beta shape {:?} != [{c}]", self.shape(beta));
        let state_len = match &stats {
            BnStats::Train(s) => s.running_mean.len(),
            BnStats::Eval(s) | BnStats::Batch(s) => s.running_mean.len(),
        };
        ensure!(state_len == c, "batchnorm: running state has {state_len} channels, input has {c}");
        let batch_stats = !matches!(stats, BnStats::Eval(_));
        if batch_stats {
            ensure!(n >= 2, "batchnorm: train mode needs a batch of at least 2, got {n}");
        }
        let x = self.value(input).data();
        let m = n * hw;
        let (mean, inv_std) = match stats {
            BnStats::Train(state) => {
                let (mean, var) = Self::batch_moments(x, n, c, hw);
                let mom = T::of(state.momentum);
                let unbias = T::of(m as f64 / (m as f64 - 1.0));
                for ci in 0..c {
                    state.running_mean[ci] = (T::one() - mom) * state.running_mean[ci] + mom * mean[ci];
                    state.running_var[ci] = (T::one() - mom) * state.running_var[ci] + mom * var[ci] * unbias;
                }
                let eps = T::of(state.eps);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            BnStats::Batch(state) => {
                let (mean, var) = Self::batch_moments(x, n, c, hw);
                let eps = T::of(state.eps);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            BnStats::Eval(state) => {
                let eps = T::of(state.eps);
                let inv: Vec<T> = state
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (state.running_mean.clone(), inv)
            }
        };
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in base..base + hw {
                    xhat[j] = (x[j] - mean[ci]) * inv_std[ci];
                    out[j] = gm[ci] * xhat[j] + bt[ci];
                }
            }
        }
        let value = self.make(shape, out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<T> = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::LeakyRelu(slope) => {
                let s = T::of(slope);
                x.data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * s })
                    .collect()
            }
            Activation::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
        };
        let value = self.make(x.shape().to_vec(), out);
        Ok(self.push(value, Op::Act { input, kind }, &[input]))
    }

    /// Non-overlapping max pooling with a square window.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(input), "maxpool2d")?;
        ensure!(window > 0, "maxpool2d: window must be positive");
        ensure!(h % window == 0, "maxpool2d: height {h} is not divisible by window {window}");
        ensure!(w % window == 0, "maxpool2d: width {w} is not divisible by window {window}");
        let (oh, ow) = (h / window, w / window);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let j = base + (oy * window + dy) * w + ox * window + dx;
                            if x[j] > x[best] {
                                best = j;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = self.make(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `input · weightᵀ + bias` for input `[N, D]` and weight `[D_out, D]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        ensure!(xs.len() == 2, "linear: input must be [N, D], got {xs:?}");
        let (n, d) = (xs[0], xs[1]);
        let ws = self.shape(weight);
        ensure!(ws.len() == 2, "linear: weight must be [D_out, D], got {ws:?}");
        ensure!(ws[1] == d, "linear: input width {d} does not match weight width {}", ws[1]);
        let d_out = ws[0];
        ensure!(
            self.shape(bias) == [d_out],
            "linear: bias shape {:?} does not match output width {d_out}",
            self.shape(bias)
        );
        let mut out = vec![T::zero(); n * d_out];
        T::gemm(
            n,
            d,
            d_out,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (1, d as isize),
            T::zero(),
            &mut out,
            (d_out as isize, 1),
        );
        let b = self.value(bias).data();
        for row in out.chunks_mut(d_out) {
            row.iter_mut().zip(b).for_each(|(o, &bb)| *o += bb);
        }
        let value = self.make(vec![n, d_out], out);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in train
    /// mode; eval mode and `rate == 0` pass the input through.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), "dropout: rate {rate} must lie in [0, 1)");
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = self.make(x.shape().to_vec(), out);
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        ensure!(
            self.shape(pred) == self.shape(target),
            "mse_loss: prediction shape {:?} does not match target shape {:?}",
            self.shape(pred),
            self.shape(target)
        );
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let sum: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / T::of(p.len() as f64));
        Ok(self.push(value, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Batch mean of `-Σ_k targets[i,k] · log softmax(logits)[i,k]`. Rows of
    /// `targets` need not sum to one, which is how per-sample weights enter.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let ls = self.shape(logits);
        ensure!(ls.len() == 2, "cross_entropy: logits must be [N, K], got {ls:?}");
        ensure!(
            targets.shape() == ls,
            "cross_entropy: targets {:?} do not match logits {ls:?}",
            targets.shape()
        );
        let (n, k) = (ls[0], ls[1]);
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..k {
                let logp = row[j] - max - lse;
                probs[i * k + j] = logp.exp();
                let t = targets.data()[i * k + j];
                if t != T::zero() {
                    total -= t * logp;
                }
            }
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over samples of `weight · -log softmax(logits)[label]`.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let ls = self.shape(logits);
        ensure!(ls.len() == 2, "softmax_nll: logits must be [N, K], got {ls:?}");
        let (n, k) = (ls[0], ls[1]);
        ensure!(labels.len() == n, "softmax_nll: {} labels for {n} rows", labels.len());
        if let Some(w) = weights {
            ensure!(w.len() == n, "softmax_nll: {} weights for {n} rows", w.len());
            ensure!(
                w.iter().all(|&v| v >= T::zero() && v.is_finite()),
                "softmax_nll: weights must be finite and nonnegative"
            );
        }
        let mut targets = Tensor::zeros(&[n, k]);
        for (i, &y) in labels.iter().enumerate() {
            ensure!(y < k, "softmax_nll: label {y} at row {i} is outside [0, {k})");
            targets.data_mut()[i * k + y] = weights.map_or(T::one(), |w| w[i]);
        }
        self.cross_entropy(logits, &targets)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat_channels: no inputs");
        let (n, _, h, w) = dims4(self.shape(inputs[0]), "concat_channels")?;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (n2, c2, h2, w2) = dims4(self.shape(v), "concat_channels")?;
            ensure!(
                (n2, h2, w2) == (n, h, w),
                "concat_channels: {:?} does not match batch/spatial extents of {:?}",
                self.shape(v),
                self.shape(inputs[0])
            );
            parts.push((v, c2));
        }
        let c_total: usize = parts.iter().map(|p| p.1).sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for ni in 0..n {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.value(v).data()[ni * c * hw..][..c * hw]);
            }
        }
        let value = self.make(vec![n, c_total, h, w], out);
        Ok(self.push(value, Op::Concat { inputs: parts }, inputs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "add: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = self.make(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "mul: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = self.make(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).data().iter().map(|&v| v * factor).collect();
        let value = self.make(self.shape(input).to_vec(), out);
        Ok(self.push(value, Op::Scale { input, factor }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, &[input]))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, input: Var, f: fn(T) -> T, derivative: fn(T) -> T) -> Result<Var> {
        let out = self.value(input).data().iter().map(|&v| f(v)).collect();
        let value = self.make(self.shape(input).to_vec(), out);
        Ok(self.push(value, Op::Map { input, derivative }, &[input]))
    }

    /// Reverse-mode pass from a scalar `loss`. Every gradient-requiring leaf
    /// recorded before `loss` ends up with a populated gradient (zeros when the
    /// loss does not depend on it); repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        ensure!(numel == 1, "backward: loss must be a scalar, got shape {:?}", self.shape(loss));
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.trace.clear();

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.trace.push(Var(i));
            if let Op::Leaf = node.op {
                grads[i] = Some(gout);
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| self.nodes[v.0].value.data();
            let mut emit = |v: Var, g: Vec<T>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let c_out = self.shape(*bias)[0];
                    let g = kernels::conv2d_backward(
                        &gout,
                        cols,
                        val(*weight),
                        c_out,
                        geom,
                        (needs(*input), needs(*weight), needs(*bias)),
                    );
                    if let Some(d) = g.input {
                        emit(*input, d);
                    }
                    if let Some(d) = g.weight {
                        emit(*weight, d);
                    }
                    if let Some(d) = g.bias {
                        emit(*bias, d);
                    }
                }
                Op::Deconv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let c_in = self.shape(*input)[1];
                    let g = kernels::deconv2d_backward(
                        &gout,
                        val(*input),
                        val(*weight),
                        c_in,
                        geom,
                        (needs(*input), needs(*weight), needs(*bias)),
                    );
                    if let Some(d) = g.input {
                        emit(*input, d);
                    }
                    if let Some(d) = g.weight {
                        emit(*weight, d);
                    }
                    if let Some(d) = g.bias {
                        emit(*bias, d);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = self.shape(*input);
                    let (n, c) = (shape[0], shape[1]);
                    let hw = xhat.len() / (n * c);
                    let gm = val(*gamma);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for j in base..base + hw {
                                dgamma[ci] += gout[j] * xhat[j];
                                dbeta[ci] += gout[j];
                            }
                        }
                    }
                    if needs(*input) {
                        let mut dx = vec![T::zero(); gout.len()];
                        let m = T::of((n * hw) as f64);
                        for ci in 0..c {
                            // sums of dxhat and dxhat*xhat are gamma * (dbeta, dgamma)
                            let s1 = gm[ci] * dbeta[ci];
                            let s2 = gm[ci] * dgamma[ci];
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for j in base..base + hw {
                                    let dxhat = gout[j] * gm[ci];
                                    dx[j] = if *batch_stats {
                                        inv_std[ci] / m * (m * dxhat - s1 - xhat[j] * s2)
                                    } else {
                                        dxhat * inv_std[ci]
                                    };
                                }
                            }
                        }
                        emit(*input, dx);
                    }
                    emit(*gamma, dgamma);
                    emit(*beta, dbeta);
                }
                Op::Act { input, kind } => {
                    let x = val(*input);
                    let d: Vec<T> = match kind {
                        Activation::Relu => x
                            .iter()
                            .zip(&gout)
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect(),
                        Activation::LeakyRelu(slope) => {
                            let s = T::of(*slope);
                            x.iter()
                                .zip(&gout)
                                .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
                                .collect()
                        }
                        Activation::Tanh => node
                            .value
                            .data()
                            .iter()
                            .zip(&gout)
                            .map(|(&y, &g)| g * (T::one() - y * y))
                            .collect(),
                    };
                    emit(*input, d);
                }
                Op::MaxPool { input, argmax } => {
                    let mut d = vec![T::zero(); self.value(*input).numel()];
                    for (&j, &g) in argmax.iter().zip(&gout) {
                        d[j] += g;
                    }
                    emit(*input, d);
                }
                Op::Linear { input, weight, bias } => {
                    let xs = self.shape(*input);
                    let (n, d) = (xs[0], xs[1]);
                    let d_out = self.shape(*bias)[0];
                    if needs(*input) {
                        let mut dx = vec![T::zero(); n * d];
                        T::gemm(
                            n,
                            d_out,
                            d,
                            T::one(),
                            &gout,
                            (d_out as isize, 1),
                            val(*weight),
                            (d as isize, 1),
                            T::zero(),
                            &mut dx,
                            (d as isize, 1),
                        );
                        emit(*input, dx);
                    }
                    if needs(*weight) {
                        let mut dw = vec![T::zero(); d_out * d];
                        T::gemm(
                            d_out,
                            n,
                            d,
                            T::one(),
                            &gout,
                            (1, d_out as isize),
                            val(*input),
                            (d as isize, 1),
                            T::zero(),
                            &mut dw,
                            (d as isize, 1),
                        );
                        emit(*weight, dw);
                    }
                    if needs(*bias) {
                        let mut db = vec![T::zero(); d_out];
                        for row in gout.chunks(d_out) {
                            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                        emit(*bias, db);
                    }
                }
                Op::Dropout { input, mask } => {
                    emit(*input, gout.iter().zip(mask).map(|(&g, &m)| g * m).collect());
                }
                Op::Mse { pred, target } => {
                    let p = val(*pred);
                    let t = val(*target);
                    let scale = T::of(2.0) * gout[0] / T::of(p.len() as f64);
                    let d: Vec<T> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                    if needs(*target) {
                        emit(*target, d.iter().map(|&v| -v).collect());
                    }
                    emit(*pred, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let ls = self.shape(*logits);
                    let (n, k) = (ls[0], ls[1]);
                    let scale = gout[0] / T::of(n as f64);
                    let mut d = vec![T::zero(); n * k];
                    for i in 0..n {
                        let trow = &targets[i * k..(i + 1) * k];
                        let mass: T = trow.iter().copied().sum();
                        for j in 0..k {
                            d[i * k + j] = scale * (probs[i * k + j] * mass - trow[j]);
                        }
                    }
                    emit(*logits, d);
                }
                Op::Concat { inputs } => {
                    let shape = node.value.shape();
                    let (n, c_total, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let mut offset = 0;
                    for &(v, c) in inputs {
                        if needs(v) {
                            let mut d = Vec::with_capacity(n * c * hw);
                            for ni in 0..n {
                                d.extend_from_slice(&gout[(ni * c_total + offset) * hw..][..c * hw]);
                            }
                            emit(v, d);
                        }
                        offset += c;
                    }
                }
                Op::Reshape { input } => emit(*input, gout),
                Op::Add { a, b } => {
                    emit(*a, gout.clone());
                    emit(*b, gout);
                }
                Op::Mul { a, b } => {
                    if needs(*a) {
                        emit(*a, gout.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                    }
                    if needs(*b) {
                        emit(*b, gout.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
                    }
                }
                Op::Scale { input, factor } => {
                    emit(*input, gout.iter().map(|&g| g * *factor).collect());
                }
                Op::Sum { input } => {
                    emit(*input, vec![gout[0]; self.value(*input).numel()]);
                }
                Op::Map { input, derivative } => {
                    emit(
                        *input,
                        val(*input)
                            .iter()
                            .zip(&gout)
                            .map(|(&x, &g)| g * derivative(x))
                            .collect(),
                    );
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}
