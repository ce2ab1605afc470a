use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::ArchSpec;
use crate::error::{ensure, invalid, Result};
use crate::tensor::{sgd_step, softmax_rows, Activation, BnState, BnStats, Graph, Mode, Tensor, Var};

/// Encoder/decoder/discriminator convolutions: 4×4 kernels, stride 2, pad 1.
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
/// Classifier convolutions use 3×3 kernels with pad 1.
pub const CLF_KERNEL: usize = 3;
pub const GENDERS: usize = 2;

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn new(c_in: usize, c_out: usize, k: usize, transposed: bool, rng: &mut dyn RngCore) -> Self {
        let fan_in = c_in * k * k;
        let shape = if transposed { [c_in, c_out, k, k] } else { [c_out, c_in, k, k] };
        Self {
            weight: uniform_init(&shape, fan_in, rng),
            bias: uniform_init(&[c_out], fan_in, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn new(d_in: usize, d_out: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            weight: uniform_init(&[d_out, d_in], d_in, rng),
            bias: uniform_init(&[d_out], d_in, rng),
        }
    }
}

/// Records parameter leaves on a graph in a fixed order so gradients can be
/// routed back to the owning tensors.
struct Binder {
    trainable: bool,
    vars: Vec<Var>,
}

impl Binder {
    fn new(trainable: bool) -> Self {
        Self {
            trainable,
            vars: Vec::new(),
        }
    }

    fn bind(&mut self, g: &mut Graph, t: &Tensor) -> Var {
        let v = if self.trainable {
            g.param(t)
        } else {
            g.constant(t.clone())
        };
        self.vars.push(v);
        v
    }
}

enum Stats<'a> {
    Update(&'a mut [BnState<f32>]),
    Frozen(&'a [BnState<f32>]),
    Batch(&'a [BnState<f32>]),
}

impl Stats<'_> {
    fn of<'s>(states: &'s mut [BnState<f32>], mode: Mode) -> Stats<'s> {
        match mode {
            Mode::Train => Stats::Update(states),
            Mode::Eval => Stats::Frozen(states),
        }
    }

    fn at(&mut self, i: usize) -> BnStats<'_, f32> {
        match self {
            Stats::Update(s) => BnStats::Train(&mut s[i]),
            Stats::Frozen(s) => BnStats::Eval(&s[i]),
            Stats::Batch(s) => BnStats::Batch(&s[i]),
        }
    }
}

fn norm_block(
    g: &mut Graph,
    b: &mut Binder,
    x: Var,
    norm: &Norm,
    stats: BnStats<'_, f32>,
    act: Activation,
) -> Result<Var> {
    let gamma = b.bind(g, &norm.gamma);
    let beta = b.bind(g, &norm.beta);
    let y = g.batchnorm2d(x, gamma, beta, stats)?;
    g.activation(y, act)
}

fn conv(g: &mut Graph, b: &mut Binder, x: Var, c: &Conv, stride: usize, pad: usize) -> Result<Var> {
    let w = b.bind(g, &c.weight);
    let bias = b.bind(g, &c.bias);
    g.conv2d(x, w, bias, stride, pad)
}

fn deconv(g: &mut Graph, b: &mut Binder, x: Var, c: &Conv) -> Result<Var> {
    let w = b.bind(g, &c.weight);
    let bias = b.bind(g, &c.bias);
    g.deconv2d(x, w, bias, STRIDE, PAD)
}

fn dense(g: &mut Graph, b: &mut Binder, x: Var, d: &Dense) -> Result<Var> {
    let w = b.bind(g, &d.weight);
    let bias = b.bind(g, &d.bias);
    g.linear(x, w, bias)
}

fn check_input(shape: &[usize], expected: [usize; 3], what: &str) -> Result<usize> {
    ensure!(
        shape.len() == 4 && shape[1..] == expected,
        "{what}: expected input [N, {}, {}, {}], got {shape:?}",
        expected[0],
        expected[1],
        expected[2]
    );
    Ok(shape[0])
}

/// Common parameter plumbing of all four networks.
pub trait Network: Clone + Sized {
    const KIND: &'static str;

    fn spec(&self) -> &ArchSpec;

    /// Trainable tensors with stable names, in binding order.
    fn parameters(&self) -> Vec<(String, &Tensor)>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn bn_states(&self) -> &[BnState<f32>];

    fn bn_states_mut(&mut self) -> &mut [BnState<f32>];

    /// Extra `key=value` header entries needed to rebuild the skeleton.
    fn header_entries(&self) -> Vec<(String, String)> {
        Vec::new()
    }

    /// Builds a freshly initialized network of the shape described by a header.
    fn from_header(spec: &ArchSpec, entries: &[(String, String)], rng: &mut dyn RngCore) -> Result<Self>;

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds the graph gradients of the leaves returned by a trainable forward.
    fn apply_grads(&mut self, g: &Graph, bound: &[Var]) -> Result<()> {
        let params = self.parameters_mut();
        ensure!(
            params.len() == bound.len(),
            "{} bound {} parameters, model has {}",
            Self::KIND,
            bound.len(),
            params.len()
        );
        for (p, &v) in params.into_iter().zip(bound) {
            g.accumulate_into(v, p)?;
        }
        Ok(())
    }

    fn sgd_step(&mut self, eta: f64) -> Result<()> {
        sgd_step(&mut self.parameters_mut(), eta)
    }

    fn clear_grads(&mut self) {
        for p in self.parameters_mut() {
            p.clear_grad();
        }
    }
}

/// `L` blocks of conv(4, 2, 1) + batchnorm + leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: ArchSpec,
    convs: Vec<Conv>,
    norms: Vec<Norm>,
    stats: Vec<BnState<f32>>,
}

impl Encoder {
    pub fn build(spec: &ArchSpec, rng: &mut dyn RngCore) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut c_in = spec.input_channels;
        for &c in &spec.encoder_channels() {
            convs.push(Conv::new(c_in, c, KERNEL, false, rng));
            c_in = c;
        }
        let chans = spec.encoder_channels();
        Ok(Self {
            spec: spec.clone(),
            convs,
            norms: chans.iter().map(|&c| Norm::new(c)).collect(),
            stats: chans.iter().map(|&c| BnState::new(c)).collect(),
        })
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.bias.numel()).collect()
    }

    fn run(&self, stats: &mut Stats<'_>, g: &mut Graph, x: Var, b: &mut Binder) -> Result<Var> {
        let s = self.spec.input_size;
        check_input(g.shape(x), [self.spec.input_channels, s, s], "encoder")?;
        let mut h = x;
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv(g, b, h, c, STRIDE, PAD)?;
            h = norm_block(g, b, h, n, stats.at(i), Activation::LeakyRelu(self.spec.leaky_slope))?;
        }
        Ok(h)
    }

    /// Returns the latent and the parameter leaves (empty unless `trainable`).
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut b = Binder::new(trainable);
        let mut states = std::mem::take(&mut self.stats);
        let out = self.run(&mut Stats::of(&mut states, mode), g, x, &mut b);
        self.stats = states;
        Ok((out?, b.vars))
    }

    pub fn forward_eval(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.run(&mut Stats::Frozen(&self.stats), g, x, &mut Binder::new(false))
    }

    /// Train-mode normalization (batch statistics) with the parameters and
    /// running state left untouched.
    pub fn forward_batch_stats(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.run(&mut Stats::Batch(&self.stats), g, x, &mut Binder::new(false))
    }

    /// Eval-mode latents for a batch of images.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = self.forward_eval(&mut g, xv)?;
        Ok(g.value(z).clone())
    }
}

impl Network for Encoder {
    const KIND: &'static str = "encoder";

    fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("blocks.{i}.conv.weight"), &c.weight));
            out.push((format!("blocks.{i}.conv.bias"), &c.bias));
            out.push((format!("blocks.{i}.bn.gamma"), &n.gamma));
            out.push((format!("blocks.{i}.bn.beta"), &n.beta));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(&mut self.norms) {
            out.extend([&mut c.weight, &mut c.bias, &mut n.gamma, &mut n.beta]);
        }
        out
    }

    fn bn_states(&self) -> &[BnState<f32>] {
        &self.stats
    }

    fn bn_states_mut(&mut self) -> &mut [BnState<f32>] {
        &mut self.stats
    }

    fn from_header(spec: &ArchSpec, _: &[(String, String)], rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(spec, rng)
    }
}

/// One-hot attribute planes `[K, H, W]`: plane `y` is ones, the rest zeros.
pub fn attr_planes(y: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    ensure!(y < k, "attribute {y} is outside [0, {k})");
    let hw = h * w;
    Tensor::new(
        vec![k, h, w],
        (0..k * hw).map(|i| if i / hw == y { 1.0 } else { 0.0 }).collect(),
    )
}

/// Attribute planes for a batch of attribute values: `[N, K, H, W]`.
pub fn attr_planes_batch(ys: &[usize], k: usize, h: usize, w: usize) -> Result<Tensor> {
    let planes = ys
        .iter()
        .map(|&y| attr_planes(y, k, h, w))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&planes.iter().collect::<Vec<_>>())
}

/// Mirror of the encoder built from transposed convolutions. With
/// `attr_planes = K`, the one-hot attribute code is appended to the input of
/// every block; the vanilla autoencoder uses `attr_planes = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    spec: ArchSpec,
    attr_planes: usize,
    convs: Vec<Conv>,
    norms: Vec<Norm>,
    stats: Vec<BnState<f32>>,
}

impl Decoder {
    pub fn build(spec: &ArchSpec, attr_planes: usize, rng: &mut dyn RngCore) -> Result<Self> {
        spec.validate()?;
        ensure!(
            attr_planes == 0 || attr_planes == spec.num_attrs,
            "decoder attribute planes must be 0 or num_attrs ({}), got {attr_planes}",
            spec.num_attrs
        );
        let chans = spec.decoder_channels(attr_planes);
        let convs = chans
            .iter()
            .map(|&(c_in, c_out)| Conv::new(c_in, c_out, KERNEL, true, rng))
            .collect();
        // the output block has no batchnorm
        let hidden: Vec<usize> = chans[..chans.len() - 1].iter().map(|c| c.1).collect();
        Ok(Self {
            spec: spec.clone(),
            attr_planes,
            convs,
            norms: hidden.iter().map(|&c| Norm::new(c)).collect(),
            stats: hidden.iter().map(|&c| BnState::new(c)).collect(),
        })
    }

    pub fn attr_planes(&self) -> usize {
        self.attr_planes
    }

    /// Input channels of every block, attribute planes included.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.weight.shape()[0]).collect()
    }

    fn run(
        &self,
        stats: &mut Stats<'_>,
        g: &mut Graph,
        z: Var,
        attrs: &[usize],
        b: &mut Binder,
        taps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n = check_input(g.shape(z), self.spec.latent_shape(), "decoder")?;
        if self.attr_planes > 0 {
            ensure!(attrs.len() == n, "decoder: {} attributes for a batch of {n}", attrs.len());
        }
        let mut taps = taps;
        let mut h = z;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            if self.attr_planes > 0 {
                let (hh, ww) = (g.shape(h)[2], g.shape(h)[3]);
                let planes = g.constant(attr_planes_batch(attrs, self.attr_planes, hh, ww)?);
                h = g.concat_channels(&[h, planes])?;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.push(h);
            }
            h = deconv(g, b, h, c)?;
            h = if i < last {
                norm_block(g, b, h, &self.norms[i], stats.at(i), Activation::Relu)?
            } else {
                g.activation(h, Activation::Tanh)?
            };
        }
        Ok(h)
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        z: Var,
        attrs: &[usize],
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let mut b = Binder::new(trainable);
        let mut states = std::mem::take(&mut self.stats);
        let out = self.run(&mut Stats::of(&mut states, mode), g, z, attrs, &mut b, None);
        self.stats = states;
        Ok((out?, b.vars))
    }

    /// Eval-mode forward that also returns the input tensor of every block.
    pub fn forward_traced(&self, g: &mut Graph, z: Var, attrs: &[usize]) -> Result<(Var, Vec<Var>)> {
        let mut taps = Vec::new();
        let out = self.run(
            &mut Stats::Frozen(&self.stats),
            g,
            z,
            attrs,
            &mut Binder::new(false),
            Some(&mut taps),
        )?;
        Ok((out, taps))
    }

    /// Eval-mode reconstruction of a batch of latents.
    pub fn decode(&self, z: &Tensor, attrs: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (out, _) = self.forward_traced(&mut g, zv, attrs)?;
        Ok(g.value(out).clone())
    }
}

impl Network for Decoder {
    const KIND: &'static str = "decoder";

    fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("blocks.{i}.deconv.weight"), &c.weight));
            out.push((format!("blocks.{i}.deconv.bias"), &c.bias));
            if let Some(n) = self.norms.get(i) {
                out.push((format!("blocks.{i}.bn.gamma"), &n.gamma));
                out.push((format!("blocks.{i}.bn.beta"), &n.beta));
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for c in self.convs.iter_mut() {
            out.extend([&mut c.weight, &mut c.bias]);
            if let Some(n) = norms.next() {
                out.extend([&mut n.gamma, &mut n.beta]);
            }
        }
        out
    }

    fn bn_states(&self) -> &[BnState<f32>] {
        &self.stats
    }

    fn bn_states_mut(&mut self) -> &mut [BnState<f32>] {
        &mut self.stats
    }

    fn header_entries(&self) -> Vec<(String, String)> {
        vec![("attr_planes".into(), self.attr_planes.to_string())]
    }

    fn from_header(spec: &ArchSpec, entries: &[(String, String)], rng: &mut dyn RngCore) -> Result<Self> {
        let planes = entries
            .iter()
            .find(|(k, _)| k == "attr_planes")
            .ok_or_else(|| invalid!("decoder header lacks attr_planes"))?
            .1
            .parse()
            .map_err(|_| invalid!("decoder attr_planes is not an integer"))?;
        Self::build(spec, planes, rng)
    }
}

/// Latent attribute predictor: conv(4, 2, 1) + batchnorm + leaky ReLU,
/// flatten, fully connected to `dis_hidden`, leaky ReLU, fully connected to K.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    spec: ArchSpec,
    conv: Conv,
    norm: Norm,
    stats: Vec<BnState<f32>>,
    hidden: Dense,
    out: Dense,
}

impl Discriminator {
    pub fn build(spec: &ArchSpec, rng: &mut dyn RngCore) -> Result<Self> {
        spec.validate()?;
        let c = spec.latent_channels;
        let flat = c * (spec.latent_size() / 2) * (spec.latent_size() / 2);
        Ok(Self {
            spec: spec.clone(),
            conv: Conv::new(c, c, KERNEL, false, rng),
            norm: Norm::new(c),
            stats: vec![BnState::new(c)],
            hidden: Dense::new(flat, spec.dis_hidden, rng),
            out: Dense::new(spec.dis_hidden, spec.num_attrs, rng),
        })
    }

    /// `(flattened conv output, hidden width, K)`.
    pub fn fc_widths(&self) -> (usize, usize, usize) {
        let w = self.hidden.weight.shape();
        (w[1], w[0], self.out.weight.shape()[0])
    }

    fn run(&self, stats: &mut Stats<'_>, g: &mut Graph, z: Var, b: &mut Binder) -> Result<Var> {
        let n = check_input(g.shape(z), self.spec.latent_shape(), "discriminator")?;
        let slope = Activation::LeakyRelu(self.spec.leaky_slope);
        let h = conv(g, b, z, &self.conv, STRIDE, PAD)?;
        let h = norm_block(g, b, h, &self.norm, stats.at(0), slope)?;
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat])?;
        let h = dense(g, b, h, &self.hidden)?;
        let h = g.activation(h, slope)?;
        dense(g, b, h, &self.out)
    }

    /// Returns logits `[N, K]`.
    pub fn forward(&mut self, g: &mut Graph, z: Var, mode: Mode, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut b = Binder::new(trainable);
        let mut states = std::mem::take(&mut self.stats);
        let out = self.run(&mut Stats::of(&mut states, mode), g, z, &mut b);
        self.stats = states;
        Ok((out?, b.vars))
    }

    /// Eval-mode logits; differentiable with respect to `z` only.
    pub fn forward_eval(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.run(&mut Stats::Frozen(&self.stats), g, z, &mut Binder::new(false))
    }

    /// Logits under batch statistics; parameters and running state untouched.
    pub fn forward_batch_stats(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.run(&mut Stats::Batch(&self.stats), g, z, &mut Binder::new(false))
    }

    /// Eval-mode attribute distribution `[N, K]`.
    pub fn discriminate(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let logits = self.forward_eval(&mut g, zv)?;
        softmax_rows(g.value(logits))
    }
}

impl Network for Discriminator {
    const KIND: &'static str = "discriminator";

    fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    fn parameters(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("conv.weight".into(), &self.conv.weight),
            ("conv.bias".into(), &self.conv.bias),
            ("bn.gamma".into(), &self.norm.gamma),
            ("bn.beta".into(), &self.norm.beta),
            ("fc1.weight".into(), &self.hidden.weight),
            ("fc1.bias".into(), &self.hidden.bias),
            ("fc2.weight".into(), &self.out.weight),
            ("fc2.bias".into(), &self.out.bias),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    fn bn_states(&self) -> &[BnState<f32>] {
        &self.stats
    }

    fn bn_states_mut(&mut self) -> &mut [BnState<f32>] {
        &mut self.stats
    }

    fn from_header(spec: &ArchSpec, _: &[(String, String)], rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(spec, rng)
    }
}

/// Gender classifier over latents: conv(3, stride, 1) + batchnorm + ReLU
/// blocks following `classifier_channels`, a 2×2 max pool after block
/// `classifier_pool_after`, dropout after every other block, and a final
/// fully connected layer to two logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ArchSpec,
    convs: Vec<Conv>,
    norms: Vec<Norm>,
    stats: Vec<BnState<f32>>,
    fc: Dense,
}

impl Classifier {
    pub fn build(spec: &ArchSpec, rng: &mut dyn RngCore) -> Result<Self> {
        spec.validate()?;
        let fc_in = spec.classifier_fc_input()?;
        let mut convs = Vec::new();
        let mut c_in = spec.latent_channels;
        for &c in &spec.classifier_channels {
            convs.push(Conv::new(c_in, c, CLF_KERNEL, false, rng));
            c_in = c;
        }
        Ok(Self {
            spec: spec.clone(),
            convs,
            norms: spec.classifier_channels.iter().map(|&c| Norm::new(c)).collect(),
            stats: spec.classifier_channels.iter().map(|&c| BnState::new(c)).collect(),
            fc: Dense::new(fc_in, GENDERS, rng),
        })
    }

    /// Blocks (0-based) followed by dropout: all but the pooled one.
    pub fn dropout_after(&self, block: usize) -> bool {
        block + 1 != self.spec.classifier_pool_after
    }

    pub fn fc_input(&self) -> usize {
        self.fc.weight.shape()[1]
    }

    fn run(
        &self,
        stats: &mut Stats<'_>,
        g: &mut Graph,
        z: Var,
        mode: Mode,
        b: &mut Binder,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let n = check_input(g.shape(z), self.spec.latent_shape(), "classifier")?;
        let mut h = z;
        for (i, (c, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv(g, b, h, c, self.spec.classifier_stride, 1)?;
            h = norm_block(g, b, h, norm, stats.at(i), Activation::Relu)?;
            if i + 1 == self.spec.classifier_pool_after {
                h = g.maxpool2d(h, 2)?;
            }
            if self.dropout_after(i) {
                h = g.dropout(h, self.spec.dropout, mode, rng)?;
            }
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat])?;
        dense(g, b, h, &self.fc)
    }

    /// Returns gender logits `[N, 2]`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        z: Var,
        mode: Mode,
        trainable: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Vec<Var>)> {
        let mut b = Binder::new(trainable);
        let mut states = std::mem::take(&mut self.stats);
        let out = self.run(&mut Stats::of(&mut states, mode), g, z, mode, &mut b, rng);
        self.stats = states;
        Ok((out?, b.vars))
    }

    /// Eval-mode gender distribution `[N, 2]`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        // eval-mode dropout never draws
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.run(
            &mut Stats::Frozen(&self.stats),
            &mut g,
            zv,
            Mode::Eval,
            &mut Binder::new(false),
            &mut rng,
        )?;
        softmax_rows(g.value(logits))
    }
}

impl Network for Classifier {
    const KIND: &'static str = "classifier";

    fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("blocks.{i}.conv.weight"), &c.weight));
            out.push((format!("blocks.{i}.conv.bias"), &c.bias));
            out.push((format!("blocks.{i}.bn.gamma"), &n.gamma));
            out.push((format!("blocks.{i}.bn.beta"), &n.beta));
        }
        out.push(("fc.weight".into(), &self.fc.weight));
        out.push(("fc.bias".into(), &self.fc.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(&mut self.norms) {
            out.extend([&mut c.weight, &mut c.bias, &mut n.gamma, &mut n.beta]);
        }
        out.extend([&mut self.fc.weight, &mut self.fc.bias]);
        out
    }

    fn bn_states(&self) -> &[BnState<f32>] {
        &self.stats
    }

    fn bn_states_mut(&mut self) -> &mut [BnState<f32>] {
        &mut self.stats
    }

    fn from_header(spec: &ArchSpec, _: &[(String, String)], rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(spec, rng)
    }
}
