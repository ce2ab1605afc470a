//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Every case builds a scalar function of its inputs on a fresh `f64` graph.
//! The analytic gradient comes from [`Graph::backward`]; the numerical one
//! only ever runs the forward pass, so the two routes share no adjoint code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Activation, BnState, BnStats, Graph, Mode, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-2;
pub const TOLERANCE: f64 = 1e-4;
pub const BATCHNORM_TOLERANCE: f64 = 1e-3;

pub type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

pub struct GradCase {
    pub op: String,
    pub tolerance: f64,
    /// Inputs flagged `requires_grad` are checked; the rest stay constant.
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate(case: &GradCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Worst relative error between backward and central differences.
pub fn check(case: &GradCase) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.forward)(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = case.inputs.clone();
    for (i, input) in case.inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = g.grad(vars[i]).expect("leaf gradients are populated").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = evaluate(case, &probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = evaluate(case, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(a, numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    Ok(worst)
}

/// Checks every case, grouping results per op in first-seen order.
pub fn run(cases: &[GradCase]) -> Result<Vec<OpReport>> {
    let mut reports: Vec<OpReport> = Vec::new();
    for case in cases {
        let err = check(case)?;
        match reports.iter_mut().find(|r| r.op == case.op) {
            Some(r) => {
                r.instances += 1;
                r.worst_rel_error = r.worst_rel_error.max(err);
                r.passed = r.worst_rel_error < r.tolerance;
            }
            None => reports.push(OpReport {
                op: case.op.clone(),
                instances: 1,
                worst_rel_error: err,
                tolerance: case.tolerance,
                passed: err < case.tolerance,
            }),
        }
    }
    Ok(reports)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (rng.random::<f64>() * 2.0 - 1.0)).with_requires_grad(true)
}

/// Values bounded away from zero so piecewise-linear kinks stay out of
/// reach of the finite-difference step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + 0.9 * rng.random::<f64>();
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
    .with_requires_grad(true)
}

/// Reduces an op output to a scalar through a fixed random projection.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn projected(
    op: &str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let weights = normal(rng, out_shape, 1.0).with_requires_grad(false);
    GradCase {
        op: op.to_string(),
        tolerance,
        inputs,
        forward: Box::new(move |g, v| {
            let out = f(g, v)?;
            project(g, out, &weights)
        }),
    }
}

fn conv_case(rng: &mut ChaCha8Rng, transposed: bool) -> GradCase {
    let n = rng.random_range(1..=2);
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=3);
    let k = rng.random_range(1..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=(k / 2).min(1));
    let h = rng.random_range(k.max(2)..=6);
    let w = rng.random_range(k.max(2)..=6);
    if transposed {
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (w - 1) * stride + k - 2 * pad;
        let inputs = vec![
            normal(rng, &[n, c_in, h, w], 1.0),
            normal(rng, &[c_in, c_out, k, k], 0.5),
            normal(rng, &[c_out], 0.5),
        ];
        projected("deconv2d", TOLERANCE, inputs, &[n, c_out, oh, ow], rng, move |g, v| {
            g.deconv2d(v[0], v[1], v[2], stride, pad)
        })
    } else {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let inputs = vec![
            normal(rng, &[n, c_in, h, w], 1.0),
            normal(rng, &[c_out, c_in, k, k], 0.5),
            normal(rng, &[c_out], 0.5),
        ];
        projected("conv2d", TOLERANCE, inputs, &[n, c_out, oh, ow], rng, move |g, v| {
            g.conv2d(v[0], v[1], v[2], stride, pad)
        })
    }
}

fn batchnorm_case(rng: &mut ChaCha8Rng, train: bool) -> GradCase {
    let shape = [
        rng.random_range(2..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=4),
        rng.random_range(2..=4),
    ];
    let c = shape[1];
    let inputs = vec![
        normal(rng, &shape, 2.0),
        Tensor::from_fn(&[c], |_| 0.5 + rng.random::<f64>()).with_requires_grad(true),
        normal(rng, &[c], 0.5),
    ];
    let mut state = BnState::<f64>::new(c);
    state.running_mean = (0..c).map(|_| rng.random::<f64>() - 0.5).collect();
    state.running_var = (0..c).map(|_| 0.5 + rng.random::<f64>()).collect();
    let op = if train { "batchnorm2d_train" } else { "batchnorm2d_eval" };
    projected(op, BATCHNORM_TOLERANCE, inputs, &shape, rng, move |g, v| {
        let mut s = state.clone();
        let stats = if train { BnStats::Train(&mut s) } else { BnStats::Eval(&state) };
        g.batchnorm2d(v[0], v[1], v[2], stats)
    })
}

fn activation_case(rng: &mut ChaCha8Rng, kind: Activation) -> GradCase {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=6)];
    let name = match kind {
        Activation::Relu => "relu",
        Activation::LeakyRelu(_) => "leaky_relu",
        Activation::Tanh => "tanh",
    };
    projected(name, TOLERANCE, vec![off_kink(rng, &shape)], &shape, rng, move |g, v| {
        g.activation(v[0], kind)
    })
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> GradCase {
    let window = rng.random_range(1..=2);
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=2),
        window * rng.random_range(1..=3),
        window * rng.random_range(1..=3),
    ];
    let numel: usize = shape.iter().product();
    // distinct values spaced well beyond the step
    let mut order: Vec<usize> = (0..numel).collect();
    for i in (1..numel).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(shape.to_vec(), order.iter().map(|&o| o as f64 * 0.1).collect())
        .unwrap()
        .with_requires_grad(true);
    let out = [shape[0], shape[1], shape[2] / window, shape[3] / window];
    projected("maxpool2d", TOLERANCE, vec![x], &out, rng, move |g, v| g.maxpool2d(v[0], window))
}

fn linear_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, d, d_out) = (
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        rng.random_range(1..=4),
    );
    let inputs = vec![
        normal(rng, &[n, d], 1.0),
        normal(rng, &[d_out, d], 1.0),
        normal(rng, &[d_out], 1.0),
    ];
    projected("linear", TOLERANCE, inputs, &[n, d_out], rng, |g, v| g.linear(v[0], v[1], v[2]))
}

fn dropout_case(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [rng.random_range(1..=3), rng.random_range(2..=8)];
    let rate = 0.1 + 0.6 * rng.random::<f64>();
    let seed = rng.random::<u64>();
    projected("dropout", TOLERANCE, vec![normal(rng, &shape, 1.0)], &shape, rng, move |g, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        g.dropout(v[0], rate, Mode::Train, &mut mask_rng)
    })
}

fn mse_case(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=5)];
    GradCase {
        op: "mse_loss".into(),
        tolerance: TOLERANCE,
        inputs: vec![normal(rng, &shape, 1.0), normal(rng, &shape, 1.0)],
        forward: Box::new(|g, v| g.mse_loss(v[0], v[1])),
    }
}

fn nll_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, k) = (4, 5);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let weights: Vec<f64> = (0..n).map(|_| 0.2 + 2.0 * rng.random::<f64>()).collect();
    GradCase {
        op: "softmax_nll".into(),
        tolerance: TOLERANCE,
        inputs: vec![normal(rng, &[n, k], 2.0)],
        forward: Box::new(move |g, v| g.softmax_nll(v[0], &labels, Some(&weights))),
    }
}

fn soft_target_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let targets = Tensor::full(&[n, k], 1.0 / k as f64);
    GradCase {
        op: "cross_entropy".into(),
        tolerance: TOLERANCE,
        inputs: vec![normal(rng, &[n, k], 2.0)],
        forward: Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (c1, c2) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let inputs = vec![normal(rng, &[n, c1, h, w], 1.0), normal(rng, &[n, c2, h, w], 1.0)];
    projected("concat_channels", TOLERANCE, inputs, &[n, c1 + c2, h, w], rng, |g, v| {
        g.concat_channels(&[v[0], v[1]])
    })
}

/// conv -> batchnorm -> tanh -> linear -> tanh -> linear -> NLL. Max pooling
/// stays out: near-ties after tanh put kinks within one step.
fn composite_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (n, c, s, hidden, k) = (3, 2, 3, 4, 3);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let inputs = vec![
        normal(rng, &[n, 1, s, s], 1.0),
        normal(rng, &[c, 1, 3, 3], 0.5),
        normal(rng, &[c], 0.2),
        Tensor::from_fn(&[c], |_| 0.5 + rng.random::<f64>()).with_requires_grad(true),
        normal(rng, &[c], 0.2),
        normal(rng, &[hidden, c * s * s], 0.5),
        normal(rng, &[hidden], 0.2),
        normal(rng, &[k, hidden], 0.5),
        normal(rng, &[k], 0.2),
    ];
    GradCase {
        op: "composite".into(),
        tolerance: TOLERANCE,
        inputs,
        forward: Box::new(move |g, v| {
            let mut state = BnState::new(c);
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let y = g.batchnorm2d(y, v[3], v[4], BnStats::Train(&mut state))?;
            let y = g.activation(y, Activation::Tanh)?;
            let y = g.reshape(y, &[n, c * s * s])?;
            let y = g.linear(y, v[5], v[6])?;
            let y = g.activation(y, Activation::Tanh)?;
            let y = g.linear(y, v[7], v[8])?;
            g.softmax_nll(y, &labels, None)
        }),
    }
}

/// `instances` random cases for every differentiable op, plus a composite.
pub fn standard_suite(instances: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for _ in 0..instances {
        cases.push(conv_case(&mut rng, false));
        cases.push(conv_case(&mut rng, true));
        cases.push(batchnorm_case(&mut rng, true));
        cases.push(batchnorm_case(&mut rng, false));
        cases.push(activation_case(&mut rng, Activation::Relu));
        cases.push(activation_case(&mut rng, Activation::LeakyRelu(0.2)));
        cases.push(activation_case(&mut rng, Activation::Tanh));
        cases.push(maxpool_case(&mut rng));
        cases.push(linear_case(&mut rng));
        cases.push(dropout_case(&mut rng));
        cases.push(mse_case(&mut rng));
        cases.push(nll_case(&mut rng));
        cases.push(soft_target_case(&mut rng));
        cases.push(concat_case(&mut rng));
        cases.push(composite_case(&mut rng));
    }
    cases
}
