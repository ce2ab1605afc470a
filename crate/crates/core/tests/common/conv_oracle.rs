//! Nested-loop reference convolutions and a dense-operator builder.

use fairfader_core::{Graph, Tensor};

/// `x: [n, c, h, w]`, `w: [o, c, k, k]`.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = dims(x);
    let [o, _, k, _] = dims(w);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = b[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[((ni * o + oi) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    out
}

/// Scatter form: every input pixel adds a weighted kernel footprint to the
/// output. `x: [n, c, h, w]`, `w: [c, o, k, k]`.
pub fn deconv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = dims(x);
    let [_, o, k, _] = dims(w);
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            for p in 0..oh * ow {
                out.data_mut()[(ni * o + oi) * oh * ow + p] = b[oi];
            }
        }
        for ci in 0..c {
            for y in 0..h {
                for xi in 0..wd {
                    let v = x.data()[((ni * c + ci) * h + y) * wd + xi];
                    for oi in 0..o {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ty = (y * stride + ky) as isize - pad as isize;
                                let tx = (xi * stride + kx) as isize - pad as isize;
                                if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                    continue;
                                }
                                out.data_mut()[((ni * o + oi) * oh + ty as usize) * ow + tx as usize] +=
                                    v * w.data()[((ci * o + oi) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn dims(t: &Tensor<f64>) -> [usize; 4] {
    t.shape().try_into().expect("rank 4")
}

pub enum Kind {
    Conv,
    Deconv,
}

/// Engine forward pass on the `f64` graph.
pub fn engine(kind: &Kind, x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::new(vec![b.len()], b.to_vec()).unwrap());
    let out = match kind {
        Kind::Conv => g.conv2d(xv, wv, bv, stride, pad),
        Kind::Deconv => g.deconv2d(xv, wv, bv, stride, pad),
    }
    .unwrap();
    g.value(out).clone()
}

/// Column `j` is the engine's response to the `j`-th basis tensor of
/// `in_shape`, with zero bias. Returned row-major as `rows x cols`.
pub fn dense_operator(kind: &Kind, in_shape: &[usize], w: &Tensor<f64>, stride: usize, pad: usize) -> (usize, usize, Vec<f64>) {
    let zero_bias = vec![0.0; if matches!(kind, Kind::Conv) { w.shape()[0] } else { w.shape()[1] }];
    let cols: usize = in_shape.iter().product();
    let mut columns = Vec::with_capacity(cols);
    for j in 0..cols {
        let e = Tensor::from_fn(in_shape, |i| if i == j { 1.0 } else { 0.0 });
        columns.push(engine(kind, &e, w, &zero_bias, stride, pad).into_data());
    }
    let rows = columns[0].len();
    let mut m = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m[i * cols + j] = *v;
        }
    }
    (rows, cols, m)
}
