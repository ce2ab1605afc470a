//! Slice-level kernels. Shapes are validated by the graph layer before these
//! are called.

use super::Scalar;

/// Convolution geometry seen from the "image" side: an image of `h × w`
/// convolved by a `k × k` window gives `oh × ow` positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn conv(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self { n, c, h, w, k, stride, pad, oh, ow }
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `img` (NCHW) into a `[C·k·k, N·oh·ow]` matrix.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &img[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[n * plane + oy * g.ow..][..g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `img`.
pub(crate) fn col2im<T: Scalar>(cols_mat: &[T], g: &Geometry, img: &mut [T]) {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_mat[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut img[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let src_row = &src[n * plane + oy * g.ow..][..g.ow];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// NCHW -> `[C, N·H·W]`.
pub(crate) fn nchw_to_cm<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * hw + ni * hw..][..hw].copy_from_slice(&x[(ni * c + ci) * hw..][..hw]);
        }
    }
    out
}

/// `[C, N·H·W]` -> NCHW.
pub(crate) fn cm_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * hw..][..hw].copy_from_slice(&x[ci * n * hw + ni * hw..][..hw]);
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, hw: usize) {
    let c = bias.len();
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate() {
            for v in &mut out[(ni * c + ci) * hw..][..hw] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            for &v in &x[(ni * c + ci) * hw..][..hw] {
                *o += v;
            }
        }
    }
    out
}

/// Forward convolution. Returns the NCHW output and the unfolded input
/// (kept for the weight gradient).
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &Geometry,
) -> (Vec<T>, Vec<T>) {
    let c_out = bias.len();
    let cols = im2col(x, g);
    let ncols = g.cols();
    let rows = g.rows();
    let mut out_cm = vec![T::zero(); c_out * ncols];
    T::gemm(
        c_out,
        rows,
        ncols,
        T::one(),
        weight,
        (rows as isize, 1),
        &cols,
        (ncols as isize, 1),
        T::zero(),
        &mut out_cm,
        (ncols as isize, 1),
    );
    let mut out = cm_to_nchw(&out_cm, g.n, c_out, g.oh * g.ow);
    add_channel_bias(&mut out, bias, g.n, g.oh * g.ow);
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    weight: &[T],
    c_out: usize,
    g: &Geometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ncols = g.cols();
    let rows = g.rows();
    let hw = g.oh * g.ow;
    let dout_cm = nchw_to_cm(dout, g.n, c_out, hw);
    let weight_grad = need.1.then(|| {
        let mut dw = vec![T::zero(); c_out * rows];
        // dW = dout_cm · cols^T
        T::gemm(
            c_out,
            ncols,
            rows,
            T::one(),
            &dout_cm,
            (ncols as isize, 1),
            cols,
            (1, ncols as isize),
            T::zero(),
            &mut dw,
            (rows as isize, 1),
        );
        dw
    });
    let bias_grad = need.2.then(|| channel_sums(dout, g.n, c_out, hw));
    let input_grad = need.0.then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        // dcols = W^T · dout_cm
        T::gemm(
            rows,
            c_out,
            ncols,
            T::one(),
            weight,
            (1, rows as isize),
            &dout_cm,
            (ncols as isize, 1),
            T::zero(),
            &mut dcols,
            (ncols as isize, 1),
        );
        let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Transposed convolution. `g` describes the *output* image (the side a
/// matching conv2d would read from); `x` has `g.oh × g.ow` spatial extent and
/// `c_in` channels. Weight layout is `[c_in, g.c, k, k]`.
pub(crate) fn deconv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    c_in: usize,
    g: &Geometry,
) -> Vec<T> {
    let ncols = g.cols();
    let rows = g.rows();
    let x_cm = nchw_to_cm(x, g.n, c_in, g.oh * g.ow);
    let mut cols = vec![T::zero(); rows * ncols];
    // cols = W^T · x_cm
    T::gemm(
        rows,
        c_in,
        ncols,
        T::one(),
        weight,
        (1, rows as isize),
        &x_cm,
        (ncols as isize, 1),
        T::zero(),
        &mut cols,
        (ncols as isize, 1),
    );
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    col2im(&cols, g, &mut out);
    add_channel_bias(&mut out, bias, g.n, g.h * g.w);
    out
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    weight: &[T],
    c_in: usize,
    g: &Geometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ncols = g.cols();
    let rows = g.rows();
    let dcols = im2col(dout, g);
    let input_grad = need.0.then(|| {
        let mut dx_cm = vec![T::zero(); c_in * ncols];
        T::gemm(
            c_in,
            rows,
            ncols,
            T::one(),
            weight,
            (rows as isize, 1),
            &dcols,
            (ncols as isize, 1),
            T::zero(),
            &mut dx_cm,
            (ncols as isize, 1),
        );
        cm_to_nchw(&dx_cm, g.n, c_in, g.oh * g.ow)
    });
    let weight_grad = need.1.then(|| {
        let x_cm = nchw_to_cm(x, g.n, c_in, g.oh * g.ow);
        let mut dw = vec![T::zero(); c_in * rows];
        T::gemm(
            c_in,
            ncols,
            rows,
            T::one(),
            &x_cm,
            (ncols as isize, 1),
            &dcols,
            (1, ncols as isize),
            T::zero(),
            &mut dw,
            (rows as isize, 1),
        );
        dw
    });
    let bias_grad = need.2.then(|| channel_sums(dout, g.n, g.c, g.h * g.w));
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geometry::conv(2, 3, 5, 4, 3, 2, 1);
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn layout_permutes_invert() {
        let x: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        assert_eq!(cm_to_nchw(&nchw_to_cm(&x, 2, 3, 4), 2, 3, 4), x);
    }
}
