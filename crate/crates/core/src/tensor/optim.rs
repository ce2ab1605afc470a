use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain gradient descent: `θ ← θ − lr·∇θ`, then clears every gradient.
///
/// All gradients are checked before any parameter is touched, so a missing
/// gradient leaves the whole set unchanged.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::InvalidState(format!(
            "parameter {i} (shape {:?}) has no gradient",
            params[i].shape()
        )));
    }
    let lr = T::of(lr);
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        for (v, d) in p.data.iter_mut().zip(g) {
            *v -= lr * d;
        }
    }
    Ok(())
}
