//! Central finite-difference verification of autograd gradients.

use super::{no_grad, Element, Result, Tensor, TensorError};

/// Compares the autograd gradient of scalar-valued `f` at `x` against central
/// finite differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` and
/// returns the worst relative error, `|a - fd| / max(|a|, |fd|, 1)`.
///
/// Meant for `f64`; `f32` lacks the headroom for `eps = 1e-5`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let leaf = x.detach().with_grad();
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    loss.backward()?;
    let analytic = leaf.grad().ok_or(TensorError::DetachedGraph)?;

    let base = leaf.to_vec();
    let shape = leaf.shape().to_vec();
    let step = T::from_f64(eps);
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: T| -> Result<f64> {
            let mut probe = base.clone();
            probe[i] = probe[i] + delta;
            let t = Tensor::from_vec(shape.clone(), probe)?;
            no_grad(|| f(&t)).map(|v| v.item().to_f64())
        };
        let fd = (eval(step)? - eval(-step)?) / (2.0 * eps);
        let a = analytic[i].to_f64();
        let denom = a.abs().max(fd.abs()).max(1.0);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}
