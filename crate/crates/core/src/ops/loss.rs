use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross entropy `−mean[g·ln p + (1−g)·ln(1−p)]` with `p`
/// clamped to `[ε, 1−ε]`. The target is a constant.
pub fn bce_loss<'t, T: Scalar>(p: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = p.shape();
    if shape != target.shape() {
        return shape_err(format!("bce_loss: prediction {shape:?} vs target {:?}", target.shape()));
    }
    let pv = p.value();
    let g = target.clone();
    let (lo, hi) = (T::of(BCE_EPS), T::one() - T::of(BCE_EPS));
    let n = T::of(pv.numel() as f64);
    let mut total = T::zero();
    for (&pi, &gi) in pv.data().iter().zip(g.data()) {
        let q = pi.max(lo).min(hi);
        total += gi * q.ln() + (T::one() - gi) * (T::one() - q).ln();
    }
    let value = Tensor::scalar(-total / n);
    Ok(p.tape().record(value, &[p], move |gout| {
        let scale = gout.data()[0] / n;
        let gp = Tensor::from_fn(shape.clone(), |i| {
            let pi = pv.data()[i];
            // Zero gradient where the clamp is active.
            if pi < lo || pi > hi {
                return T::zero();
            }
            let gi = g.data()[i];
            -scale * (gi / pi - (T::one() - gi) / (T::one() - pi))
        });
        vec![Some(gp)]
    }))
}
