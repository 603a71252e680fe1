use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<'t, T: Scalar>(x: Var<'t, T>, kind: Activation) -> Var<'t, T> {
    match kind {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

pub fn relu<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let value = xv.map(|v| if v > T::zero() { v } else { T::zero() });
    x.tape().record(value, &[x], move |g| {
        let gx =
            Tensor::from_fn(xv.shape().to_vec(), |i| if xv.data()[i] > T::zero() { g.data()[i] } else { T::zero() });
        vec![Some(gx)]
    })
}

/// Logistic function. Saturated outputs are pulled inside (0, 1) so that the
/// range stays open at both precisions.
pub fn sigmoid<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let tiny = T::min_positive_value();
    let one_minus = T::one() - T::epsilon();
    let value = x.value().map(|v| {
        let s = if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        s.max(tiny).min(one_minus)
    });
    let out = value.clone();
    x.tape().record(value, &[x], move |g| {
        let gx = Tensor::from_fn(out.shape().to_vec(), |i| {
            let s = out.data()[i];
            g.data()[i] * s * (T::one() - s)
        });
        vec![Some(gx)]
    })
}

fn same_shape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>, op: &str) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return shape_err(format!("{op}: shapes {sa:?} and {sb:?} differ"));
    }
    Ok(sa)
}

pub fn add<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = same_shape(&a, &b, "add")?;
    let (av, bv) = (a.value(), b.value());
    let value = Tensor::from_fn(shape, |i| av.data()[i] + bv.data()[i]);
    Ok(a.tape().record(value, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())]))
}

pub fn mul<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = same_shape(&a, &b, "mul")?;
    let (av, bv) = (a.value(), b.value());
    let value = Tensor::from_fn(shape.clone(), |i| av.data()[i] * bv.data()[i]);
    Ok(a.tape().record(value, &[a, b], move |g| {
        let ga = Tensor::from_fn(shape.clone(), |i| g.data()[i] * bv.data()[i]);
        let gb = Tensor::from_fn(shape.clone(), |i| g.data()[i] * av.data()[i]);
        vec![Some(ga), Some(gb)]
    }))
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    x.tape().record(Tensor::scalar(xv.sum()), &[x], move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
}

/// `Σ wᵢ·xᵢ` over scalar terms.
pub fn weighted_sum<'t, T: Scalar>(terms: &[(Var<'t, T>, f64)]) -> Result<Var<'t, T>> {
    let Some((first, _)) = terms.first() else {
        return shape_err("weighted_sum needs at least one term");
    };
    let mut total = T::zero();
    for (v, w) in terms {
        if v.value().numel() != 1 {
            return shape_err(format!("weighted_sum term has shape {:?}", v.shape()));
        }
        total += T::of(*w) * v.item();
    }
    let vars: Vec<_> = terms.iter().map(|(v, _)| *v).collect();
    let weights: Vec<T> = terms.iter().map(|(_, w)| T::of(*w)).collect();
    Ok(first.tape().record(Tensor::scalar(total), &vars, move |g| {
        weights.iter().map(|&w| Some(Tensor::scalar(g.data()[0] * w))).collect()
    }))
}
