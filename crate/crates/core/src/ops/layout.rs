use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Concatenates along axis 0 (channels), `a` first.
pub fn concat_channels<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[1..] != sb[1..] {
        return shape_err(format!("concat_channels: {sa:?} and {sb:?} differ outside channels"));
    }
    let (av, bv) = (a.value(), b.value());
    let mut data = Vec::with_capacity(av.numel() + bv.numel());
    data.extend_from_slice(av.data());
    data.extend_from_slice(bv.data());
    let mut shape = sa.clone();
    shape[0] += sb[0];
    let split = av.numel();
    Ok(a.tape().record(Tensor::new(shape, data)?, &[a, b], move |g| {
        let (ga, gb) = g.data().split_at(split);
        vec![Tensor::new(sa.clone(), ga.to_vec()).ok(), Tensor::new(sb.clone(), gb.to_vec()).ok()]
    }))
}

/// Keeps the centered window with the given non-channel extents. An odd
/// surplus leaves the extra element at the high end (start = ⌊surplus / 2⌋).
pub fn center_crop<'t, T: Scalar>(x: Var<'t, T>, target: &[usize]) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if target.len() + 1 != shape.len() {
        return shape_err(format!("center_crop target {target:?} does not fit {shape:?}"));
    }
    for (&t, &s) in target.iter().zip(&shape[1..]) {
        if t == 0 || t > s {
            return shape_err(format!("center_crop target {target:?} exceeds source {shape:?}"));
        }
    }
    if target == &shape[1..] {
        return Ok(x);
    }
    let starts: Vec<usize> = target.iter().zip(&shape[1..]).map(|(&t, &s)| (s - t) / 2).collect();
    let mut out_shape = vec![shape[0]];
    out_shape.extend_from_slice(target);

    // Source index of every output element, row-major.
    let n_out: usize = out_shape.iter().product();
    let mut src = Vec::with_capacity(n_out);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n_out {
        let mut flat = 0;
        for ax in 0..rank {
            let off = if ax == 0 { 0 } else { starts[ax - 1] };
            flat = flat * shape[ax] + idx[ax] + off;
        }
        src.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }

    let xv = x.value();
    let value = Tensor::new(out_shape, src.iter().map(|&i| xv.data()[i]).collect())?;
    let n_in = xv.numel();
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); n_in];
        for (&i, &gv) in src.iter().zip(g.data()) {
            gx[i] += gv;
        }
        vec![Tensor::new(shape.clone(), gx).ok()]
    }))
}

/// Same data under new extents.
pub fn reshape<'t, T: Scalar>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let old = x.shape();
    let value = (*x.value()).clone().reshape(shape.to_vec())?;
    Ok(x.tape().record(value, &[x], move |g| vec![g.clone().reshape(old.clone()).ok()]))
}

/// The central depth slice of a `[C, D, H, W]` map as a `[C, H, W]` map.
pub fn center_depth_slice<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [c, _, h, w] = shape[..] else {
        return shape_err(format!("center_depth_slice needs [C, D, H, W], got {shape:?}"));
    };
    let cropped = center_crop(x, &[1, h, w])?;
    reshape(cropped, &[c, h, w])
}
