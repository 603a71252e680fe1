use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{as_cdhw, Scalar, Tensor};

/// Max pooling over the non-channel axes with non-overlapping windows.
///
/// `window` has one extent per non-channel axis: `(1, 2, 2)` for `[C, D, H, W]`
/// maps, `(2, 2)` for `[C, H, W]` maps. Each extent must divide its axis. The
/// gradient flows to the first maximal element of each window in row-major
/// order.
pub fn max_pool<'t, T: Scalar>(x: Var<'t, T>, window: &[usize]) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if window.len() + 1 != shape.len() {
        return shape_err(format!("pool window {window:?} does not fit input {shape:?}"));
    }
    let [c, d, h, w] = as_cdhw(&shape)?;
    let [wd, wh, ww] = match *window {
        [a, b, e] => [a, b, e],
        [b, e] => [1, b, e],
        _ => unreachable!(),
    };
    if wd == 0 || wh == 0 || ww == 0 || d % wd != 0 || h % wh != 0 || w % ww != 0 {
        return shape_err(format!("pool window {window:?} does not divide extents {shape:?}"));
    }
    let (od, oh, ow) = (d / wd, h / wh, w / ww);
    let xv = x.value();
    let xd = xv.data();
    let n_out = c * od * oh * ow;
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = usize::MAX;
                    let mut best = T::neg_infinity();
                    for dz in 0..wd {
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let i = ((ci * d + z * wd + dz) * h + y * wh + dy) * w + xo * ww + dx;
                                if best_i == usize::MAX || xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    let mut out_shape = shape.clone();
    let rank = shape.len();
    out_shape[rank - 2] = oh;
    out_shape[rank - 1] = ow;
    if rank == 4 {
        out_shape[1] = od;
    }
    let n_in = xv.numel();
    let value = Tensor::new(out_shape, out)?;
    Ok(x.tape().record(value, &[x], move |gout| {
        let mut gx = vec![T::zero(); n_in];
        for (&i, &g) in argmax.iter().zip(gout.data()) {
            gx[i] += g;
        }
        vec![Tensor::new(shape.clone(), gx).ok()]
    }))
}
