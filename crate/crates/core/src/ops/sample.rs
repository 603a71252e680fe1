use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Interpolation stencil for one normalized coordinate pair: four cell
/// indices and their bilinear weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub wts: [f64; 4],
}

/// Continuous cell coordinate for normalized `u ∈ [0, 1]` over `n` cells:
/// `u·n − 0.5`, clamped to `[0, n − 1]`, so cell centers sit at `(i + 0.5)/n`.
fn continuous(u: f64, n: usize) -> f64 {
    (u * n as f64 - 0.5).clamp(0.0, (n - 1) as f64)
}

pub(crate) fn stencil(u: f64, v: f64, hm: usize, wm: usize) -> Stencil {
    let (cy, cx) = (continuous(u, hm), continuous(v, wm));
    let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(hm - 1), (x0 + 1).min(wm - 1));
    let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
    Stencil {
        idx: [y0 * wm + x0, y0 * wm + x1, y1 * wm + x0, y1 * wm + x1],
        wts: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
    }
}

/// Bilinear sampling of `map: [C, Hm, Wm]` at normalized `(u, v)` coordinates
/// (`u` along height). Returns `[C, n]`; differentiable with respect to `map`.
pub fn bilinear_sample<'t, T: Scalar>(map: Var<'t, T>, coords: &[(f64, f64)]) -> Result<Var<'t, T>> {
    let shape = map.shape();
    let [c, hm, wm] = shape[..] else {
        return shape_err(format!("bilinear_sample needs [C, H, W], got {shape:?}"));
    };
    if coords.is_empty() {
        return shape_err("bilinear_sample needs at least one coordinate");
    }
    let stencils: Vec<Stencil> = coords.iter().map(|&(u, v)| stencil(u, v, hm, wm)).collect();
    let n = stencils.len();
    let mv = map.value();
    let md = mv.data();
    let mut out = Vec::with_capacity(c * n);
    for ci in 0..c {
        let plane = &md[ci * hm * wm..][..hm * wm];
        for s in &stencils {
            let mut acc = T::zero();
            for k in 0..4 {
                acc += T::of(s.wts[k]) * plane[s.idx[k]];
            }
            out.push(acc);
        }
    }
    let value = Tensor::new(vec![c, n], out)?;
    Ok(map.tape().record(value, &[map], move |g| {
        let mut gm = vec![T::zero(); c * hm * wm];
        for ci in 0..c {
            for (j, s) in stencils.iter().enumerate() {
                let gv = g.data()[ci * n + j];
                for k in 0..4 {
                    gm[ci * hm * wm + s.idx[k]] += T::of(s.wts[k]) * gv;
                }
            }
        }
        vec![Tensor::new(shape.clone(), gm).ok()]
    }))
}
