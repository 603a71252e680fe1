//! Convolutions: depth-valid 3D, same-padded 2D, stride-2 2D and 2×2
//! transposed.
//!
//! All H/W padding is zero same-padding. Depth is never padded, so a kernel of
//! depth `kd` shrinks the depth axis by `kd - 1`. 2D convolutions run through
//! the same kernel with depth 1.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

impl Geom {
    fn od(&self) -> usize {
        self.d + 1 - self.kd
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn taps(&self) -> usize {
        self.kd * self.kh * self.kw
    }
}

/// `out[y][x] += wv * inp[y + dy][x + dx]` over every in-bounds position.
#[inline]
fn axpy_shifted<T: Scalar>(out: &mut [T], inp: &[T], wv: T, h: usize, w: usize, dy: isize, dx: isize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize);
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize);
    if y1 <= y0 as isize || x1 <= x0 as isize {
        return;
    }
    let (y1, x1) = (y1 as usize, x1 as usize);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let ix0 = (x0 as isize + dx) as usize;
        let irow = &inp[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
        for (o, &i) in orow.iter_mut().zip(irow) {
            *o += wv * i;
        }
    }
}

/// `Σ a[y][x] * b[y + dy][x + dx]` over every in-bounds position.
#[inline]
fn dot_shifted<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize);
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize);
    let mut acc = T::zero();
    if y1 <= y0 as isize || x1 <= x0 as isize {
        return acc;
    }
    let (y1, x1) = (y1 as usize, x1 as usize);
    for y in y0..y1 {
        let by = (y as isize + dy) as usize;
        let bx0 = (x0 as isize + dx) as usize;
        let arow = &a[y * w + x0..y * w + x1];
        let brow = &b[by * w + bx0..by * w + bx0 + (x1 - x0)];
        for (&p, &q) in arow.iter().zip(brow) {
            acc += p * q;
        }
    }
    acc
}

fn conv_forward<T: Scalar>(x: &[T], wts: &[T], bias: &[T], g: Geom) -> Vec<T> {
    let (hw, od) = (g.hw(), g.od());
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut out = vec![T::zero(); g.k * od * hw];
    out.par_chunks_mut(od * hw).enumerate().for_each(|(ko, out_k)| {
        for zo in 0..od {
            let plane = &mut out_k[zo * hw..(zo + 1) * hw];
            plane.fill(bias[ko]);
            for ci in 0..g.c {
                for kz in 0..g.kd {
                    let inp = &x[(ci * g.d + zo + kz) * hw..][..hw];
                    let wbase = ((ko * g.c + ci) * g.kd + kz) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wts[wbase + ky * g.kw + kx];
                            axpy_shifted(plane, inp, wv, g.h, g.w, ky as isize - ph, kx as isize - pw);
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward<T: Scalar>(x: &[T], wts: &[T], gout: &[T], g: Geom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (hw, od) = (g.hw(), g.od());
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);

    let mut gx = vec![T::zero(); g.c * g.d * hw];
    gx.par_chunks_mut(g.d * hw).enumerate().for_each(|(ci, gx_c)| {
        for ko in 0..g.k {
            for zo in 0..od {
                let gplane = &gout[(ko * od + zo) * hw..][..hw];
                for kz in 0..g.kd {
                    let target = &mut gx_c[(zo + kz) * hw..(zo + kz + 1) * hw];
                    let wbase = ((ko * g.c + ci) * g.kd + kz) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wts[wbase + ky * g.kw + kx];
                            axpy_shifted(target, gplane, wv, g.h, g.w, ph - ky as isize, pw - kx as isize);
                        }
                    }
                }
            }
        }
    });

    let per_k = g.c * g.taps();
    let mut gw = vec![T::zero(); g.k * per_k];
    gw.par_chunks_mut(per_k).enumerate().for_each(|(ko, gw_k)| {
        for ci in 0..g.c {
            for kz in 0..g.kd {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = T::zero();
                        for zo in 0..od {
                            let a = &gout[(ko * od + zo) * hw..][..hw];
                            let b = &x[(ci * g.d + zo + kz) * hw..][..hw];
                            acc += dot_shifted(a, b, g.h, g.w, ky as isize - ph, kx as isize - pw);
                        }
                        gw_k[((ci * g.kd + kz) * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        }
    });

    let gb = gout.chunks(od * hw).map(|ch| ch.iter().copied().sum()).collect();
    (gx, gw, gb)
}

fn check_bias<T: Scalar>(b: &Var<'_, T>, k: usize) -> Result<()> {
    if b.shape() != [k] {
        return shape_err(format!("bias shape {:?} does not match {k} output channels", b.shape()));
    }
    Ok(())
}

fn run_conv<'t, T: Scalar>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    g: Geom,
    out_shape: Vec<usize>,
) -> Result<Var<'t, T>> {
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let out = conv_forward(xv.data(), wv.data(), bv.data(), g);
    let (x_shape, w_shape) = (xv.shape().to_vec(), wv.shape().to_vec());
    let value = Tensor::new(out_shape, out)?;
    Ok(x.tape().record(value, &[x, w, b], move |gout| {
        let (gx, gw, gb) = conv_backward(xv.data(), wv.data(), gout.data(), g);
        vec![
            Tensor::new(x_shape.clone(), gx).ok(),
            Tensor::new(w_shape.clone(), gw).ok(),
            Tensor::new(vec![g.k], gb).ok(),
        ]
    }))
}

/// 3D convolution, valid along depth and zero same-padded along H/W.
///
/// `x: [C, D, H, W]`, `w: [K, C, kd, kh, kw]` (odd kernel extents),
/// `b: [K]` → `[K, D - kd + 1, H, W]`. The architecture uses `kd = 3` for the
/// depth-fusing layers and `kd = 1` for planar layers.
pub fn conv3d_dvalid<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let [c, d, h, wd] = xs[..] else {
        return shape_err(format!("conv3d input must be [C, D, H, W], got {xs:?}"));
    };
    let [k, kc, kd, kh, kw] = ws[..] else {
        return shape_err(format!("conv3d kernel must be [K, C, kd, kh, kw], got {ws:?}"));
    };
    if kc != c {
        return shape_err(format!("conv3d channel mismatch: input {c}, kernel {kc}"));
    }
    if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return shape_err(format!("conv3d kernel extents must be odd, got {ws:?}"));
    }
    if d < kd {
        return Err(Error::DepthUnderflow { depth: d, kernel: kd });
    }
    check_bias(&b, k)?;
    let g = Geom { c, d, h, w: wd, k, kd, kh, kw };
    run_conv(x, w, b, g, vec![k, g.od(), h, wd])
}

/// 2D convolution with zero same-padding: `[C, H, W]` ⊛ `[K, C, kh, kw]` → `[K, H, W]`.
pub fn conv2d<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let [c, h, wd] = xs[..] else {
        return shape_err(format!("conv2d input must be [C, H, W], got {xs:?}"));
    };
    let [k, kc, kh, kw] = ws[..] else {
        return shape_err(format!("conv2d kernel must be [K, C, kh, kw], got {ws:?}"));
    };
    if kc != c {
        return shape_err(format!("conv2d channel mismatch: input {c}, kernel {kc}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return shape_err(format!("conv2d kernel extents must be odd, got {ws:?}"));
    }
    check_bias(&b, k)?;
    let g = Geom { c, d: 1, h, w: wd, k, kd: 1, kh, kw };
    run_conv(x, w, b, g, vec![k, h, wd])
}

fn strided_out(n: usize) -> usize {
    n.div_ceil(2)
}

#[derive(Clone, Copy)]
struct Stride2Dims {
    c: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Stride2Dims {
    /// Visits `(output index, input index, weight index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Stride2Dims { c, k, h, w, oh, ow } = *self;
        for ko in 0..k {
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wi = ((ko * c + ci) * 3 + ky) * 3 + kx;
                        for oy in 0..oh {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                f((ko * oh + oy) * ow + ox, (ci * h + iy as usize) * w + ix as usize, wi);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 convolution with stride 2 and zero padding 1: `[C, H, W]` → `[K, ⌈H/2⌉, ⌈W/2⌉]`.
pub fn conv2d_stride2<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let [c, h, wd] = xs[..] else {
        return shape_err(format!("strided conv input must be [C, H, W], got {xs:?}"));
    };
    let [k, kc, 3, 3] = ws[..] else {
        return shape_err(format!("strided conv kernel must be [K, C, 3, 3], got {ws:?}"));
    };
    if kc != c {
        return shape_err(format!("strided conv channel mismatch: input {c}, kernel {kc}"));
    }
    check_bias(&b, k)?;
    let (oh, ow) = (strided_out(h), strided_out(wd));
    let (xv, wv, bv) = (x.value(), w.value(), b.value());

    let dims = Stride2Dims { c, k, h, w: wd, oh, ow };

    let mut out = vec![T::zero(); k * oh * ow];
    for (ko, chunk) in out.chunks_mut(oh * ow).enumerate() {
        chunk.fill(bv.data()[ko]);
    }
    dims.for_each_tap(|oi, ii, wi| out[oi] += wv.data()[wi] * xv.data()[ii]);
    let value = Tensor::new(vec![k, oh, ow], out)?;
    let (x_shape, w_shape) = (xs.clone(), ws.clone());
    Ok(x.tape().record(value, &[x, w, b], move |gout| {
        let go = gout.data();
        let mut gx = vec![T::zero(); xv.numel()];
        let mut gw = vec![T::zero(); wv.numel()];
        dims.for_each_tap(|oi, ii, wi| {
            gx[ii] += wv.data()[wi] * go[oi];
            gw[wi] += xv.data()[ii] * go[oi];
        });
        let gb = go.chunks(oh * ow).map(|ch| ch.iter().copied().sum()).collect();
        vec![
            Tensor::new(x_shape.clone(), gx).ok(),
            Tensor::new(w_shape.clone(), gw).ok(),
            Tensor::new(vec![k], gb).ok(),
        ]
    }))
}

/// Stride-2 transposed convolution with a 2×2 kernel.
///
/// `x: [C, H, W]`, `w: [C, K, 2, 2]`, `b: [K]` → `[K, 2H, 2W]`. Each input
/// pixel scatters into its own 2×2 output block, so blocks never overlap.
pub fn transposed_conv2d<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let [c, h, wd] = xs[..] else {
        return shape_err(format!("transposed conv input must be [C, H, W], got {xs:?}"));
    };
    let [kc, k, 2, 2] = ws[..] else {
        return shape_err(format!("transposed conv kernel must be [C, K, 2, 2], got {ws:?}"));
    };
    if kc != c {
        return shape_err(format!("transposed conv channel mismatch: input {c}, kernel {kc}"));
    }
    check_bias(&b, k)?;
    let (oh, ow) = (2 * h, 2 * wd);
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let (xd, wdat, bd) = (xv.data(), wv.data(), bv.data());

    let mut out = vec![T::zero(); k * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(ko, plane)| {
        plane.fill(bd[ko]);
        for ci in 0..c {
            let xin = &xd[ci * h * wd..][..h * wd];
            for dy in 0..2 {
                for dx in 0..2 {
                    let wv = wdat[((ci * k + ko) * 2 + dy) * 2 + dx];
                    for y in 0..h {
                        let orow = &mut plane[(2 * y + dy) * ow..][..ow];
                        for x in 0..wd {
                            orow[2 * x + dx] += wv * xin[y * wd + x];
                        }
                    }
                }
            }
        }
    });
    let value = Tensor::new(vec![k, oh, ow], out)?;
    let (x_shape, w_shape) = (xs.clone(), ws.clone());
    Ok(x.tape().record(value, &[x, w, b], move |gout| {
        let (go, xd, wdat) = (gout.data(), xv.data(), wv.data());
        let mut gx = vec![T::zero(); xd.len()];
        let mut gw = vec![T::zero(); wdat.len()];
        for ci in 0..c {
            for ko in 0..k {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wi = ((ci * k + ko) * 2 + dy) * 2 + dx;
                        let mut acc = T::zero();
                        for y in 0..h {
                            let grow = &go[(ko * oh + 2 * y + dy) * ow..][..ow];
                            for x in 0..wd {
                                let g = grow[2 * x + dx];
                                gx[(ci * h + y) * wd + x] += wdat[wi] * g;
                                acc += xd[(ci * h + y) * wd + x] * g;
                            }
                        }
                        gw[wi] = acc;
                    }
                }
            }
        }
        let gb = go.chunks(oh * ow).map(|ch| ch.iter().copied().sum()).collect();
        vec![
            Tensor::new(x_shape.clone(), gx).ok(),
            Tensor::new(w_shape.clone(), gw).ok(),
            Tensor::new(vec![k], gb).ok(),
        ]
    }))
}
