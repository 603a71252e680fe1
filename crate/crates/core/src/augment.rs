//! In-plane rotation and elastic deformation of training patches.
//!
//! Both transforms are folded into one backward map: output pixel `q` reads
//! the source at `R(−θ)·(q − c) + c + d(q)`, where `c` is the patch center
//! and `d` a smooth displacement field. Every slice of a slab and its target
//! mask share the map. Intensities are sampled bilinearly, masks by nearest
//! neighbour; samples past the patch edge clamp to the border.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::volume::Grid2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Rotation angles are uniform in `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Control points per axis of the random displacement grid.
    pub grid: usize,
    /// Gaussian smoothing of the upsampled field, in pixels.
    pub sigma: f64,
    /// Largest displacement after smoothing, in pixels.
    pub magnitude: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, grid: 8, sigma: 8.0, magnitude: 10.0 }
    }
}

/// A combined rotation and displacement field over an `h × w` patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub h: usize,
    pub w: usize,
    pub angle_rad: f64,
    /// Per-pixel `(dy, dx)`, row-major.
    pub displacement: Vec<(f64, f64)>,
}

impl Warp {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { h, w, angle_rad: 0.0, displacement: vec![(0.0, 0.0); h * w] }
    }

    pub fn random(h: usize, w: usize, params: &AugmentParams, rng: &mut impl Rng) -> Self {
        let max = params.max_rotation_deg.to_radians();
        let angle_rad = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let g = params.grid.max(2);
        let control: Vec<(f64, f64)> =
            (0..g * g).map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0))).collect();
        let mut dy = upsample_grid(&control, g, h, w, |c| c.0);
        let mut dx = upsample_grid(&control, g, h, w, |c| c.1);
        gaussian_blur(&mut dy, h, w, params.sigma);
        gaussian_blur(&mut dx, h, w, params.sigma);
        let peak = dy.iter().zip(&dx).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
        let scale = if peak > 0.0 { params.magnitude / peak } else { 0.0 };
        let displacement = dy.iter().zip(&dx).map(|(a, b)| (a * scale, b * scale)).collect();
        Self { h, w, angle_rad, displacement }
    }

    /// Source coordinate read by output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (cy, cx) = ((self.h as f64 - 1.0) / 2.0, (self.w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_rad.sin_cos();
        let (ry, rx) = (y as f64 - cy, x as f64 - cx);
        let (d_y, d_x) = self.displacement[y * self.w + x];
        (c * ry - s * rx + cy + d_y, s * ry + c * rx + cx + d_x)
    }

    pub fn apply_bilinear(&self, g: &Grid2<f32>) -> Grid2<f32> {
        let mut out = Grid2::filled(self.h, self.w, 0.0f32);
        let (hm, wm) = ((g.h - 1) as f64, (g.w - 1) as f64);
        for y in 0..self.h {
            for x in 0..self.w {
                let (sy, sx) = self.source(y, x);
                let (sy, sx) = (sy.clamp(0.0, hm), sx.clamp(0.0, wm));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(g.h - 1), (x0 + 1).min(g.w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = (1.0 - fy) * ((1.0 - fx) * g.get(y0, x0) as f64 + fx * g.get(y0, x1) as f64)
                    + fy * ((1.0 - fx) * g.get(y1, x0) as f64 + fx * g.get(y1, x1) as f64);
                out.set(y, x, v as f32);
            }
        }
        out
    }

    pub fn apply_nearest<V: Copy + Default>(&self, g: &Grid2<V>) -> Grid2<V> {
        let mut out = Grid2::filled(self.h, self.w, V::default());
        for y in 0..self.h {
            for x in 0..self.w {
                let (sy, sx) = self.source(y, x);
                let sy = sy.round().clamp(0.0, (g.h - 1) as f64) as usize;
                let sx = sx.round().clamp(0.0, (g.w - 1) as f64) as usize;
                out.set(y, x, g.get(sy, sx));
            }
        }
        out
    }
}

/// Bilinear upsampling of a `g × g` control grid spanning the patch corners.
fn upsample_grid(control: &[(f64, f64)], g: usize, h: usize, w: usize, pick: impl Fn(&(f64, f64)) -> f64) -> Vec<f64> {
    let coord = |i: usize, n: usize| if n > 1 { i as f64 * (g - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let cy = coord(y, h);
        let y0 = (cy.floor() as usize).min(g - 2);
        let fy = cy - y0 as f64;
        for x in 0..w {
            let cx = coord(x, w);
            let x0 = (cx.floor() as usize).min(g - 2);
            let fx = cx - x0 as f64;
            let at = |a: usize, b: usize| pick(&control[a * g + b]);
            out.push(
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)),
            );
        }
    }
    out
}

/// Separable Gaussian blur with border clamping.
fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * data[y * w + (x as isize + i).clamp(0, w as isize - 1) as usize])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = (-r..=r)
                .map(|i| kernel[(i + r) as usize] * tmp[(y as isize + i).clamp(0, h as isize - 1) as usize * w + x])
                .sum::<f64>()
                / norm;
        }
    }
}

/// Applies one random warp to every slice of `slab` and to `target`.
pub fn augment(
    slab: &[Grid2<f32>],
    target: &Grid2<u8>,
    rng: &mut impl Rng,
    params: &AugmentParams,
) -> (Vec<Grid2<f32>>, Grid2<u8>) {
    let warp = Warp::random(target.h, target.w, params, rng);
    apply_warp(&warp, slab, target)
}

pub fn apply_warp(warp: &Warp, slab: &[Grid2<f32>], target: &Grid2<u8>) -> (Vec<Grid2<f32>>, Grid2<u8>) {
    (slab.iter().map(|g| warp.apply_bilinear(g)).collect(), warp.apply_nearest(target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(h: usize, w: usize, seed: usize) -> Grid2<f32> {
        Grid2::new(h, w, (0..h * w).map(|i| ((i * 31 + seed * 7) % 23) as f32 / 23.0).collect()).unwrap()
    }

    #[test]
    fn identity_warp_is_identity() {
        let slab = vec![pattern(20, 24, 0), pattern(20, 24, 1)];
        let mask = Grid2::new(20, 24, (0..480).map(|i| (i % 5 == 0) as u8).collect()).unwrap();
        let (s, m) = apply_warp(&Warp::identity(20, 24), &slab, &mask);
        assert_eq!(s, slab);
        assert_eq!(m, mask);
        let none = AugmentParams { max_rotation_deg: 0.0, magnitude: 0.0, ..AugmentParams::default() };
        let (s, m) = augment(&slab, &mask, &mut ChaCha8Rng::seed_from_u64(0), &none);
        assert_eq!(s, slab);
        assert_eq!(m, mask);
    }

    #[test]
    fn mask_stays_binary_and_field_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = AugmentParams::default();
        let mask = Grid2::new(32, 32, (0..1024).map(|i| ((i / 32) % 7 < 3) as u8).collect()).unwrap();
        for _ in 0..10 {
            let warp = Warp::random(32, 32, &params, &mut rng);
            let peak = warp.displacement.iter().map(|d| d.0.hypot(d.1)).fold(0.0, f64::max);
            assert!((peak - params.magnitude).abs() < 1e-9);
            assert!(warp.angle_rad.abs() <= 15f64.to_radians());
            let m = warp.apply_nearest(&mask);
            assert!(m.data.iter().all(|&v| v <= 1));
        }
    }

    /// Identical marker slices must come out identical: the field is shared.
    #[test]
    fn slices_share_one_field() {
        let marker = pattern(32, 32, 3);
        let slab = vec![marker.clone(); 5];
        let mask = Grid2::filled(32, 32, 0u8);
        let (out, _) = augment(&slab, &mask, &mut ChaCha8Rng::seed_from_u64(8), &AugmentParams::default());
        assert_ne!(out[0], marker);
        assert!(out.iter().all(|s| *s == out[0]));
    }

    #[test]
    fn rotation_by_quarter_turn_permutes_pixels() {
        let g = pattern(9, 9, 0);
        let warp = Warp { angle_rad: std::f64::consts::FRAC_PI_2, ..Warp::identity(9, 9) };
        let out = warp.apply_nearest(&g);
        for y in 0..9 {
            for x in 0..9 {
                // Source (cy − (x − cx), cx + (y − cy)) with c = (4, 4).
                assert_eq!(out.get(y, x), g.get(8 - x, y));
            }
        }
    }
}
