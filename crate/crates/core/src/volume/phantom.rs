//! Synthetic abdominal-like phantoms with known ground truth.
//!
//! A phantom is an elliptic "body" cross-section (air outside), a smooth
//! low-order intensity trend, and `n_blobs` random ellipsoids that form the
//! label and are brighter than the surrounding tissue. Only integer RNG
//! draws and IEEE arithmetic (+, −, ×, ÷, √) are used, so a seed yields the
//! same bytes on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::volume::VolumeGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub n_blobs: usize,
    /// Ellipsoid semi-axis range as a fraction of the extent along each axis.
    pub radius_frac: (f64, f64),
    pub tissue: f64,
    pub air: f64,
    /// Added to labelled voxels.
    pub contrast: f64,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub spacing: [f64; 3],
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            n_blobs: 2,
            radius_frac: (0.08, 0.16),
            tissue: 0.3,
            air: -0.5,
            contrast: 0.6,
            noise: 0.05,
            spacing: [2.0, 0.8, 0.8],
        }
    }
}

/// Phantom with default parameters and `n_blobs` ellipsoids.
pub fn make_phantom(seed: u64, extents: [usize; 3], n_blobs: usize) -> Result<VolumeGrid> {
    make_phantom_with(seed, extents, &PhantomParams { n_blobs, ..PhantomParams::default() })
}

pub fn make_phantom_with(seed: u64, extents: [usize; 3], params: &PhantomParams) -> Result<VolumeGrid> {
    if extents.iter().any(|&e| e < 16) {
        return shape_err(format!("phantom extents {extents:?} must be at least 16 per axis"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [l, h, w] = extents;
    let ef = extents.map(|e| e as f64);

    // Body cross-section, shared by every axial slice.
    let body_r = [rng.random_range(0.40..0.48) * ef[1], rng.random_range(0.40..0.48) * ef[2]];
    let body_c = [ef[1] / 2.0, ef[2] / 2.0];
    let trend: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));

    let (lo, hi) = params.radius_frac;
    let mut blobs = Vec::with_capacity(params.n_blobs);
    for _ in 0..params.n_blobs {
        let radii: [f64; 3] = std::array::from_fn(|a| rng.random_range(lo..hi) * ef[a]);
        // Keep the ellipsoid inside the volume and its centre inside the body.
        let center: [f64; 3] = std::array::from_fn(|a| {
            let margin = radii[a] + 1.0;
            let (mut a0, mut a1) = (margin, ef[a] - margin);
            if a > 0 {
                let r = body_r[a - 1] * 0.6;
                a0 = a0.max(body_c[a - 1] - r);
                a1 = a1.min(body_c[a - 1] + r);
            }
            if a1 <= a0 {
                ef[a] / 2.0
            } else {
                rng.random_range(a0..a1)
            }
        });
        blobs.push((center, radii));
    }

    let n = l * h * w;
    let mut intensities = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..l {
        let zi = (i as f64 + 0.5) / ef[0] - 0.5;
        for j in 0..h {
            let yj = (j as f64 + 0.5) / ef[1] - 0.5;
            for k in 0..w {
                let xk = (k as f64 + 0.5) / ef[2] - 0.5;
                let p = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let inside = blobs.iter().any(|(c, r)| {
                    let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]) * ((p[a] - c[a]) / r[a])).sum();
                    d <= 1.0
                });
                let by = (p[1] - body_c[0]) / body_r[0];
                let bx = (p[2] - body_c[1]) / body_r[1];
                let in_body = by * by + bx * bx <= 1.0;
                let mut v = if in_body {
                    params.tissue + trend[0] * yj + trend[1] * xk + trend[2] * zi + trend[3] * (yj * yj + xk * xk)
                } else {
                    params.air
                };
                if inside {
                    v += params.contrast;
                }
                // Irwin–Hall(4) has variance 1/3; rescale to unit variance.
                let u: f64 = (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0;
                v += u * 3.0f64.sqrt() * params.noise;
                intensities.push(v as f32);
                labels.push(inside as u8);
            }
        }
    }
    VolumeGrid::new(extents, params.spacing, intensities, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_volume() {
        let a = make_phantom(9, [16, 20, 24], 2).unwrap();
        let b = make_phantom(9, [16, 20, 24], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_phantom(10, [16, 20, 24], 2).unwrap());
    }

    #[test]
    fn labels_are_binary_and_nonempty() {
        let v = make_phantom(1, [24, 64, 64], 2).unwrap();
        let labels = v.labels.as_ref().unwrap();
        assert!(labels.iter().all(|&x| x <= 1));
        assert!(labels.contains(&1));
    }

    #[test]
    fn label_fraction_stays_organ_sized() {
        for seed in 0..100 {
            let f = make_phantom(seed, [24, 64, 64], 2).unwrap().label_fraction();
            assert!((0.002..=0.05).contains(&f), "seed {seed}: fraction {f}");
        }
    }

    #[test]
    fn small_extents_rejected() {
        assert!(make_phantom(0, [8, 64, 64], 1).is_err());
    }
}
