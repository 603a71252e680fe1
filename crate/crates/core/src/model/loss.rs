//! The multiscale training objective.
//!
//! ```text
//! L = (1/N) Σ_k [C(P_k, G_k) + ¼ Σ_j C(P_k^(j), G_k^(j))] + α·C(P^f, G^f) + β·C(P^f', G^f')
//! ```
//!
//! with `C` the mean binary cross entropy.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::ops::{bce_loss, weighted_sum};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{downsample_mask, gt_pyramid, Grid2};

/// Targets for one patch: `G_k` and its four-scale pyramid (scale 0 is `G_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets<T> {
    pub scales: [Tensor<T>; 4],
}

impl<T: Scalar> PatchTargets<T> {
    pub fn from_mask(mask: &Grid2<u8>) -> Self {
        let pyramid = gt_pyramid(mask, 4);
        let scales = std::array::from_fn(|j| pyramid[j].to_tensor());
        Self { scales }
    }

    pub fn full(&self) -> &Tensor<T> {
        &self.scales[0]
    }
}

/// Targets for the global heads, OR-downsampled from the full-resolution
/// slice mask to `/32` and `/16` of the global input extents.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalTargets<T> {
    pub gf: Tensor<T>,
    pub gf_prime: Tensor<T>,
}

impl<T: Scalar> GlobalTargets<T> {
    pub fn from_mask(mask: &Grid2<u8>, hg: usize, wg: usize) -> Result<Self> {
        Ok(Self {
            gf: downsample_mask(mask, hg / 32, wg / 32)?.to_tensor(),
            gf_prime: downsample_mask(mask, hg / 16, wg / 16)?.to_tensor(),
        })
    }
}

/// `C(P_k, G_k) + ¼ Σ_j C(P^(j), G^(j))` for one patch.
pub fn patch_loss<'t, T: Scalar>(
    prob: Var<'t, T>,
    heads: &[Var<'t, T>; 4],
    targets: &PatchTargets<T>,
) -> Result<Var<'t, T>> {
    let mut terms = vec![(bce_loss(prob, targets.full())?, 1.0)];
    for (p, g) in heads.iter().zip(&targets.scales) {
        terms.push((bce_loss(*p, g)?, 0.25));
    }
    weighted_sum(&terms)
}

/// `α·C(P^f, G^f) + β·C(P^f', G^f')`. Terms with zero weight are left off
/// the tape; `None` when both weights are zero.
pub fn global_loss<'t, T: Scalar>(
    pf: Var<'t, T>,
    pf_prime: Var<'t, T>,
    targets: &GlobalTargets<T>,
    alpha: f64,
    beta: f64,
) -> Result<Option<Var<'t, T>>> {
    let mut terms = Vec::new();
    if alpha != 0.0 {
        terms.push((bce_loss(pf, &targets.gf)?, alpha));
    }
    if beta != 0.0 {
        terms.push((bce_loss(pf_prime, &targets.gf_prime)?, beta));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    weighted_sum(&terms).map(Some)
}

/// Mean of the per-patch terms plus the global term.
pub fn total_loss<'t, T: Scalar>(patch_terms: &[Var<'t, T>], global: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    if patch_terms.is_empty() && global.is_none() {
        return shape_err("total_loss needs at least one term");
    }
    let mut terms = Vec::with_capacity(patch_terms.len() + 1);
    if !patch_terms.is_empty() {
        let w = 1.0 / patch_terms.len() as f64;
        terms.extend(patch_terms.iter().map(|&v| (v, w)));
    }
    terms.extend(global.map(|g| (g, 1.0)));
    weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn half_maps<'t>(tape: &'t Tape<f64>, h: usize) -> (Var<'t, f64>, [Var<'t, f64>; 4]) {
        let p = tape.constant(Tensor::full(vec![1, h, h], 0.5));
        let heads = std::array::from_fn(|j| tape.constant(Tensor::full(vec![1, h >> j, h >> j], 0.5)));
        (p, heads)
    }

    #[test]
    fn half_maps_give_plug_in_value() {
        let mask = Grid2::new(16, 16, (0..256).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let pt = PatchTargets::<f64>::from_mask(&mask);
        let mask64 = Grid2::new(64, 64, (0..4096).map(|i| (i % 5 == 0) as u8).collect()).unwrap();
        let gt = GlobalTargets::<f64>::from_mask(&mask64, 64, 64).unwrap();
        let tape = Tape::new();
        let (p, heads) = half_maps(&tape, 16);
        let pf = tape.constant(Tensor::full(vec![1, 2, 2], 0.5));
        let pfp = tape.constant(Tensor::full(vec![1, 4, 4], 0.5));
        let (alpha, beta) = (0.3, 0.7);
        let pl = patch_loss(p, &heads, &pt).unwrap();
        let gl = global_loss(pf, pfp, &gt, alpha, beta).unwrap();
        let total = total_loss(&[pl], gl).unwrap().item();
        let ln2 = std::f64::consts::LN_2;
        assert!((total - (2.0 * ln2 + (alpha + beta) * ln2)).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let mask = Grid2::new(16, 16, (0..256).map(|i| (i % 7 < 3) as u8).collect()).unwrap();
        let pt = PatchTargets::<f64>::from_mask(&mask);
        let tape = Tape::new();
        let p = tape.constant(pt.full().clone());
        let heads = std::array::from_fn(|j| tape.constant(pt.scales[j].clone()));
        let loss = total_loss(&[patch_loss(p, &heads, &pt).unwrap()], None).unwrap();
        assert!(loss.item() <= 1e-5);
    }

    #[test]
    fn zero_weights_drop_global_term() {
        let mask = Grid2::filled(64, 64, 1u8);
        let gt = GlobalTargets::<f64>::from_mask(&mask, 64, 64).unwrap();
        let tape = Tape::new();
        let pf = tape.constant(Tensor::full(vec![1, 2, 2], 0.5));
        let pfp = tape.constant(Tensor::full(vec![1, 4, 4], 0.5));
        assert!(global_loss(pf, pfp, &gt, 0.0, 0.0).unwrap().is_none());
    }

    #[test]
    fn patch_terms_are_averaged() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(3.0));
        assert_eq!(total_loss(&[a, b], None).unwrap().item(), 2.0);
        assert!(total_loss::<f64>(&[], None).is_err());
    }
}
