//! Slice and volume inference, multi-view fusion and segmentation metrics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{shape_err, Error, Result};
use crate::model::{forward_patch, global_forward, GgpfnConfig, GlobalFeatures, ParamStore};
use crate::patch::{crop_slab, decompose, merge, pad_grid, padded_extents, slab_tensor};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{extract_view_slices, resize_area, stack_view_slices, Grid2, ViewPlane, VolumeGrid};

/// Global-branch input for a (padded) slice.
pub fn global_input(slice: &Grid2<f32>, hg: usize, wg: usize) -> Result<Grid2<f32>> {
    resize_area(slice, hg, wg)
}

fn grid_from<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Grid2<f32>> {
    Grid2::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
}

/// Probability map of slice `index` of a view.
///
/// The slice is zero-padded to multiples of 8 (at least the inference
/// window), its global features are computed once from the padded slice,
/// the padded slice is decomposed into overlapping windows (one window when
/// `infer_patch` is unset), every window runs through the encoder and
/// decoder, and the kept parts are merged and cropped back.
pub fn segment_slice<T: Scalar>(
    slices: &[Grid2<f32>],
    index: usize,
    params: &ParamStore<T>,
    cfg: &GgpfnConfig,
) -> Result<Grid2<f32>> {
    let Some(slice) = slices.get(index) else {
        return shape_err(format!("slice {index} of {}", slices.len()));
    };
    let (h, w) = (slice.h, slice.w);
    let window = cfg.infer_patch.map(|[a, b]| (a, b));
    let (ph, pw) = padded_extents((h, w), window.unwrap_or((0, 0)));
    let plan = decompose((ph, pw), window.unwrap_or((ph, pw)), cfg.overlap)?;

    let t = cfg.slice_halfwidth;
    let last = slices.len() - 1;
    let neighbours: Vec<Grid2<f32>> =
        (0..=2 * t).map(|o| pad_grid(&slices[(index + o).saturating_sub(t).min(last)], ph, pw, 0.0)).collect();

    let global = if cfg.global_enabled {
        let tape = Tape::new();
        let p = params.bind(&tape, |_| false);
        let g = global_input(&neighbours[t], cfg.hg, cfg.wg)?;
        let gf = global_forward(tape.constant(g.to_tensor()), &p, cfg)?;
        let (f, f_prime) = (gf.f.value(), gf.f_prime.value());
        Some(((*f).clone(), (*f_prime).clone()))
    } else {
        None
    };

    let mut maps = Vec::with_capacity(plan.len());
    for pw_ in &plan.windows {
        let tape = Tape::new();
        let p = params.bind(&tape, |_| false);
        let gf = global
            .as_ref()
            .map(|(f, fp)| GlobalFeatures { f: tape.constant(f.clone()), f_prime: tape.constant(fp.clone()) });
        let slab = tape.constant(slab_tensor(&crop_slab(&neighbours, t, t, pw_.window))?);
        let out = forward_patch(slab, pw_.window, (ph, pw), gf.as_ref(), &p, cfg, false)?;
        maps.push(grid_from(&out.prob.value(), pw_.window.h, pw_.window.w)?);
    }
    merge(&maps, &plan)?.crop(0, 0, h, w)
}

/// Segments every slice of `plane` and re-stacks the maps in volume order.
/// Slices run in parallel against the shared parameters.
pub fn segment_volume_view<T: Scalar>(
    vg: &VolumeGrid,
    plane: ViewPlane,
    params: &ParamStore<T>,
    cfg: &GgpfnConfig,
) -> Result<Vec<f32>> {
    let slices = extract_view_slices(&vg.intensities, vg.extents, plane);
    let maps = (0..slices.len())
        .into_par_iter()
        .map(|i| segment_slice(&slices, i, params, cfg))
        .collect::<Result<Vec<_>>>()?;
    stack_view_slices(&maps, vg.extents, plane)
}

/// Voxelwise `Σ wᵢ·Vᵢ`. Weights must sum to 1 within 1e-6.
pub fn fuse_weighted(volumes: &[(&[f32], f64)]) -> Result<Vec<f32>> {
    let Some((first, _)) = volumes.first() else {
        return shape_err("fusion needs at least one volume");
    };
    if volumes.iter().any(|(v, _)| v.len() != first.len()) {
        return shape_err("fused volumes differ in size");
    }
    let total: f64 = volumes.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-6 || volumes.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::Config(format!("fusion weights sum to {total}, expected 1")));
    }
    Ok((0..first.len()).map(|i| volumes.iter().map(|(v, w)| w * v[i] as f64).sum::<f64>() as f32).collect())
}

/// `V = w_a·V_a + w_s·V_s + w_c·V_c`.
pub fn fuse_p3d(va: &[f32], vs: &[f32], vc: &[f32], weights: [f64; 3]) -> Result<Vec<f32>> {
    fuse_weighted(&[(va, weights[0]), (vs, weights[1]), (vc, weights[2])])
}

/// `1` where `v ≥ t`.
pub fn threshold_mask(v: &[f32], t: f32) -> Vec<u8> {
    v.iter().map(|&p| (p >= t) as u8).collect()
}

/// Dice similarity `2|P ∩ G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return shape_err(format!("dsc: {} vs {} voxels", pred.len(), gt.len()));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// One row of a precision-recall table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Precision and recall at thresholds `(i + 1)/(n + 1)`, `i = 0..n`.
/// Precision with no positive predictions is 1.
pub fn pr_curve(v: &[f32], gt: &[u8], n_thresholds: usize) -> Result<Vec<PrPoint>> {
    if v.len() != gt.len() {
        return shape_err(format!("pr_curve: {} vs {} voxels", v.len(), gt.len()));
    }
    let positives = gt.iter().filter(|&&g| g != 0).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("recall is undefined for an empty ground truth".into()));
    }
    // Sorting once makes every threshold a binary search.
    let mut scored: Vec<(f64, bool)> = v.iter().zip(gt).map(|(&p, &g)| (p as f64, g != 0)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut tp_above = vec![0usize; scored.len() + 1];
    for i in (0..scored.len()).rev() {
        tp_above[i] = tp_above[i + 1] + scored[i].1 as usize;
    }
    Ok((0..n_thresholds)
        .map(|i| {
            let threshold = (i + 1) as f64 / (n_thresholds + 1) as f64;
            let first = scored.partition_point(|s| s.0 < threshold);
            let predicted = scored.len() - first;
            let tp = tp_above[first];
            let precision = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
            let recall = tp as f64 / positives as f64;
            let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            PrPoint { threshold, precision, recall, f_score }
        })
        .collect())
}

/// One tab-separated line per point: threshold, precision, recall, F-score.
pub fn format_pr(points: &[PrPoint]) -> String {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{:.6}\t{:.6}\t{:.6}\t{:.6}", p.threshold, p.precision, p.recall, p.f_score);
    }
    out
}

/// Probabilities, the thresholded mask and, with labels, the DSC.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub probabilities: Vec<f32>,
    pub mask: Vec<u8>,
    pub dsc: Option<f64>,
}

impl SegmentationResult {
    pub fn new(probabilities: Vec<f32>, labels: Option<&[u8]>) -> Result<Self> {
        let mask = threshold_mask(&probabilities, 0.5);
        let dsc = labels.map(|l| dsc(&mask, l)).transpose()?;
        Ok(Self { probabilities, mask, dsc })
    }
}
