//! Overlapping slice decomposition for inference and training-patch sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::PatchWindow;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{extract_view_slices, Grid2, ViewPlane, VolumeGrid};

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// One inference window and the part of it that survives merging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedWindow {
    pub window: PatchWindow,
    pub keep: Rect,
}

/// Overlapping windows covering a slice; the keep rectangles partition it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub slice_h: usize,
    pub slice_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub overlap: usize,
    /// Row-major over window rows then columns.
    pub windows: Vec<PlannedWindow>,
}

/// Window starts along one axis and each window's kept span.
fn axis_layout(n: usize, p: usize, overlap: usize) -> Result<Vec<(usize, usize, usize)>> {
    if p == 0 || p > n {
        return Err(Error::Decomposition(format!("patch extent {p} does not fit slice extent {n}")));
    }
    if overlap >= p {
        return Err(Error::Decomposition(format!("overlap {overlap} must be smaller than patch {p}")));
    }
    let stride = p - overlap;
    let mut starts = vec![0];
    while starts.last().expect("non-empty") + p < n {
        let next = (starts.last().expect("non-empty") + stride).min(n - p);
        starts.push(next);
    }
    // Keep boundary between neighbours: midpoint of their overlap.
    let cuts: Vec<usize> = starts.windows(2).map(|w| (w[1] + w[0] + p) / 2).collect();
    Ok(starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let lo = if i == 0 { 0 } else { cuts[i - 1] };
            let hi = if i + 1 == starts.len() { n } else { cuts[i] };
            (s, lo, hi)
        })
        .collect())
}

/// Windows at `0, stride, 2·stride, …` per axis (`stride = patch − overlap`),
/// the last one clamped to the slice edge. Each window keeps the pixels
/// closer to its own center than to a neighbour's along each axis.
pub fn decompose(slice_hw: (usize, usize), patch: (usize, usize), overlap: usize) -> Result<PatchPlan> {
    let rows = axis_layout(slice_hw.0, patch.0, overlap)?;
    let cols = axis_layout(slice_hw.1, patch.1, overlap)?;
    let mut windows = Vec::with_capacity(rows.len() * cols.len());
    for &(y0, ky0, ky1) in &rows {
        for &(x0, kx0, kx1) in &cols {
            windows.push(PlannedWindow {
                window: PatchWindow { y0, x0, h: patch.0, w: patch.1 },
                keep: Rect { y0: ky0, y1: ky1, x0: kx0, x1: kx1 },
            });
        }
    }
    Ok(PatchPlan { slice_h: slice_hw.0, slice_w: slice_hw.1, patch_h: patch.0, patch_w: patch.1, overlap, windows })
}

impl PatchPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Copies every pixel from the window that keeps it.
pub fn merge<V: Copy + Default>(maps: &[Grid2<V>], plan: &PatchPlan) -> Result<Grid2<V>> {
    if maps.len() != plan.windows.len() {
        return Err(Error::Decomposition(format!("{} patch maps for {} windows", maps.len(), plan.windows.len())));
    }
    let mut out = Grid2::filled(plan.slice_h, plan.slice_w, V::default());
    for (map, pw) in maps.iter().zip(&plan.windows) {
        if map.h != pw.window.h || map.w != pw.window.w {
            return Err(Error::Decomposition(format!(
                "patch map {}x{} does not match window {}x{}",
                map.h, map.w, pw.window.h, pw.window.w
            )));
        }
        let k = pw.keep;
        for y in k.y0..k.y1 {
            let src = &map.data[(y - pw.window.y0) * map.w..][..map.w];
            let dst = &mut out.data[y * plan.slice_w..][..plan.slice_w];
            dst[k.x0..k.x1].copy_from_slice(&src[k.x0 - pw.window.x0..k.x1 - pw.window.x0]);
        }
    }
    Ok(out)
}

/// Crop of `grid` at `window`, reading `fill` outside the grid.
pub fn crop_padded<V: Copy>(grid: &Grid2<V>, window: PatchWindow, fill: V) -> Grid2<V> {
    let mut out = Grid2::filled(window.h, window.w, fill);
    for y in 0..window.h.min(grid.h.saturating_sub(window.y0)) {
        let sy = window.y0 + y;
        let n = window.w.min(grid.w.saturating_sub(window.x0));
        out.data[y * window.w..][..n].copy_from_slice(&grid.data[sy * grid.w + window.x0..][..n]);
    }
    out
}

/// The `2T + 1` slices centred on `center`, cropped to `window`. Slices past
/// either end of the stack repeat the boundary slice; pixels outside the
/// slice read zero.
pub fn crop_slab(slices: &[Grid2<f32>], center: usize, halfwidth: usize, window: PatchWindow) -> Vec<Grid2<f32>> {
    let last = slices.len() as isize - 1;
    (-(halfwidth as isize)..=halfwidth as isize)
        .map(|off| {
            let s = (center as isize + off).clamp(0, last) as usize;
            crop_padded(&slices[s], window, 0.0)
        })
        .collect()
}

/// Stacks a slab as a `[1, D, h, w]` tensor.
pub fn slab_tensor<T: Scalar>(slab: &[Grid2<f32>]) -> Result<Tensor<T>> {
    let (h, w) = (slab[0].h, slab[0].w);
    let data = slab.iter().flat_map(|g| g.data.iter().map(|&v| T::of(v as f64))).collect();
    Tensor::new(vec![1, slab.len(), h, w], data)
}

/// Slice extents after zero padding: multiples of 8 (three 2×2 poolings)
/// and at least `min`.
pub fn padded_extents(hw: (usize, usize), min: (usize, usize)) -> (usize, usize) {
    (hw.0.next_multiple_of(8).max(min.0), hw.1.next_multiple_of(8).max(min.1))
}

/// `grid` extended with `fill` at the bottom and right to `h × w`.
pub fn pad_grid<V: Copy>(grid: &Grid2<V>, h: usize, w: usize, fill: V) -> Grid2<V> {
    crop_padded(grid, PatchWindow { y0: 0, x0: 0, h, w }, fill)
}

/// A labelled volume seen through one plane. Slices and masks are padded
/// per [`padded_extents`]; sampling stays within the original extents.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub plane: ViewPlane,
    /// Slice extents before padding.
    pub orig_hw: (usize, usize),
    pub slices: Vec<Grid2<f32>>,
    pub masks: Vec<Grid2<u8>>,
    /// Inclusive `(min, max)` over (slice, row, column) of labelled pixels.
    pub label_box: Option<[(usize, usize); 3]>,
}

impl ViewData {
    pub fn new(vg: &VolumeGrid, plane: ViewPlane, min_hw: (usize, usize)) -> Result<Self> {
        let labels = vg.labels.as_ref().ok_or_else(|| Error::EmptyData("training volume has no labels".into()))?;
        let orig_hw = plane.slice_extents(vg.extents);
        let (ph, pw) = padded_extents(orig_hw, min_hw);
        let slices =
            extract_view_slices(&vg.intensities, vg.extents, plane).iter().map(|g| pad_grid(g, ph, pw, 0.0)).collect();
        let masks = extract_view_slices(labels, vg.extents, plane).iter().map(|g| pad_grid(g, ph, pw, 0)).collect();
        let label_box = vg.label_bbox().map(|b| {
            let lo = plane.from_volume(b[0].0, b[1].0, b[2].0);
            let hi = plane.from_volume(b[0].1, b[1].1, b[2].1);
            [(lo.0.min(hi.0), lo.0.max(hi.0)), (lo.1.min(hi.1), lo.1.max(hi.1)), (lo.2.min(hi.2), lo.2.max(hi.2))]
        });
        Ok(Self { plane, orig_hw, slices, masks, label_box })
    }

    /// Padded slice extents.
    pub fn slice_hw(&self) -> (usize, usize) {
        (self.slices[0].h, self.slices[0].w)
    }
}

/// One training example: a slab and the central slice's mask over `window`.
#[derive(Clone, Debug)]
pub struct TrainingPatch {
    /// Sampled center as (slice, row, column).
    pub center: (usize, usize, usize),
    pub slice: usize,
    pub window: PatchWindow,
    pub slab: Vec<Grid2<f32>>,
    pub target: Grid2<u8>,
}

/// Window of `p` pixels centred as closely as possible on `c` inside `n`;
/// starts at 0 when the patch is larger than the slice.
fn window_start(c: usize, p: usize, n: usize) -> usize {
    if p >= n {
        0
    } else {
        c.saturating_sub(p / 2).min(n - p)
    }
}

fn patch_at(view: &ViewData, center: (usize, usize, usize), halfwidth: usize, patch: (usize, usize)) -> TrainingPatch {
    let (h, w) = view.slice_hw();
    let window = PatchWindow {
        y0: window_start(center.1, patch.0, h),
        x0: window_start(center.2, patch.1, w),
        h: patch.0,
        w: patch.1,
    };
    TrainingPatch {
        center,
        slice: center.0,
        window,
        slab: crop_slab(&view.slices, center.0, halfwidth, window),
        target: crop_padded(&view.masks[center.0], window, 0),
    }
}

/// Two training patches: the first centred uniformly over the volume, the
/// second uniformly over the label bounding box (uniformly over the volume
/// when nothing is labelled).
pub fn sample_training_patches(
    view: &ViewData,
    halfwidth: usize,
    patch: (usize, usize),
    rng: &mut impl Rng,
) -> [TrainingPatch; 2] {
    let (h, w) = view.orig_hw;
    let full = [(0, view.slices.len() - 1), (0, h - 1), (0, w - 1)];
    let mut draw = |b: [(usize, usize); 3]| {
        (rng.random_range(b[0].0..=b[0].1), rng.random_range(b[1].0..=b[1].1), rng.random_range(b[2].0..=b[2].1))
    };
    let first = draw(full);
    let second = draw(view.label_box.unwrap_or(full));
    [patch_at(view, first, halfwidth, patch), patch_at(view, second, halfwidth, patch)]
}
