//! Volumes, masks and the three viewing planes.
//!
//! Voxel `(i, j, k)` of an `l × h × w` volume lives at `i·h·w + j·w + k`:
//! `i` indexes axial slices, `j` rows, `k` columns.

mod io;
mod phantom;
mod resample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use io::{load_volume, save_volume, VolumeFormat, RAW_V1_HEADER_LEN, RAW_V1_MAGIC};
pub use phantom::{make_phantom, make_phantom_with, PhantomParams};
pub use resample::{downsample_mask, downsample_slice, gt_pyramid, resize_area};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPlane {
    /// Slices of `h × w`, one per `i`.
    Axial,
    /// Slices of `l × h`, one per `k`.
    Sagittal,
    /// Slices of `l × w`, one per `j`.
    Coronal,
}

impl ViewPlane {
    pub const ALL: [ViewPlane; 3] = [ViewPlane::Axial, ViewPlane::Sagittal, ViewPlane::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            ViewPlane::Axial => "axial",
            ViewPlane::Sagittal => "sagittal",
            ViewPlane::Coronal => "coronal",
        }
    }

    pub fn slice_count(self, [l, h, w]: [usize; 3]) -> usize {
        match self {
            ViewPlane::Axial => l,
            ViewPlane::Sagittal => w,
            ViewPlane::Coronal => h,
        }
    }

    pub fn slice_extents(self, [l, h, w]: [usize; 3]) -> (usize, usize) {
        match self {
            ViewPlane::Axial => (h, w),
            ViewPlane::Sagittal => (l, h),
            ViewPlane::Coronal => (l, w),
        }
    }

    /// Volume coordinates `(i, j, k)` of row `r`, column `c` in slice `s`.
    pub fn to_volume(self, s: usize, r: usize, c: usize) -> (usize, usize, usize) {
        match self {
            ViewPlane::Axial => (s, r, c),
            ViewPlane::Sagittal => (r, c, s),
            ViewPlane::Coronal => (r, s, c),
        }
    }

    /// Inverse of [`to_volume`](Self::to_volume): `(slice, row, column)`.
    pub fn from_volume(self, i: usize, j: usize, k: usize) -> (usize, usize, usize) {
        match self {
            ViewPlane::Axial => (i, j, k),
            ViewPlane::Sagittal => (k, i, j),
            ViewPlane::Coronal => (j, i, k),
        }
    }
}

impl fmt::Display for ViewPlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewPlane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" | "a" => Ok(ViewPlane::Axial),
            "sagittal" | "s" => Ok(ViewPlane::Sagittal),
            "coronal" | "c" => Ok(ViewPlane::Coronal),
            other => Err(Error::Usage(format!("unknown view plane '{other}'"))),
        }
    }
}

/// A row-major 2D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2<V> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<V>,
}

impl<V: Copy> Grid2<V> {
    pub fn new(h: usize, w: usize, data: Vec<V>) -> Result<Self> {
        if h * w != data.len() || h == 0 || w == 0 {
            return shape_err(format!("grid {h}x{w} cannot hold {} values", data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: V) -> Self {
        Self { h, w, data: vec![value; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> V {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: V) {
        self.data[y * self.w + x] = value;
    }

    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Self> {
        if y0 + ph > self.h || x0 + pw > self.w || ph == 0 || pw == 0 {
            return shape_err(format!("crop {ph}x{pw} at ({y0}, {x0}) leaves a {}x{} grid", self.h, self.w));
        }
        let mut data = Vec::with_capacity(ph * pw);
        for y in y0..y0 + ph {
            data.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + pw]);
        }
        Ok(Self { h: ph, w: pw, data })
    }
}

impl Grid2<f32> {
    /// As a `[1, h, w]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![1, self.h, self.w], |i| T::of(self.data[i] as f64))
    }
}

impl Grid2<u8> {
    /// As a `[1, h, w]` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![1, self.h, self.w], |i| if self.data[i] != 0 { T::one() } else { T::zero() })
    }
}

/// An `l × h × w` intensity volume with voxel spacing and optional binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub extents: [usize; 3],
    /// Millimetres per voxel along `(i, j, k)`.
    pub spacing: [f64; 3],
    pub intensities: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl VolumeGrid {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], intensities: Vec<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if extents.contains(&0) {
            return shape_err(format!("volume extents {extents:?} must be positive"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return shape_err(format!("volume spacing {spacing:?} must be positive"));
        }
        if intensities.len() != n {
            return shape_err(format!("volume {extents:?} needs {n} intensities, got {}", intensities.len()));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return shape_err(format!("volume {extents:?} needs {n} labels, got {}", labels.len()));
            }
            if labels.iter().any(|&v| v > 1) {
                return shape_err("labels must be 0 or 1");
            }
        }
        Ok(Self { extents, spacing, intensities, labels })
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [_, h, w] = self.extents;
        (i * h + j) * w + k
    }

    /// Inclusive `(min, max)` per axis of the labelled voxels.
    pub fn label_bbox(&self) -> Option<[(usize, usize); 3]> {
        let labels = self.labels.as_ref()?;
        let [l, h, w] = self.extents;
        let mut bbox: Option<[(usize, usize); 3]> = None;
        for i in 0..l {
            for j in 0..h {
                for k in 0..w {
                    if labels[(i * h + j) * w + k] == 0 {
                        continue;
                    }
                    let b = bbox.get_or_insert([(i, i), (j, j), (k, k)]);
                    for (axis, v) in [i, j, k].into_iter().enumerate() {
                        b[axis].0 = b[axis].0.min(v);
                        b[axis].1 = b[axis].1.max(v);
                    }
                }
            }
        }
        bbox
    }

    pub fn label_fraction(&self) -> f64 {
        match &self.labels {
            Some(l) => l.iter().filter(|&&v| v != 0).count() as f64 / l.len() as f64,
            None => 0.0,
        }
    }
}

/// Splits volume-ordered data into the slices of `plane`.
pub fn extract_view_slices<V: Copy>(data: &[V], extents: [usize; 3], plane: ViewPlane) -> Vec<Grid2<V>> {
    let [_, h, w] = extents;
    let (sh, sw) = plane.slice_extents(extents);
    (0..plane.slice_count(extents))
        .map(|s| {
            let mut out = Vec::with_capacity(sh * sw);
            for r in 0..sh {
                for c in 0..sw {
                    let (i, j, k) = plane.to_volume(s, r, c);
                    out.push(data[(i * h + j) * w + k]);
                }
            }
            Grid2 { h: sh, w: sw, data: out }
        })
        .collect()
}

/// Inverse of [`extract_view_slices`].
pub fn stack_view_slices<V: Copy + Default>(
    slices: &[Grid2<V>],
    extents: [usize; 3],
    plane: ViewPlane,
) -> Result<Vec<V>> {
    let [l, h, w] = extents;
    let (sh, sw) = plane.slice_extents(extents);
    if slices.len() != plane.slice_count(extents) || slices.iter().any(|s| s.h != sh || s.w != sw) {
        return shape_err(format!("{} slices do not stack into a {extents:?} {plane} volume", slices.len()));
    }
    let mut out = vec![V::default(); l * h * w];
    for (s, slice) in slices.iter().enumerate() {
        for r in 0..sh {
            for c in 0..sw {
                let (i, j, k) = plane.to_volume(s, r, c);
                out[(i * h + j) * w + k] = slice.data[r * sw + c];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(extents: [usize; 3]) -> Vec<u32> {
        (0..extents.iter().product::<usize>() as u32).collect()
    }

    #[test]
    fn axial_slice_counts() {
        let ext = [3, 4, 5];
        let s = extract_view_slices(&lattice(ext), ext, ViewPlane::Axial);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|g| g.h == 4 && g.w == 5));
        let s = extract_view_slices(&lattice(ext), ext, ViewPlane::Sagittal);
        assert_eq!((s.len(), s[0].h, s[0].w), (5, 3, 4));
        let s = extract_view_slices(&lattice(ext), ext, ViewPlane::Coronal);
        assert_eq!((s.len(), s[0].h, s[0].w), (4, 3, 5));
    }

    #[test]
    fn voxel_positions_agree_across_views() {
        // Each lattice value encodes its own volume index.
        let ext = [3, 4, 5];
        let data = lattice(ext);
        for plane in ViewPlane::ALL {
            let slices = extract_view_slices(&data, ext, plane);
            for i in 0..3 {
                for j in 0..4 {
                    for k in 0..5 {
                        let (s, r, c) = plane.from_volume(i, j, k);
                        assert_eq!(slices[s].get(r, c), ((i * 4 + j) * 5 + k) as u32);
                    }
                }
            }
            assert_eq!(stack_view_slices(&slices, ext, plane).unwrap(), data);
        }
    }

    #[test]
    fn rejects_non_binary_labels() {
        let r = VolumeGrid::new([1, 1, 2], [1.0; 3], vec![0.0; 2], Some(vec![0, 2]));
        assert!(r.is_err());
    }

    #[test]
    fn label_bbox_bounds_labels() {
        let mut labels = vec![0u8; 4 * 5 * 6];
        labels[(5 + 2) * 6 + 3] = 1;
        labels[(2 * 5 + 4) * 6 + 1] = 1;
        let v = VolumeGrid::new([4, 5, 6], [1.0; 3], vec![0.0; 120], Some(labels)).unwrap();
        assert_eq!(v.label_bbox(), Some([(1, 2), (2, 4), (1, 3)]));
    }

    #[test]
    fn plane_names_parse() {
        for p in ViewPlane::ALL {
            assert_eq!(p.name().parse::<ViewPlane>().unwrap(), p);
        }
        assert!("oblique".parse::<ViewPlane>().is_err());
    }
}
