use crate::error::{shape_err, Result};
use crate::volume::Grid2;

/// Per-output-cell `(source index, weight)` lists for area averaging `n`
/// source cells down to `m` output cells.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|p| {
                    let overlap = hi.min((p + 1) as f64) - lo.max(p as f64);
                    (overlap > 0.0).then_some((p, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resample of an intensity slice to `hg × wg`.
pub fn downsample_slice(slice: &Grid2<f32>, hg: usize, wg: usize) -> Result<Grid2<f32>> {
    if hg == 0 || wg == 0 || hg > slice.h || wg > slice.w {
        return shape_err(format!("cannot downsample {}x{} to {hg}x{wg}", slice.h, slice.w));
    }
    resize_area(slice, hg, wg)
}

/// Box-filter resample to any positive extents: each output cell averages
/// the source area it covers. Enlarging replicates source cells with linear
/// blending where an output cell straddles two of them.
pub fn resize_area(slice: &Grid2<f32>, hg: usize, wg: usize) -> Result<Grid2<f32>> {
    if hg == 0 || wg == 0 {
        return shape_err(format!("cannot resize {}x{} to {hg}x{wg}", slice.h, slice.w));
    }
    let (wy, wx) = (area_weights(slice.h, hg), area_weights(slice.w, wg));
    // Columns first, then rows.
    let mut tmp = vec![0.0f64; slice.h * wg];
    for y in 0..slice.h {
        let row = &slice.data[y * slice.w..][..slice.w];
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * wg + ox] = taps.iter().map(|&(p, wt)| wt * row[p] as f64).sum();
        }
    }
    let mut out = Vec::with_capacity(hg * wg);
    for taps in &wy {
        for ox in 0..wg {
            out.push(taps.iter().map(|&(p, wt)| wt * tmp[p * wg + ox]).sum::<f64>() as f32);
        }
    }
    Grid2::new(hg, wg, out)
}

fn covered(o: usize, n: usize, m: usize) -> std::ops::Range<usize> {
    (o * n / m)..((o + 1) * n).div_ceil(m).min(n)
}

/// Max (logical OR) resample of a binary mask to `th × tw`: an output cell is
/// 1 when any source pixel it overlaps is 1.
pub fn downsample_mask(mask: &Grid2<u8>, th: usize, tw: usize) -> Result<Grid2<u8>> {
    if th == 0 || tw == 0 || th > mask.h || tw > mask.w {
        return shape_err(format!("cannot downsample {}x{} mask to {th}x{tw}", mask.h, mask.w));
    }
    let mut out = Grid2::filled(th, tw, 0u8);
    for oy in 0..th {
        let rows = covered(oy, mask.h, th);
        for ox in 0..tw {
            let cols = covered(ox, mask.w, tw);
            let hit = rows.clone().any(|y| cols.clone().any(|x| mask.get(y, x) != 0));
            out.set(oy, ox, hit as u8);
        }
    }
    Ok(out)
}

/// `n_scales` masks, each a 2×2 OR-pooling of the previous. Odd extents are
/// zero-padded before pooling.
pub fn gt_pyramid(mask: &Grid2<u8>, n_scales: usize) -> Vec<Grid2<u8>> {
    let mut out: Vec<Grid2<u8>> = Vec::with_capacity(n_scales);
    if n_scales == 0 {
        return out;
    }
    out.push(mask.clone());
    for _ in 1..n_scales {
        let prev = out.last().expect("non-empty");
        let (h, w) = (prev.h.div_ceil(2), prev.w.div_ceil(2));
        let mut next = Grid2::filled(h, w, 0u8);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                for sy in 2 * y..(2 * y + 2).min(prev.h) {
                    for sx in 2 * x..(2 * x + 2).min(prev.w) {
                        any |= prev.get(sy, sx) != 0;
                    }
                }
                next.set(y, x, any as u8);
            }
        }
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resize_area_enlarges_constant_and_blocks() {
        let c = Grid2::filled(3, 5, 2.5f32);
        let up = resize_area(&c, 7, 11).unwrap();
        assert!(up.data.iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let g = Grid2::new(1, 2, vec![1.0f32, 3.0]).unwrap();
        let up = resize_area(&g, 1, 4).unwrap();
        assert_eq!(up.data, vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn constant_slice_stays_constant() {
        let g = Grid2::filled(37, 53, 3.25f32);
        let d = downsample_slice(&g, 11, 32).unwrap();
        assert!(d.data.iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn checkerboard_averages_to_half() {
        let g = Grid2::new(2, 2, vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample_slice(&g, 1, 1).unwrap().data, vec![0.5]);
    }

    #[test]
    fn integer_ratio_matches_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid2::new(8, 8, (0..64).map(|_| rng.random::<f32>()).collect()).unwrap();
        let d = downsample_slice(&g, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mean = (g.get(2 * y, 2 * x)
                    + g.get(2 * y, 2 * x + 1)
                    + g.get(2 * y + 1, 2 * x)
                    + g.get(2 * y + 1, 2 * x + 1))
                    / 4.0;
                assert!((d.get(y, x) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_upsampling() {
        assert!(downsample_slice(&Grid2::filled(4, 4, 0.0), 5, 4).is_err());
        assert!(downsample_mask(&Grid2::filled(4, 4, 0), 4, 8).is_err());
    }

    #[test]
    fn pyramid_preserves_single_pixel() {
        let mut m = Grid2::filled(16, 16, 0u8);
        m.set(13, 5, 1);
        let p = gt_pyramid(&m, 4);
        assert_eq!(p.len(), 4);
        for g in &p {
            assert_eq!(g.data.iter().filter(|&&v| v == 1).count(), 1);
        }
        assert_eq!((p[3].h, p[3].w), (2, 2));
        assert!(gt_pyramid(&Grid2::filled(8, 8, 0u8), 3).iter().all(|g| g.data.iter().all(|&v| v == 0)));
    }

    #[test]
    fn pyramid_matches_window_or_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let m = Grid2::new(h, w, (0..h * w).map(|_| (rng.random::<f32>() < 0.1) as u8).collect()).unwrap();
            let p = gt_pyramid(&m, 4);
            for (s, g) in p.iter().enumerate() {
                let f = 1 << s;
                for y in 0..g.h {
                    for x in 0..g.w {
                        let mut any = 0u8;
                        for sy in y * f..((y + 1) * f).min(h) {
                            for sx in x * f..((x + 1) * f).min(w) {
                                any |= m.get(sy, sx);
                            }
                        }
                        assert_eq!(g.get(y, x), any);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_downsample_is_block_or_for_integer_ratio() {
        let mut m = Grid2::filled(8, 8, 0u8);
        m.set(5, 2, 1);
        let d = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(d.data, vec![0, 0, 1, 0]);
        // Non-integer ratio: every covering cell lights up.
        let d = downsample_mask(&m, 3, 3).unwrap();
        assert!(d.data.iter().filter(|&&v| v == 1).count() >= 1);
        assert_eq!(d.get(0, 0), 0);
    }
}
