//! Patch extraction, Tukey windows and weight-normalized overlap-add.

use swe_autograd::Tensor;

use crate::error::{Error, Result};
use crate::forge::RegionLayout;

/// Output footprint of a patch: `(⌈ap/3⌉, ⌈lp/2⌉ − 1)`.
pub fn output_size(ap: usize, lp: usize) -> (usize, usize) {
    (ap.div_ceil(3), lp.div_ceil(2).saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub ap: usize,
    pub lp: usize,
    pub out_a: usize,
    pub out_l: usize,
    pub stride_a: usize,
    pub stride_l: usize,
    /// Top-left input coordinates, in the (padded) volume the grid was built for.
    pub anchors: Vec<(usize, usize)>,
    /// (top, bottom, left, right) edge padding the anchors assume.
    pub padding: (usize, usize, usize, usize),
}

fn steps(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > len {
        return Vec::new();
    }
    let mut v: Vec<usize> = (0..=len - window).step_by(stride.max(1)).collect();
    if *v.last().unwrap() != len - window {
        v.push(len - window);
    }
    v
}

impl PatchGrid {
    /// Offset of the output footprint inside the input patch (centered).
    pub fn footprint_offset(&self) -> (usize, usize) {
        ((self.ap - self.out_a) / 2, (self.lp - self.out_l) / 2)
    }

    /// Anchors stepping through an unpadded region; a final anchor is clamped to the far edge.
    pub fn strided(region: (usize, usize), ap: usize, lp: usize, stride: (usize, usize)) -> Self {
        let (out_a, out_l) = output_size(ap, lp);
        let rows = steps(region.0, ap, stride.0);
        let cols = steps(region.1, lp, stride.1);
        let anchors = rows.iter().flat_map(|&a| cols.iter().map(move |&l| (a, l))).collect();
        Self { ap, lp, out_a, out_l, stride_a: stride.0, stride_l: stride.1, anchors, padding: (0, 0, 0, 0) }
    }

    pub fn with_anchors(ap: usize, lp: usize, anchors: Vec<(usize, usize)>) -> Self {
        let (out_a, out_l) = output_size(ap, lp);
        Self { ap, lp, out_a, out_l, stride_a: 0, stride_l: 0, anchors, padding: (0, 0, 0, 0) }
    }

    /// Grid whose output footprints tile the whole region with ≥50% overlap.
    ///
    /// The region is edge-padded so that footprints at the border stay centered
    /// in their input patch; anchors then coincide with footprint origins in
    /// region coordinates.
    pub fn tiling(region: (usize, usize), ap: usize, lp: usize) -> Self {
        let (out_a, out_l) = output_size(ap, lp);
        let (sa, sl) = ((out_a / 2).max(1), (out_l / 2).max(1));
        let (oa, ol) = ((ap - out_a) / 2, (lp - out_l) / 2);
        let padding = (oa, ap - out_a - oa, ol, lp - out_l - ol);
        let rows = steps(region.0, out_a, sa);
        let cols = steps(region.1, out_l, sl);
        let anchors = rows.iter().flat_map(|&a| cols.iter().map(move |&l| (a, l))).collect();
        Self { ap, lp, out_a, out_l, stride_a: sa, stride_l: sl, anchors, padding }
    }

    /// Where each anchor's output lands in region coordinates.
    pub fn output_anchors(&self) -> Vec<(usize, usize)> {
        let (oa, ol) = self.footprint_offset();
        let (top, _, left, _) = self.padding;
        self.anchors.iter().map(|&(a, l)| (a + oa - top, l + ol - left)).collect()
    }
}

/// Edge-replicating pad of the two trailing axes of a (T, A, L) volume.
pub fn pad_edges(vol: &Tensor<f32>, padding: (usize, usize, usize, usize)) -> Tensor<f32> {
    let (top, bottom, left, right) = padding;
    if padding == (0, 0, 0, 0) {
        return vol.clone();
    }
    let s = vol.shape();
    let (t, a, l) = (s[0], s[1], s[2]);
    let (pa, pl) = (a + top + bottom, l + left + right);
    let src = vol.data();
    let mut out = Vec::with_capacity(t * pa * pl);
    for ti in 0..t {
        for i in 0..pa {
            let si = i.saturating_sub(top).min(a - 1);
            for j in 0..pl {
                let sj = j.saturating_sub(left).min(l - 1);
                out.push(src[(ti * a + si) * l + sj]);
            }
        }
    }
    Tensor::new(&[t, pa, pl], out)
}

/// Copies the T×ap×lp sub-volume at every anchor.
pub fn extract_patches(vol: &Tensor<f32>, grid: &PatchGrid) -> Result<Vec<((usize, usize), Tensor<f32>)>> {
    let s = vol.shape();
    let (t, rows, cols) = (s[0], s[1], s[2]);
    grid.anchors
        .iter()
        .map(|&(a, l)| {
            if a + grid.ap > rows || l + grid.lp > cols {
                return Err(Error::AnchorOutOfBounds { a, l, ap: grid.ap, lp: grid.lp, rows, cols });
            }
            let mut data = Vec::with_capacity(t * grid.ap * grid.lp);
            for ti in 0..t {
                for i in a..a + grid.ap {
                    let base = (ti * rows + i) * cols;
                    data.extend_from_slice(&vol.data()[base + l..base + l + grid.lp]);
                }
            }
            Ok(((a, l), Tensor::new(&[t, grid.ap, grid.lp], data)))
        })
        .collect()
}

/// 1D Tukey window sampled at cell centers, so no sample is exactly zero.
pub fn tukey1d(n: usize, alpha: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) / n as f64;
            let edge = x.min(1.0 - x);
            if alpha <= 0.0 || edge >= alpha / 2.0 {
                1.0
            } else {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * edge / alpha).cos())
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window2D {
    /// Shape (h, w), values in (0, 1].
    pub weights: Tensor<f32>,
    pub alpha: f64,
}

/// Separable product of two 1D Tukey windows.
pub fn tukey2d(h: usize, w: usize, alpha: f64) -> Result<Window2D> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("Tukey alpha {alpha} outside [0, 1]")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config("window needs at least one pixel per axis".into()));
    }
    let (ra, rl) = (tukey1d(h, alpha), tukey1d(w, alpha));
    let data = ra.iter().flat_map(|&u| rl.iter().map(move |&v| (u * v) as f32)).collect();
    Ok(Window2D { weights: Tensor::new(&[h, w], data), alpha })
}

/// Window tapered along the lateral axis only.
pub fn lateral_window(h: usize, w: usize, alpha: f64) -> Result<Window2D> {
    let mut win = tukey2d(1, w, alpha)?;
    let row = win.weights.data().to_vec();
    win.weights = Tensor::new(&[h, w], (0..h).flat_map(|_| row.iter().copied()).collect());
    Ok(win)
}

/// `Σ wᵢ·predᵢ / Σ wᵢ` over footprints placed at `(row, col)` anchors.
pub fn overlap_add(
    predictions: &[((usize, usize), Tensor<f32>)],
    region: (usize, usize),
    window: &Window2D,
) -> Result<Tensor<f32>> {
    let (rows, cols) = region;
    let (wh, ww) = (window.weights.dim(0), window.weights.dim(1));
    let w = window.weights.data();
    let mut acc = vec![0.0f64; rows * cols];
    let mut norm = vec![0.0f64; rows * cols];
    for ((a, l), pred) in predictions {
        if pred.shape() != [wh, ww] {
            return Err(Error::Shape { expected: vec![wh, ww], got: pred.shape().to_vec() });
        }
        if a + wh > rows || l + ww > cols {
            return Err(Error::AnchorOutOfBounds { a: *a, l: *l, ap: wh, lp: ww, rows, cols });
        }
        for i in 0..wh {
            for j in 0..ww {
                let k = (a + i) * cols + l + j;
                let wt = w[i * ww + j] as f64;
                acc[k] += wt * pred.data()[i * ww + j] as f64;
                norm[k] += wt;
            }
        }
    }
    let holes: Vec<usize> = (0..rows * cols).filter(|&k| norm[k] <= 0.0).collect();
    if let Some(&first) = holes.first() {
        return Err(Error::CoverageHole { count: holes.len(), first: (first / cols, first % cols) });
    }
    Ok(Tensor::new(&[rows, cols], acc.iter().zip(&norm).map(|(s, n)| (s / n) as f32).collect()))
}

/// Lateral windowed merge of per-region maps into the full ROI.
pub fn merge_regions(maps: &[Tensor<f32>], layout: &RegionLayout, window: &Window2D) -> Result<Tensor<f32>> {
    if maps.len() != layout.r_regions {
        return Err(Error::Config(format!("expected {} region maps, got {}", layout.r_regions, maps.len())));
    }
    let placed: Vec<_> = maps.iter().zip(&layout.lateral_offsets_px).map(|(m, &o)| ((0, o), m.clone())).collect();
    overlap_add(&placed, (layout.region_axial_px, layout.full_lateral_px), window)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_footprint() {
        assert_eq!(output_size(63, 10), (21, 4));
        assert_eq!(output_size(27, 10), (9, 4));
    }

    #[test]
    fn strided_grid_on_a_paper_region() {
        let g = PatchGrid::strided((168, 16), 63, 10, (21, 2));
        assert_eq!(g.anchors.len(), 24);
        let vol = Tensor::zeros(&[2, 168, 16]);
        assert_eq!(extract_patches(&vol, &g).unwrap().len(), 24);
    }

    #[test]
    fn single_patch_equals_region() {
        let vol = Tensor::new(&[2, 63, 10], (0..2 * 630).map(|v| v as f32).collect());
        let g = PatchGrid::with_anchors(63, 10, vec![(0, 0)]);
        let p = extract_patches(&vol, &g).unwrap();
        assert_eq!(p[0].1, vol);
        let g = PatchGrid::with_anchors(63, 10, vec![(150, 0)]);
        assert!(matches!(extract_patches(&Tensor::zeros(&[1, 168, 16]), &g), Err(Error::AnchorOutOfBounds { .. })));
    }

    #[test]
    fn tiling_covers_every_pixel() {
        for (region, ap, lp) in [((168, 16), 63, 10), ((64, 16), 27, 10), ((10, 7), 9, 6)] {
            let g = PatchGrid::tiling(region, ap, lp);
            let padded = pad_edges(&Tensor::zeros(&[1, region.0, region.1]), g.padding);
            assert!(extract_patches(&padded, &g).is_ok());
            let win = tukey2d(g.out_a, g.out_l, 0.5).unwrap();
            let preds: Vec<_> = g.output_anchors().into_iter().map(|a| (a, Tensor::full(&[g.out_a, g.out_l], 1.0))).collect();
            assert!(overlap_add(&preds, region, &win).is_ok());
        }
    }

    #[test]
    fn tukey_limits() {
        assert!(tukey1d(7, 0.0).iter().all(|&v| v == 1.0));
        let hann = tukey1d(9, 1.0);
        assert_eq!(hann[4], 1.0);
        for (i, v) in hann.iter().enumerate() {
            let x = (i as f64 + 0.5) / 9.0;
            assert!((v - 0.5 * (1.0 - (2.0 * std::f64::consts::PI * x).cos())).abs() < 1e-12);
        }
        let w = tukey1d(4, 0.5);
        assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 2);
        assert!(tukey2d(3, 3, 1.5).is_err());
    }

    #[test]
    fn uncovered_pixels_are_reported() {
        let win = tukey2d(2, 2, 0.5).unwrap();
        let preds = vec![((0, 0), Tensor::full(&[2, 2], 1.0))];
        assert!(matches!(overlap_add(&preds, (3, 3), &win), Err(Error::CoverageHole { count: 5, .. })));
    }
}
