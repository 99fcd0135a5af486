use proptest::prelude::*;
use swe_autograd::Tensor;
use swe_core::forge::{Preset, RegionLayout};
use swe_core::patchwork::*;
use swe_core::Error;

fn constant_patches(grid: &PatchGrid, value: f32) -> Vec<((usize, usize), Tensor<f32>)> {
    grid.output_anchors().into_iter().map(|o| (o, Tensor::full(&[grid.out_a, grid.out_l], value))).collect()
}

#[test]
fn paper_geometry_tiles_a_region() {
    let g = PatchGrid::tiling((168, 16), 63, 10);
    assert_eq!((g.out_a, g.out_l), (21, 4));
    let merged = overlap_add(&constant_patches(&g, 0.37), (168, 16), &tukey2d(21, 4, 0.5).unwrap()).unwrap();
    assert!(merged.data().iter().all(|&v| (v - 0.37).abs() <= 1e-6));
    let padded = pad_edges(&Tensor::zeros(&[70, 168, 16]), g.padding);
    for (_, p) in extract_patches(&padded, &g).unwrap() {
        assert_eq!(p.shape(), &[70, 63, 10]);
    }
}

#[test]
fn missing_footprint_is_a_coverage_hole() {
    let g = PatchGrid::tiling((20, 8), 27, 10);
    let mut preds = constant_patches(&g, 1.0);
    preds.retain(|&((a, _), _)| a != 0);
    assert!(matches!(overlap_add(&preds, (20, 8), &tukey2d(9, 4, 0.5).unwrap()), Err(Error::CoverageHole { .. })));
}

#[test]
fn edge_padding_replicates_border_values() {
    let vol = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let p = pad_edges(&vol, (1, 0, 0, 2));
    assert_eq!(p.shape(), &[1, 3, 4]);
    assert_eq!(p.data(), &[1.0, 2.0, 2.0, 2.0, 1.0, 2.0, 2.0, 2.0, 3.0, 4.0, 4.0, 4.0]);
}

#[test]
fn tukey_extremes() {
    assert!(tukey1d(9, 0.0).iter().all(|&w| w == 1.0));
    let hann = tukey1d(8, 1.0);
    assert!(hann.iter().all(|&w| w > 0.0 && w < 1.0));
    for i in 0..4 {
        assert!((hann[i] - hann[7 - i]).abs() < 1e-12);
    }
    assert!(tukey2d(3, 3, 1.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn strided_constant_patches_partition_unity(
        (rows, cols) in (9usize..40, 4usize..20),
        sa in 1usize..6, sl in 1usize..4,
        alpha in 0.0f64..=1.0, c in -5.0f32..5.0,
    ) {
        let (oa, ol) = (rows.min(9), cols.min(4));
        let win = tukey2d(oa, ol, alpha).unwrap();
        let mut anchors = Vec::new();
        let mut a = 0;
        loop {
            let mut l = 0;
            loop {
                anchors.push((a.min(rows - oa), l.min(cols - ol)));
                if l >= cols - ol { break; }
                l += sl;
            }
            if a >= rows - oa { break; }
            a += sa;
        }
        let preds: Vec<_> = anchors.into_iter().map(|o| (o, Tensor::full(&[oa, ol], c))).collect();
        let merged = overlap_add(&preds, (rows, cols), &win).unwrap();
        for &v in merged.data() {
            prop_assert!((v - c).abs() <= 1e-6 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn overlap_add_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let g = PatchGrid::tiling((30, 12), 27, 10);
        let win = tukey2d(g.out_a, g.out_l, 0.5).unwrap();
        let mk = |k: u64| -> Vec<((usize, usize), Tensor<f32>)> {
            g.output_anchors().into_iter().enumerate().map(|(i, o)| {
                let data = (0..g.out_a * g.out_l).map(|j| (((seed + k) * 31 + i as u64 * 7 + j as u64 * 13) % 17) as f32 / 17.0).collect();
                (o, Tensor::new(&[g.out_a, g.out_l], data))
            }).collect()
        };
        let (p, q) = (mk(1), mk(2));
        let combo: Vec<_> = p.iter().zip(&q).map(|((o, x), (_, y))| (*o, x.zip_map(y, |u, v| a * u + b * v))).collect();
        let lhs = overlap_add(&combo, (30, 12), &win).unwrap();
        let (mp, mq) = (overlap_add(&p, (30, 12), &win).unwrap(), overlap_add(&q, (30, 12), &win).unwrap());
        for ((l, x), y) in lhs.data().iter().zip(mp.data()).zip(mq.data()) {
            prop_assert!((l - (a * x + b * y)).abs() < 1e-5);
        }
    }

    #[test]
    fn region_merge_partitions_unity(alpha in 0.0f64..=1.0, c in 0.1f32..50.0, paper in any::<bool>()) {
        let layout: RegionLayout = if paper { Preset::Paper } else { Preset::Desk }.geometry().layout;
        let maps = vec![Tensor::full(&[layout.region_axial_px, layout.region_lateral_px], c); layout.r_regions];
        let win = lateral_window(layout.region_axial_px, layout.region_lateral_px, alpha).unwrap();
        let merged = merge_regions(&maps, &layout, &win).unwrap();
        prop_assert_eq!(merged.shape(), &[layout.region_axial_px, layout.full_lateral_px]);
        for &v in merged.data() {
            prop_assert!((v - c).abs() <= 1e-6 * c.max(1.0));
        }
    }

    #[test]
    fn tiling_covers_every_region_pixel(rows in 9usize..80, cols in 4usize..24) {
        let g = PatchGrid::tiling((rows, cols), 27, 10);
        let mut hit = vec![false; rows * cols];
        for (a, l) in g.output_anchors() {
            for i in a..a + g.out_a {
                for j in l..l + g.out_l {
                    hit[i * cols + j] = true;
                }
            }
        }
        prop_assert!(hit.iter().all(|&h| h));
        let padded = pad_edges(&Tensor::zeros(&[1, rows, cols]), g.padding);
        prop_assert!(extract_patches(&padded, &g).is_ok());
    }
}
