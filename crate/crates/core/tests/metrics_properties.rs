use proptest::prelude::*;
use swe_autograd::Tensor;
use swe_core::metrics::*;

fn mask_strategy(rows: usize, cols: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), rows * cols).prop_map(move |data| BinaryMask { rows, cols, data })
}

fn square(rows: usize, cols: usize, top: usize, left: usize, size: usize) -> BinaryMask {
    BinaryMask::from_fn(rows, cols, |r, c| r >= top && r < top + size && c >= left && c < left + size)
}

#[test]
fn psnr_of_quarter_mse() {
    let gt = Tensor::full(&[2, 2], 1.0);
    let est = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 0.0]);
    assert!((psnr(&gt, &est).unwrap() - 6.0206).abs() < 1e-4);
    assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
}

#[test]
fn shifted_squares() {
    let a = square(9, 9, 3, 2, 3);
    let b = square(9, 9, 3, 3, 3);
    let (hd, assd) = hd_assd(&a, &b, (1.0, 1.0)).unwrap();
    assert!((hd - 1.0).abs() < 1e-12);
    assert!(assd > 0.0 && assd <= hd);
    let o = iou_f1(&a, &b);
    assert!((o.iou - 6.0 / 12.0).abs() < 1e-12);
    assert!((o.f1 - 12.0 / 18.0).abs() < 1e-12);
}

#[test]
fn counting_example() {
    let p = BinaryMask { rows: 1, cols: 3, data: vec![true, true, false] };
    let g = BinaryMask { rows: 1, cols: 3, data: vec![false, true, true] };
    let o = iou_f1(&p, &g);
    assert!((o.iou - 1.0 / 3.0).abs() < 1e-12 && (o.f1 - 0.5).abs() < 1e-12);
    let empty = BinaryMask { rows: 1, cols: 3, data: vec![false; 3] };
    assert!(iou_f1(&empty, &empty).degenerate);
    assert!(hd_assd(&empty, &g, (1.0, 1.0)).is_err());
}

#[test]
fn region_mae_sees_a_foreground_bias() {
    let gt = Tensor::new(&[2, 2], vec![40.0, 20.0, 20.0, 20.0]);
    let y = Tensor::new(&[2, 2], vec![42.0, 20.0, 20.0, 20.0]);
    let m = BinaryMask::threshold(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]), MASK_THRESHOLD);
    assert_eq!(region_mae(&y, &gt, &m).unwrap(), (2.0, 0.0));
}

#[test]
fn summary_of_three() {
    let s = summarize(&[1.0, 2.0, 6.0]);
    assert_eq!((s.mean, s.median), (3.0, 2.0));
    assert!((s.std - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_never_exceeds_f1(a in mask_strategy(6, 7), b in mask_strategy(6, 7)) {
        let o = iou_f1(&a, &b);
        prop_assert!(o.iou <= o.f1 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&o.iou));
    }

    #[test]
    fn hausdorff_bounds_the_average(a in mask_strategy(6, 7), b in mask_strategy(6, 7), sz in 0.2f64..2.0) {
        prop_assume!(a.count() > 0 && b.count() > 0);
        let (hd, assd) = hd_assd(&a, &b, (sz, 1.0)).unwrap();
        prop_assert!(hd >= assd && assd >= 0.0);
        let (hd2, assd2) = hd_assd(&b, &a, (sz, 1.0)).unwrap();
        prop_assert!((hd - hd2).abs() < 1e-12 && (assd - assd2).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(v in prop::collection::vec(0.0f32..50.0, 20), w in prop::collection::vec(0.0f32..50.0, 20)) {
        let (a, b) = (Tensor::new(&[4, 5], v), Tensor::new(&[4, 5], w));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_falls_as_noise_grows(pattern in prop::collection::vec(-1.0f32..1.0, 30), s1 in 0.01f32..0.3, k in 1.1f32..4.0) {
        prop_assume!(pattern.iter().any(|&p| p != 0.0));
        let gt = Tensor::full(&[5, 6], 10.0);
        let est = |s: f32| Tensor::new(&[5, 6], pattern.iter().map(|p| 10.0 + s * p).collect());
        let (a, b) = (psnr(&gt, &est(s1)).unwrap(), psnr(&gt, &est(s1 * k)).unwrap());
        prop_assert!(b < a, "{} !< {}", b, a);
    }

    #[test]
    fn cnr_is_scale_free(scale in 0.1f32..10.0, noise in prop::collection::vec(-1.0f32..1.0, 16)) {
        prop_assume!(noise.iter().any(|&v| v != noise[0]));
        let m = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let y = Tensor::new(&[4, 4], (0..16).map(|k| if k % 4 < 2 && k / 4 < 2 { 40.0 } else { 20.0 + noise[k] }).collect());
        let a = cnr(&y, &m).unwrap();
        let b = cnr(&y.map(|v| v * scale), &m).unwrap();
        prop_assert!((a - b).abs() < 1e-3);
    }
}
