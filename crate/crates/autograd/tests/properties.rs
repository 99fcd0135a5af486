use proptest::prelude::*;
use swe_autograd::ops::{avg_pool2d, conv2d, dft2_magnitude, max_pool3d, softmax_last, upsample_nearest2d};
use swe_autograd::{Tensor, Var};

fn fd_check(shape: &[usize], data: Vec<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) -> f64 {
    let x = Var::input(Tensor::new(shape, data.clone()));
    let g = f(&x).backward();
    let analytic = g.wrt(&x).cloned().unwrap_or_else(|| Tensor::zeros(shape));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        let eval = |d: f64| {
            let mut v = data.clone();
            v[i] += d;
            f(&Var::constant(Tensor::new(shape, v))).value().item()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-3));
    }
    worst
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_composition_matches_finite_differences(v in values(12)) {
        let err = fd_check(&[3, 4], v, |x| x.tanh().mul(&x.sigmoid()).add(&x.square().scale(0.3)).sum());
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_rows_are_distributions(v in values(15)) {
        let s = softmax_last(&Var::constant(Tensor::new(&[3, 5], v)));
        for row in s.value().data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn conv2d_gradient(v in values(2 * 5 * 4), w in values(3 * 2 * 9)) {
        let wt = Var::constant(Tensor::new(&[3, 2, 3, 3], w));
        let err = fd_check(&[1, 2, 5, 4], v, |x| conv2d(x, &wt, None, [1, 1]).square().sum());
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn dft_magnitude_is_shift_invariant(v in values(6 * 5), da in 0usize..6, dl in 0usize..5) {
        let x = Tensor::new(&[1, 1, 6, 5], v.clone());
        let shifted: Vec<f64> = (0..30).map(|k| {
            let (i, j) = (k / 5, k % 5);
            v[((i + 6 - da) % 6) * 5 + (j + 5 - dl) % 5]
        }).collect();
        let a = dft2_magnitude(&Var::constant(x));
        let b = dft2_magnitude(&Var::constant(Tensor::new(&[1, 1, 6, 5], shifted)));
        for (p, q) in a.value().data().iter().zip(b.value().data()) {
            prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn pad_then_crop_is_identity(v in values(2 * 3 * 4), t in 0usize..3, b in 0usize..3, l in 0usize..3, r in 0usize..3) {
        let x = Var::constant(Tensor::new(&[1, 2, 3, 4], v));
        let y = x.pad2d(t, b, l, r).crop2d(t, 3, l, 4);
        prop_assert_eq!(y.value(), x.value());
    }

    #[test]
    fn average_pool_of_upsampled_map_restores_it(v in values(3 * 2)) {
        let x = Var::constant(Tensor::new(&[1, 1, 3, 2], v));
        let back = avg_pool2d(&upsample_nearest2d(&x, 6, 4), [2, 2], [2, 2]);
        for (p, q) in back.value().data().iter().zip(x.value().data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_dominates_every_input(v in values(2 * 4 * 4)) {
        let x = Var::constant(Tensor::new(&[1, 1, 2, 4, 4], v.clone()));
        let y = max_pool3d(&x, [2, 2, 2], [false; 3]);
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(y.value().data().iter().any(|&p| p == m));
    }
}
