use proptest::prelude::*;
use swe_autograd::{Tensor, Var};
use swe_core::losses::*;

const SHAPE: [usize; 2] = [4, 6];

fn var(v: &[f64]) -> Var<f64> {
    Var::constant(Tensor::new(&SHAPE, v.to_vec()))
}

/// Worst relative error between the tape gradient and central differences.
fn grad_error(x0: &[f64], f: impl Fn(&Var<f64>) -> Var<f64>) -> f64 {
    let x = Var::input(Tensor::new(&SHAPE, x0.to_vec()));
    let g = f(&x).backward();
    let analytic = g.wrt(&x).cloned().unwrap_or_else(|| Tensor::zeros(&SHAPE));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let at = |d: f64| {
            let mut v = x0.to_vec();
            v[i] += d;
            f(&var(&v)).value().item()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    worst
}

/// Values bounded away from each other so no L1 term sits on its kink.
fn untied(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..400).prop_map(|k| 0.05 + k as f64 * 0.005), n)
}

fn mask() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<bool>(), 24).prop_map(|b| b.into_iter().map(|x| x as u8 as f64).collect())
}

#[test]
fn hand_computed_cases() {
    let t = tv_loss(&Var::constant(Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 1.0]))).unwrap();
    assert_eq!(t.total.value().item(), 2.0);
    let g = var(&[1.0; 24]);
    assert!(iou_loss(&g, &g).unwrap().value().item().abs() < 1e-6);
    let p = var(&(0..24).map(|i| (i < 12) as u8 as f64).collect::<Vec<_>>());
    let q = var(&(0..24).map(|i| (i >= 12) as u8 as f64).collect::<Vec<_>>());
    assert!((iou_loss(&p, &q).unwrap().value().item() - 1.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_term_matches_finite_differences(y in untied(24), gt in untied(24), m in mask(), other in untied(24)) {
        let gtv = var(&gt);
        let mv = var(&m);
        let o = var(&other);
        let checks: Vec<(&str, Box<dyn Fn(&Var<f64>) -> Var<f64>>)> = vec![
            ("mae", Box::new(|x| recon_mae(x, &gtv).unwrap())),
            ("l_fg", Box::new(|x| denoise_loss(x, &o, &gtv, &mv, 2.0, 1.0).unwrap().l_fg)),
            ("l_bg", Box::new(|x| denoise_loss(&o, x, &gtv, &mv, 2.0, 1.0).unwrap().l_bg)),
            ("ncc", Box::new(|x| ncc(x, &gtv).unwrap())),
            ("fusion", Box::new(|x| fusion_loss(x, &gtv, 1.5, 50.0).unwrap().total)),
            ("tv", Box::new(|x| tv_loss(x).unwrap().total)),
            ("iou", Box::new(|x| iou_loss(&x.sigmoid(), &mv).unwrap())),
        ];
        for (name, f) in checks {
            let e = grad_error(&y, f);
            prop_assert!(e < 1e-5, "{}: relative error {}", name, e);
        }
    }

    #[test]
    fn ncc_ignores_positive_scale(gt in untied(24), k in 0.1f64..10.0) {
        let g = var(&gt);
        let scaled = var(&gt.iter().map(|v| v * k).collect::<Vec<_>>());
        let f = fusion_loss(&scaled, &g, 1.0, 50.0).unwrap();
        prop_assert!(f.ncc.value().item().abs() < 1e-6);
    }

    #[test]
    fn tv_ignores_constant_offsets(y in untied(24), c in -3.0f64..3.0) {
        let a = tv_loss(&var(&y)).unwrap().total.value().item();
        let b = tv_loss(&var(&y.iter().map(|v| v + c).collect::<Vec<_>>())).unwrap().total.value().item();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn all_terms_are_nonnegative(y in untied(24), gt in untied(24), m in mask(), p in prop::collection::vec(0.0f64..1.0, 24)) {
        let (yv, gv, mv) = (var(&y), var(&gt), var(&m));
        let w = LossWeights::from_ratio(3.0, 0.5, "test").unwrap();
        let out = DenoiseOutputsRef { y: &yv, m: &var(&p), y_fg: &yv, y_bg: &yv };
        let (total, b) = compound_loss(out, &gv, &mv, &w).unwrap();
        prop_assert!(total.value().item() >= 0.0);
        for v in [b.l_fg, b.l_bg, b.denoise, b.fuse_mae, b.fuse_ncc, b.fuse, b.tv, b.iou] {
            prop_assert!(v >= -1e-12, "{:?}", b);
        }
    }

    #[test]
    fn losses_are_batch_means(a in untied(24), b in untied(24), gt in untied(24)) {
        let g1 = Tensor::new(&[1, 4, 6], gt.clone());
        let both = |x: &[f64], y: &[f64]| {
            let mut v = x.to_vec();
            v.extend_from_slice(y);
            Var::constant(Tensor::new(&[2, 4, 6], v))
        };
        let g2 = both(&gt, &gt);
        let single = |x: &[f64]| ncc(&Var::constant(Tensor::new(&[1, 4, 6], x.to_vec())), &Var::constant(g1.clone())).unwrap().value().item();
        let pair = ncc(&both(&a, &b), &g2).unwrap().value().item();
        prop_assert!((pair - 0.5 * (single(&a) + single(&b))).abs() < 1e-12);
    }
}
