//! Supervision terms for both stages, built from differentiable ops.

use serde::{Deserialize, Serialize};
use swe_autograd::{Float, Tensor, Var};

use crate::error::{Error, Result};

/// Stabilizer in the NCC and IoU denominators.
pub const EPS: f64 = 1e-8;

fn check_same<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    Ok(())
}

/// Views a stack of maps `(…, A, L)` as `(N, A, L)`.
fn as_stack<T: Float>(x: &Var<T>) -> (Var<T>, usize, usize, usize) {
    let s = x.shape();
    assert!(s.len() >= 2, "loss inputs need two spatial axes, got {s:?}");
    let (a, l) = (s[s.len() - 2], s[s.len() - 1]);
    let n = x.value().len() / (a * l);
    (x.reshape(&[n, a, l]), n, a, l)
}

fn is_binary<T: Float>(m: &Var<T>) -> bool {
    m.value().data().iter().all(|&v| v == T::zero() || v == T::one())
}

/// `(1/(A·L))·‖y_gt − y_pred‖₁`, averaged over a batch.
pub fn recon_mae<T: Float>(pred: &Var<T>, gt: &Var<T>) -> Result<Var<T>> {
    check_same(pred, gt)?;
    Ok(gt.sub(pred).abs().mean())
}

/// Regional denoising terms. Component values are batch means of per-image L1 sums.
#[derive(Clone, Debug)]
pub struct DenoiseTerms<T: Float> {
    pub total: Var<T>,
    pub l_fg: Var<T>,
    pub l_bg: Var<T>,
    pub fg1: f64,
    pub fg2: f64,
    pub bg1: f64,
    pub bg2: f64,
}

pub fn denoise_loss<T: Float>(
    y_fg: &Var<T>,
    y_bg: &Var<T>,
    y_gt: &Var<T>,
    m_gt: &Var<T>,
    alpha1: f64,
    alpha2: f64,
) -> Result<DenoiseTerms<T>> {
    for v in [y_bg, y_gt, m_gt] {
        check_same(y_fg, v)?;
    }
    if !is_binary(m_gt) {
        return Err(Error::NonBinaryMask);
    }
    let (_, n, a, l) = as_stack(y_fg);
    let per_image = T::one() / T::lit(n as f64);
    let area = T::one() / T::lit((a * l) as f64);
    let bg_mask = m_gt.rsub_scalar(T::one());
    let fg1 = y_fg.sub(y_gt).mul(m_gt).abs().sum().scale(per_image);
    let fg2 = y_fg.mul(&bg_mask).abs().sum().scale(per_image);
    let bg1 = y_bg.sub(y_gt).mul(&bg_mask).abs().sum().scale(per_image);
    let bg2 = y_bg.mul(m_gt).abs().sum().scale(per_image);
    let l_fg = fg1.add(&fg2).scale(area);
    let l_bg = bg1.add(&bg2).scale(area);
    let total = l_fg.scale(T::lit(alpha1)).add(&l_bg.scale(T::lit(alpha2)));
    let val = |v: &Var<T>| v.value().item().as_f64();
    Ok(DenoiseTerms { fg1: val(&fg1), fg2: val(&fg2), bg1: val(&bg1), bg2: val(&bg2), total, l_fg, l_bg })
}

/// Per-image normalized cross-correlation, batch mean.
pub fn ncc<T: Float>(y: &Var<T>, gt: &Var<T>) -> Result<Var<T>> {
    check_same(y, gt)?;
    let (ys, n, _, _) = as_stack(y);
    let (gs, _, _, _) = as_stack(gt);
    let mut acc: Option<Var<T>> = None;
    for i in 0..n {
        let (yi, gi) = (ys.narrow(0, i, 1), gs.narrow(0, i, 1));
        let num = gi.mul(&yi).sum();
        let den = gi.square().sum().mul(&yi.square().sum()).sqrt().add_scalar(T::lit(EPS));
        let s = num.div(&den);
        acc = Some(match acc {
            Some(a) => a.add(&s),
            None => s,
        });
    }
    Ok(acc.expect("at least one image").scale(T::one() / T::lit(n as f64)))
}

pub struct FusionTerms<T: Float> {
    pub total: Var<T>,
    pub mae: Var<T>,
    /// `1 − S_NCC`.
    pub ncc: Var<T>,
}

/// `β₁·MAE + β₂·(1 − S_NCC)`.
pub fn fusion_loss<T: Float>(y: &Var<T>, gt: &Var<T>, beta1: f64, beta2: f64) -> Result<FusionTerms<T>> {
    let mae = recon_mae(y, gt)?;
    let ncc_term = ncc(y, gt)?.rsub_scalar(T::one());
    let total = mae.scale(T::lit(beta1)).add(&ncc_term.scale(T::lit(beta2)));
    Ok(FusionTerms { total, mae, ncc: ncc_term })
}

pub struct TvTerms<T: Float> {
    pub total: Var<T>,
    pub axial: Var<T>,
    pub lateral: Var<T>,
}

/// Squared forward differences, axial sum over `(A − 1)` and lateral sum over `(L − 1)`.
pub fn tv_loss<T: Float>(y: &Var<T>) -> Result<TvTerms<T>> {
    let (ys, n, a, l) = as_stack(y);
    if a < 2 || l < 2 {
        return Err(Error::Config(format!("total variation needs at least 2×2 maps, got {a}×{l}")));
    }
    let per_image = T::one() / T::lit(n as f64);
    let axial = ys.narrow(1, 0, a - 1).sub(&ys.narrow(1, 1, a - 1)).square().sum().scale(per_image / T::lit((a - 1) as f64));
    let lateral = ys.narrow(2, 0, l - 1).sub(&ys.narrow(2, 1, l - 1)).square().sum().scale(per_image / T::lit((l - 1) as f64));
    Ok(TvTerms { total: axial.add(&lateral), axial, lateral })
}

/// Soft IoU loss `1 − Σ p·g / (Σ (p + g − p·g) + ε)`, batch mean.
pub fn iou_loss<T: Float>(m_pred: &Var<T>, m_gt: &Var<T>) -> Result<Var<T>> {
    check_same(m_pred, m_gt)?;
    let (ps, n, _, _) = as_stack(m_pred);
    let (gs, _, _, _) = as_stack(m_gt);
    let mut acc: Option<Var<T>> = None;
    for i in 0..n {
        let (p, g) = (ps.narrow(0, i, 1), gs.narrow(0, i, 1));
        let inter = p.mul(&g).sum();
        let union = p.add(&g).sub(&p.mul(&g)).sum().add_scalar(T::lit(EPS));
        let s = inter.div(&union).rsub_scalar(T::one());
        acc = Some(match acc {
            Some(a) => a.add(&s),
            None => s,
        });
    }
    Ok(acc.expect("at least one image").scale(T::one() / T::lit(n as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub mu: f64,
    pub kappa: f64,
    /// Where the α₁:α₂ ratio was measured.
    pub ratio_source: String,
}

impl LossWeights {
    /// α₂ = 1, α₁ = BG:FG ratio, β₁ = κ(α₁ + α₂), remaining coefficients at their defaults.
    pub fn from_ratio(bg_to_fg: f64, kappa: f64, ratio_source: impl Into<String>) -> Result<Self> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::Config(format!("kappa {kappa} outside (0, 1]")));
        }
        if !(bg_to_fg > 0.0 && bg_to_fg.is_finite()) {
            return Err(Error::Config(format!("BG:FG ratio {bg_to_fg} is not positive and finite")));
        }
        let (alpha1, alpha2) = (bg_to_fg, 1.0);
        Ok(Self {
            alpha1,
            alpha2,
            beta1: kappa * (alpha1 + alpha2),
            beta2: 50.0,
            gamma: 10.0,
            mu: 1.0,
            kappa,
            ratio_source: ratio_source.into(),
        })
    }

    /// Ratio of mean background to mean foreground pixel counts over binary masks.
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a Tensor<f32>>, kappa: f64, source: &str) -> Result<Self> {
        let (mut fg, mut bg) = (0.0f64, 0.0f64);
        for m in masks {
            let f = m.sum() as f64;
            fg += f;
            bg += m.len() as f64 - f;
        }
        if fg == 0.0 {
            return Err(Error::Config("no foreground pixels to derive the BG:FG ratio".into()));
        }
        Self::from_ratio(bg / fg, kappa, source)
    }
}

/// Logged values of every compound-loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    pub l_fg: f64,
    pub l_bg: f64,
    pub denoise: f64,
    pub fuse_mae: f64,
    pub fuse_ncc: f64,
    pub fuse: f64,
    pub tv: f64,
    pub iou: f64,
}

/// Network outputs entering the compound loss.
pub struct DenoiseOutputsRef<'a, T: Float> {
    pub y: &'a Var<T>,
    pub m: &'a Var<T>,
    pub y_fg: &'a Var<T>,
    pub y_bg: &'a Var<T>,
}

/// `L_DENOISE + L_FUSE + γ·L_TV(y) + μ·L_IoU(m, m_gt)`.
pub fn compound_loss<T: Float>(
    out: DenoiseOutputsRef<'_, T>,
    y_gt: &Var<T>,
    m_gt: &Var<T>,
    w: &LossWeights,
) -> Result<(Var<T>, Breakdown)> {
    let d = denoise_loss(out.y_fg, out.y_bg, y_gt, m_gt, w.alpha1, w.alpha2)?;
    let f = fusion_loss(out.y, y_gt, w.beta1, w.beta2)?;
    let tv = tv_loss(out.y)?;
    let iou = iou_loss(out.m, m_gt)?;
    let total = d.total.add(&f.total).add(&tv.total.scale(T::lit(w.gamma))).add(&iou.scale(T::lit(w.mu)));
    let v = |x: &Var<T>| x.value().item().as_f64();
    let b = Breakdown {
        total: v(&total),
        l_fg: v(&d.l_fg),
        l_bg: v(&d.l_bg),
        denoise: v(&d.total),
        fuse_mae: v(&f.mae),
        fuse_ncc: v(&f.ncc),
        fuse: v(&f.total),
        tv: v(&tv.total),
        iou: v(&iou),
    };
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(shape: &[usize], v: &[f64]) -> Var<f64> {
        Var::constant(Tensor::from_f64(shape, v))
    }

    #[test]
    fn mae_half_offset() {
        let a = c(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = c(&[2, 2], &[1.5, 2.5, 3.5, 4.5]);
        assert!((recon_mae(&b, &a).unwrap().value().item() - 0.5).abs() < 1e-15);
        assert_eq!(recon_mae(&a, &a).unwrap().value().item(), 0.0);
    }

    #[test]
    fn one_by_two_denoise_case() {
        let d = denoise_loss(
            &c(&[1, 2], &[38.0, 0.0]),
            &c(&[1, 2], &[0.0, 22.0]),
            &c(&[1, 2], &[40.0, 20.0]),
            &c(&[1, 2], &[1.0, 0.0]),
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!((d.fg1, d.fg2, d.bg1, d.bg2), (2.0, 0.0, 2.0, 0.0));
        assert_eq!(d.l_fg.value().item(), 1.0);
        assert_eq!(d.l_bg.value().item(), 1.0);
        let bad = c(&[1, 2], &[0.5, 0.0]);
        assert!(matches!(denoise_loss(&bad, &bad, &bad, &bad, 1.0, 1.0), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn tv_hand_case() {
        let t = tv_loss(&c(&[2, 2], &[0.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(t.axial.value().item(), 0.0);
        assert_eq!(t.lateral.value().item(), 2.0);
        assert_eq!(t.total.value().item(), 2.0);
    }

    #[test]
    fn iou_half_overlap() {
        let p = c(&[1, 3], &[1.0, 1.0, 0.0]);
        let g = c(&[1, 3], &[0.0, 1.0, 1.0]);
        assert!((iou_loss(&p, &g).unwrap().value().item() - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn coefficient_rule() {
        let mut m = Tensor::zeros(&[2, 2]);
        m.data_mut()[0] = 1.0;
        let w = LossWeights::from_masks([&m], 0.5, "toy").unwrap();
        assert_eq!((w.alpha1, w.alpha2, w.beta1), (3.0, 1.0, 2.0));
        assert_eq!((w.beta2, w.gamma, w.mu), (50.0, 10.0, 1.0));
    }
}
