//! Image quality, segmentation and speed-estimation metrics.

use swe_autograd::Tensor;

use crate::error::{Error, Result};
use crate::forge::MotionVolume;

/// Threshold applied to soft masks before set-based metrics.
pub const MASK_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    /// `value > threshold` per pixel of a (rows, cols) map.
    pub fn threshold(t: &Tensor<f32>, threshold: f32) -> Self {
        Self { rows: t.dim(0), cols: t.dim(1), data: t.data().iter().map(|&v| v > threshold).collect() }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self { rows, cols, data: (0..rows * cols).map(|k| f(k / cols, k % cols)).collect() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols && self.data[r as usize * self.cols + c as usize]
    }

    /// Mask pixels with at least one 4-neighbour outside the mask (or the image).
    pub fn surface(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (ri, ci) = (r as isize, c as isize);
                if self.at(ri, ci)
                    && (!self.at(ri - 1, ci) || !self.at(ri + 1, ci) || !self.at(ri, ci - 1) || !self.at(ri, ci + 1))
                {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    Ok(())
}

/// PSNR of max-normalized images; identical images give `+∞`.
pub fn psnr(gt: &Tensor<f32>, est: &Tensor<f32>) -> Result<f64> {
    same_shape(gt, est)?;
    let (mg, me) = (gt.max() as f64, est.max() as f64);
    if !(mg > 0.0 && me > 0.0) {
        return Err(Error::Metric(format!("PSNR needs positive maxima, got {mg} and {me}")));
    }
    let mse = gt.data().iter().zip(est.data()).map(|(&g, &e)| (g as f64 / mg - e as f64 / me).powi(2)).sum::<f64>()
        / gt.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Same as [`psnr`] but the MSE runs over the pixels selected by `keep`.
pub fn psnr_masked(gt: &Tensor<f32>, est: &Tensor<f32>, keep: &[bool]) -> Result<f64> {
    same_shape(gt, est)?;
    let (mg, me) = (gt.max() as f64, est.max() as f64);
    if !(mg > 0.0 && me > 0.0) {
        return Err(Error::Metric(format!("PSNR needs positive maxima, got {mg} and {me}")));
    }
    let sel: Vec<f64> = gt
        .data()
        .iter()
        .zip(est.data())
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|((&g, &e), _)| (g as f64 / mg - e as f64 / me).powi(2))
        .collect();
    if sel.is_empty() {
        return Err(Error::Metric("PSNR over an empty region".into()));
    }
    let mse = sel.iter().sum::<f64>() / sel.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn class_stats(y: &Tensor<f32>, mask: &BinaryMask, class: bool) -> Result<(f64, f64)> {
    let v: Vec<f64> = y.data().iter().zip(&mask.data).filter(|(_, &m)| m == class).map(|(&x, _)| x as f64).collect();
    if v.is_empty() {
        return Err(Error::Metric(format!("mask has no {} pixels", if class { "foreground" } else { "background" })));
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    Ok((mean, var.sqrt()))
}

/// 20·log₁₀(|μ_FG − μ_BG| / σ_BG); `+∞` for a flat background, `−∞` for zero contrast.
pub fn cnr(y: &Tensor<f32>, mask: &BinaryMask) -> Result<f64> {
    let (mf, _) = class_stats(y, mask, true)?;
    let (mb, sb) = class_stats(y, mask, false)?;
    let contrast = (mf - mb).abs();
    if contrast == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if sb == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (contrast / sb).log10())
}

/// Background standard deviation, the quantity the denoiser is meant to lower.
pub fn background_std(y: &Tensor<f32>, mask: &BinaryMask) -> Result<f64> {
    Ok(class_stats(y, mask, false)?.1)
}

/// SSIM from whole-image statistics, ε₁ = (0.01·D)², ε₂ = (0.03·D)² with D the joint value range.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len() as f64;
    let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let hi = a.max().max(b.max()) as f64;
    let lo = a.min().min(b.min()) as f64;
    let d = if hi > lo { hi - lo } else { 1.0 };
    let (e1, e2) = ((0.01 * d).powi(2), (0.03 * d).powi(2));
    Ok((2.0 * ma * mb + e1) * (2.0 * cov + e2) / ((ma * ma + mb * mb + e1) * (va + vb + e2)))
}

/// Mean absolute error over foreground and background pixels, in the units of the inputs.
pub fn region_mae(y: &Tensor<f32>, gt: &Tensor<f32>, mask: &BinaryMask) -> Result<(f64, f64)> {
    same_shape(y, gt)?;
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for ((&p, &g), &m) in y.data().iter().zip(gt.data()).zip(&mask.data) {
        sums[m as usize] += (p as f64 - g as f64).abs();
        counts[m as usize] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Metric("region MAE needs both foreground and background pixels".into()));
    }
    Ok((sums[1] / counts[1] as f64, sums[0] / counts[0] as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub f1: f64,
    /// Both masks empty; scores are reported as 1.
    pub degenerate: bool,
}

pub fn iou_f1(pred: &BinaryMask, gt: &BinaryMask) -> Overlap {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Overlap { iou: 1.0, f1: 1.0, degenerate: true };
    }
    Overlap {
        iou: tp as f64 / (tp + fp + fneg) as f64,
        f1: 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64,
        degenerate: false,
    }
}

/// Hausdorff distance and average symmetric surface distance between mask boundaries.
///
/// `spacing` is the (axial, lateral) pixel pitch.
pub fn hd_assd(pred: &BinaryMask, gt: &BinaryMask, spacing: (f64, f64)) -> Result<(f64, f64)> {
    let (sp, sg) = (pred.surface(), gt.surface());
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::Metric("surface distances need two nonempty masks".into()));
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dz = (r as f64 - r2 as f64) * spacing.0;
                        let dx = (c as f64 - c2 as f64) * spacing.1;
                        dz * dz + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    let (dp, dg) = (directed(&sp, &sg), directed(&sg, &sp));
    let hd = dp.iter().chain(&dg).copied().fold(0.0, f64::max);
    let assd = (dp.iter().sum::<f64>() + dg.iter().sum::<f64>()) / (dp.len() + dg.len()) as f64;
    Ok((hd, assd))
}

/// Sub-frame time of the displacement peak at one pixel, in frames.
pub fn peak_frame(vol: &MotionVolume, row: usize, col: usize) -> Result<f64> {
    let s = vol.data.shape();
    let (t, a, l) = (s[0], s[1], s[2]);
    let trace: Vec<f64> = (0..t).map(|ti| vol.data.data()[(ti * a + row) * l + col] as f64).collect();
    let (imax, &vmax) = trace.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).expect("nonempty trace");
    let vmin = trace.iter().copied().fold(f64::INFINITY, f64::min);
    if !(vmax > vmin) {
        return Err(Error::Metric(format!("flat signal at ({row}, {col})")));
    }
    if imax == 0 || imax + 1 == t {
        return Ok(imax as f64);
    }
    let (ym, y0, yp) = (trace[imax - 1], trace[imax], trace[imax + 1]);
    let denom = ym - 2.0 * y0 + yp;
    Ok(imax as f64 + if denom != 0.0 { 0.5 * (ym - yp) / denom } else { 0.0 })
}

/// Time-to-peak speed in m/s between lateral columns `x1 < x2` of one depth row.
pub fn ttp_speed_estimate(vol: &MotionVolume, row: usize, x1: usize, x2: usize, mm_per_px: f64, frame_ms: f64) -> Result<f64> {
    if x1 >= x2 {
        return Err(Error::Metric(format!("columns must satisfy x1 < x2, got {x1} and {x2}")));
    }
    let (t1, t2) = (peak_frame(vol, row, x1)?, peak_frame(vol, row, x2)?);
    if t2 <= t1 {
        return Err(Error::Metric(format!("non-monotone arrival: peak at frame {t2:.3} after {t1:.3}")));
    }
    Ok((x2 - x1) as f64 * mm_per_px / ((t2 - t1) * frame_ms))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    #[serde(with = "nonfinite")]
    pub mean: f64,
    #[serde(with = "nonfinite")]
    pub median: f64,
    #[serde(with = "nonfinite")]
    pub std: f64,
}

/// Serde adapter that writes ±∞ and NaN as strings so reports round-trip through JSON.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            x if x.is_finite() => s.serialize_f64(x),
            x if x.is_nan() => s.serialize_str("nan"),
            x if x > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

/// Mean, median and population standard deviation over the finite values.
pub fn summarize(values: &[f64]) -> Summary {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Summary { mean: f64::NAN, median: f64::NAN, std: f64::NAN };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Summary { mean, median, std }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: usize, cols: usize, v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(&[rows, cols], v)
    }

    #[test]
    fn psnr_closed_form() {
        let gt = map(1, 2, vec![1.0, 1.0]);
        assert_eq!(psnr(&gt, &gt).unwrap(), f64::INFINITY);
        // Normalized maps [1, 1] and [1, 0.5, …]: use a 4-pixel case with MSE 0.25.
        let gt = map(1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        let est = map(1, 4, vec![1.0, 0.0, 1.0, 1.0]);
        assert!((psnr(&gt, &est).unwrap() - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn cnr_cases() {
        let mask = BinaryMask::from_fn(1, 5, |_, c| c == 0);
        let y = map(1, 5, vec![40.0, 18.0, 22.0, 18.0, 22.0]);
        assert!((cnr(&y, &mask).unwrap() - 20.0).abs() < 1e-9);
        let flat = map(1, 5, vec![20.0; 5]);
        assert_eq!(cnr(&flat, &mask).unwrap(), f64::NEG_INFINITY);
        let clean = map(1, 5, vec![40.0, 20.0, 20.0, 20.0, 20.0]);
        assert_eq!(cnr(&clean, &mask).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_extremes() {
        let a = map(2, 2, vec![1.0, -1.0, 2.0, -2.0]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| -v);
        assert!((ssim(&a, &neg).unwrap() + 1.0).abs() < 1e-2);
    }

    #[test]
    fn region_mae_bias() {
        let gt = map(1, 4, vec![40.0, 40.0, 20.0, 20.0]);
        let mask = BinaryMask::threshold(&map(1, 4, vec![1.0, 1.0, 0.0, 0.0]), MASK_THRESHOLD);
        assert_eq!(region_mae(&gt, &gt, &mask).unwrap(), (0.0, 0.0));
        let y = map(1, 4, vec![42.0, 42.0, 20.0, 20.0]);
        assert_eq!(region_mae(&y, &gt, &mask).unwrap(), (2.0, 0.0));
    }

    #[test]
    fn overlap_counts() {
        let a = BinaryMask::from_fn(1, 3, |_, c| c < 2);
        let b = BinaryMask::from_fn(1, 3, |_, c| c > 0);
        let o = iou_f1(&a, &b);
        assert!((o.iou - 1.0 / 3.0).abs() < 1e-12 && (o.f1 - 0.5).abs() < 1e-12);
        assert_eq!(iou_f1(&a, &a).iou, 1.0);
        let c = BinaryMask::from_fn(1, 3, |_, c| c == 2);
        let d = BinaryMask::from_fn(1, 3, |_, c| c == 0);
        assert_eq!((iou_f1(&c, &d).iou, iou_f1(&c, &d).f1), (0.0, 0.0));
        let e = BinaryMask::from_fn(1, 3, |_, _| false);
        assert!(iou_f1(&e, &e).degenerate);
    }

    #[test]
    fn shifted_squares() {
        let a = BinaryMask::from_fn(7, 8, |r, c| (2..5).contains(&r) && (2..5).contains(&c));
        let b = BinaryMask::from_fn(7, 8, |r, c| (2..5).contains(&r) && (3..6).contains(&c));
        let (hd, assd) = hd_assd(&a, &b, (1.0, 1.0)).unwrap();
        assert!((hd - 1.0).abs() < 1e-12);
        assert!(assd <= hd);
        assert_eq!(hd_assd(&a, &a, (1.0, 1.0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn summary_stats() {
        let s = summarize(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
    }
}
