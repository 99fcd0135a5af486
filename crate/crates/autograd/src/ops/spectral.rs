use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Float, Tensor, Var};

/// In-place forward 2D DFT of each `h×w` plane (row transforms, then column transforms).
fn fft2_planes<T: Float>(buf: &mut [Complex<T>], h: usize, w: usize) {
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft_forward(w);
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for plane in buf.chunks_mut(h * w) {
        row.process(plane);
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Magnitude spectrum |DFT2| of every plane of a plain tensor `(…, H, W)`.
pub fn dft2_magnitude_tensor<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut buf: Vec<Complex<T>> = x.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_planes(&mut buf, h, w);
    Tensor::new(s, buf.iter().map(|c| c.norm()).collect())
}

/// Differentiable magnitude spectrum `|Σ y[a,l]·exp(-2πi(ua/H + vl/W))|` per plane.
///
/// The subgradient at spectral zeros is taken as zero.
pub fn dft2_magnitude<T: Float>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    assert!(s.len() >= 2, "dft2 needs two spatial axes");
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut spec: Vec<Complex<T>> = x.value().data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_planes(&mut spec, h, w);
    let out = Tensor::new(&s, spec.iter().map(|c| c.norm()).collect());
    Var::from_op(out, vec![x.clone()], move |c| {
        let tiny = T::epsilon() * T::lit(16.0);
        let mut buf: Vec<Complex<T>> = spec
            .iter()
            .zip(c.out.data())
            .zip(c.grad.data())
            .map(|((f, &mag), &g)| if mag > tiny { f.conj() * (g / mag) } else { Complex::new(T::zero(), T::zero()) })
            .collect();
        fft2_planes(&mut buf, h, w);
        vec![Some(Tensor::new(c.input(0).shape(), buf.iter().map(|v| v.re).collect()))]
    })
}
