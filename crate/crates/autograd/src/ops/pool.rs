use crate::{Float, Tensor, Var};

/// Non-overlapping 3D max pooling (`stride == kernel`) on `(B, C, D, H, W)`.
///
/// Per axis, `ceil[i]` keeps a trailing partial window (ceil-mode output size);
/// otherwise the remainder is dropped.
pub fn max_pool3d<T: Float>(x: &Var<T>, kernel: [usize; 3], ceil: [bool; 3]) -> Var<T> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 5, "max_pool3d expects 5D input, got {s:?}");
    let out_dim = |n: usize, k: usize, c: bool| if c { n.div_ceil(k) } else { n / k };
    let o = [out_dim(s[2], kernel[0], ceil[0]), out_dim(s[3], kernel[1], ceil[1]), out_dim(s[4], kernel[2], ceil[2])];
    assert!(o.iter().all(|&v| v > 0), "max_pool3d of {s:?} with kernel {kernel:?} is empty");
    let planes = s[0] * s[1];
    let in_plane = s[2] * s[3] * s[4];
    let out_plane = o[0] * o[1] * o[2];
    let xd = x.value().data();
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut arg = Vec::with_capacity(planes * out_plane);
    for p in 0..planes {
        let base = p * in_plane;
        for z in 0..o[0] {
            let zr = z * kernel[0]..((z + 1) * kernel[0]).min(s[2]);
            for y in 0..o[1] {
                let yr = y * kernel[1]..((y + 1) * kernel[1]).min(s[3]);
                for xx in 0..o[2] {
                    let xr = xx * kernel[2]..((xx + 1) * kernel[2]).min(s[4]);
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for iz in zr.clone() {
                        for iy in yr.clone() {
                            for ix in xr.clone() {
                                let i = base + (iz * s[3] + iy) * s[4] + ix;
                                if best_i == usize::MAX || xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let out = Tensor::new(&[s[0], s[1], o[0], o[1], o[2]], out);
    Var::from_op(out, vec![x.clone()], move |c| {
        let mut g = Tensor::zeros(c.input(0).shape());
        let gd = g.data_mut();
        for (&i, &go) in arg.iter().zip(c.grad.data()) {
            gd[i] += go;
        }
        vec![Some(g)]
    })
}

/// Valid-window average pooling on `(B, C, H, W)`.
pub fn avg_pool2d<T: Float>(x: &Var<T>, kernel: [usize; 2], stride: [usize; 2]) -> Var<T> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "avg_pool2d expects 4D input, got {s:?}");
    assert!(s[2] >= kernel[0] && s[3] >= kernel[1], "avg_pool2d kernel {kernel:?} exceeds {s:?}");
    let oh = (s[2] - kernel[0]) / stride[0] + 1;
    let ow = (s[3] - kernel[1]) / stride[1] + 1;
    let planes = s[0] * s[1];
    let (h, w) = (s[2], s[3]);
    let scale = T::one() / T::lit((kernel[0] * kernel[1]) as f64);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = T::zero();
                for dy in 0..kernel[0] {
                    let row = p * h * w + (y * stride[0] + dy) * w + xx * stride[1];
                    acc += xd[row..row + kernel[1]].iter().copied().sum::<T>();
                }
                out.push(acc * scale);
            }
        }
    }
    let out = Tensor::new(&[s[0], s[1], oh, ow], out);
    Var::from_op(out, vec![x.clone()], move |c| {
        let mut g = Tensor::zeros(c.input(0).shape());
        let gd = g.data_mut();
        let go = c.grad.data();
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    let v = go[(p * oh + y) * ow + xx] * scale;
                    for dy in 0..kernel[0] {
                        let row = p * h * w + (y * stride[0] + dy) * w + xx * stride[1];
                        gd[row..row + kernel[1]].iter_mut().for_each(|a| *a += v);
                    }
                }
            }
        }
        vec![Some(g)]
    })
}

/// Nearest-neighbour resize of `(B, C, H, W)` to `(B, C, oh, ow)`; source index `floor(i·H/oh)`.
pub fn upsample_nearest2d<T: Float>(x: &Var<T>, oh: usize, ow: usize) -> Var<T> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 4, "upsample expects 4D input, got {s:?}");
    let (h, w) = (s[2], s[3]);
    let planes = s[0] * s[1];
    let ys: Vec<usize> = (0..oh).map(|i| i * h / oh).collect();
    let xs: Vec<usize> = (0..ow).map(|i| i * w / ow).collect();
    let xd = x.value().data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for &sy in &ys {
            out.extend(xs.iter().map(|&sx| xd[(p * h + sy) * w + sx]));
        }
    }
    let out = Tensor::new(&[s[0], s[1], oh, ow], out);
    Var::from_op(out, vec![x.clone()], move |c| {
        let mut g = Tensor::zeros(c.input(0).shape());
        let gd = g.data_mut();
        let go = c.grad.data();
        for p in 0..planes {
            for (i, &sy) in ys.iter().enumerate() {
                for (j, &sx) in xs.iter().enumerate() {
                    gd[(p * h + sy) * w + sx] += go[(p * oh + i) * ow + j];
                }
            }
        }
        vec![Some(g)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_mode_keeps_partial_windows() {
        let x = Var::constant(Tensor::<f64>::new(&[1, 1, 2, 7, 5], (0..70).map(f64::from).collect()));
        let y = max_pool3d(&x, [2, 3, 2], [false, true, true]);
        assert_eq!(y.shape(), &[1, 1, 1, 3, 3]);
        // last window covers row 6 and column 4 only
        assert_eq!(y.value().data()[8], 69.0);
        let z = max_pool3d(&x, [2, 2, 2], [false, false, false]);
        assert_eq!(z.shape(), &[1, 1, 1, 3, 2]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Var::input(Tensor::<f64>::from_f64(&[1, 1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let g = max_pool3d(&x, [1, 2, 2], [false; 3]).sum().backward();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_doubles_and_resizes() {
        let x = Var::constant(Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = upsample_nearest2d(&x, 4, 4);
        assert_eq!(&y.value().data()[..8], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let z = upsample_nearest2d(&x, 2, 3);
        assert_eq!(z.value().data(), &[1.0, 1.0, 2.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn pair_mean_contracts_lateral_by_one() {
        let x = Var::constant(Tensor::<f64>::from_f64(&[1, 1, 1, 5], &[0.0, 2.0, 4.0, 6.0, 8.0]));
        let y = avg_pool2d(&x, [1, 2], [1, 1]);
        assert_eq!(y.value().data(), &[1.0, 3.0, 5.0, 7.0]);
    }
}
