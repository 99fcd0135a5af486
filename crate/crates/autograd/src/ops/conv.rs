use crate::{Float, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn cols(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.cin * self.kd * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kd == 1 && self.kh == 1 && self.kw == 1 && self.pd == 0 && self.ph == 0 && self.pw == 0
    }

    /// Valid output column range `[x0, x1)` for kernel offset `dx`.
    fn x_range(&self, dx: usize) -> (usize, usize) {
        let x0 = self.pw.saturating_sub(dx).min(self.ow);
        let x1 = (self.w + self.pw).saturating_sub(dx).min(self.ow).max(x0);
        (x0, x1)
    }

    fn src(&self, z: usize, dz: usize, y: usize, dy: usize) -> Option<(usize, usize)> {
        let iz = (z + dz).checked_sub(self.pd).filter(|&v| v < self.d)?;
        let iy = (y + dy).checked_sub(self.ph).filter(|&v| v < self.h)?;
        Some((iz, iy))
    }
}

fn im2col<T: Float>(x: &[T], g: &Geom, col: &mut [T]) {
    let n = g.cols();
    let plane = g.d * g.h * g.w;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for dz in 0..g.kd {
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    let (x0, x1) = g.x_range(dx);
                    for z in 0..g.od {
                        for y in 0..g.oh {
                            let base = (z * g.oh + y) * g.ow;
                            let line = &mut dst[base..base + g.ow];
                            match g.src(z, dz, y, dy) {
                                Some((iz, iy)) if x1 > x0 => {
                                    line[..x0].iter_mut().for_each(|v| *v = T::zero());
                                    line[x1..].iter_mut().for_each(|v| *v = T::zero());
                                    let s = (iz * g.h + iy) * g.w + x0 + dx - g.pw;
                                    line[x0..x1].copy_from_slice(&xc[s..s + (x1 - x0)]);
                                }
                                _ => line.iter_mut().for_each(|v| *v = T::zero()),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &Geom, x: &mut [T]) {
    let n = g.cols();
    let plane = g.d * g.h * g.w;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * plane..(ci + 1) * plane];
        for dz in 0..g.kd {
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let src = &col[row * n..(row + 1) * n];
                    let (x0, x1) = g.x_range(dx);
                    if x1 > x0 {
                        for z in 0..g.od {
                            for y in 0..g.oh {
                                if let Some((iz, iy)) = g.src(z, dz, y, dy) {
                                    let base = (z * g.oh + y) * g.ow;
                                    let s = (iz * g.h + iy) * g.w + x0 + dx - g.pw;
                                    xc[s..s + (x1 - x0)]
                                        .iter_mut()
                                        .zip(&src[base + x0..base + x1])
                                        .for_each(|(a, &b)| *a += b);
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 3D convolution. `x: (B, Cin, D, H, W)`, `w: (Cout, Cin, kd, kh, kw)`, `b: (Cout)`.
pub fn conv3d<T: Float>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, pad: [usize; 3]) -> Var<T> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    assert_eq!(xs.len(), 5, "conv3d input must be 5D, got {xs:?}");
    assert_eq!(ws.len(), 5, "conv3d weight must be 5D, got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {xs:?}, weight {ws:?}");
    let (batch, cout) = (xs[0], ws[0]);
    let out_len = |n: usize, k: usize, p: usize| {
        (n + 2 * p).checked_sub(k).map(|v| v + 1).unwrap_or_else(|| panic!("conv kernel {k} larger than padded input {n}+2*{p}"))
    };
    let g = Geom {
        cin: xs[1],
        d: xs[2],
        h: xs[3],
        w: xs[4],
        kd: ws[2],
        kh: ws[3],
        kw: ws[4],
        pd: pad[0],
        ph: pad[1],
        pw: pad[2],
        od: out_len(xs[2], ws[2], pad[0]),
        oh: out_len(xs[3], ws[3], pad[1]),
        ow: out_len(xs[4], ws[4], pad[2]),
    };
    let (k, n) = (g.rows(), g.cols());
    let in_len = g.cin * g.d * g.h * g.w;
    let mut out = vec![T::zero(); batch * cout * n];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    let xd = x.value().data();
    let wd = w.value().data();
    for bi in 0..batch {
        let xb = &xd[bi * in_len..(bi + 1) * in_len];
        let ob = &mut out[bi * cout * n..(bi + 1) * cout * n];
        if let Some(bias) = b {
            for (co, &bv) in bias.value().data().iter().enumerate() {
                ob[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = bv);
            }
        }
        let rhs = if g.pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        T::gemm(false, false, cout, k, n, wd, rhs, ob, b.is_some());
    }
    let out = Tensor::new(&[batch, cout, g.od, g.oh, g.ow], out);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    Var::from_op(out, parents, move |c| {
        let go = c.grad.data();
        let xd = c.input(0).data();
        let wd = c.input(1).data();
        let need_x = c.inputs[0].requires_grad();
        let need_w = c.inputs[1].requires_grad();
        let mut gx = need_x.then(|| vec![T::zero(); batch * in_len]);
        let mut gw = need_w.then(|| vec![T::zero(); cout * k]);
        let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
        let mut gcol = if g.pointwise() || !need_x { Vec::new() } else { vec![T::zero(); k * n] };
        for bi in 0..batch {
            let gob = &go[bi * cout * n..(bi + 1) * cout * n];
            let xb = &xd[bi * in_len..(bi + 1) * in_len];
            if let Some(gw) = gw.as_mut() {
                let rhs = if g.pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut col);
                    &col
                };
                T::gemm(false, true, cout, n, k, gob, rhs, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[bi * in_len..(bi + 1) * in_len];
                if g.pointwise() {
                    T::gemm(true, false, k, cout, n, wd, gob, gxb, false);
                } else {
                    T::gemm(true, false, k, cout, n, wd, gob, &mut gcol, false);
                    col2im(&gcol, &g, gxb);
                }
            }
        }
        let mut grads = vec![
            gx.map(|v| Tensor::new(c.input(0).shape(), v)),
            gw.map(|v| Tensor::new(c.input(1).shape(), v)),
        ];
        if c.inputs.len() == 3 {
            let gb = c.inputs[2].requires_grad().then(|| {
                let mut v = vec![T::zero(); cout];
                for bi in 0..batch {
                    for (co, acc) in v.iter_mut().enumerate() {
                        let s = (bi * cout + co) * n;
                        *acc += go[s..s + n].iter().copied().sum::<T>();
                    }
                }
                Tensor::new(&[cout], v)
            });
            grads.push(gb);
        }
        grads
    })
}

/// Stride-1 2D convolution. `x: (B, Cin, H, W)`, `w: (Cout, Cin, kh, kw)`.
pub fn conv2d<T: Float>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, pad: [usize; 2]) -> Var<T> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d input must be 4D, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be 4D, got {ws:?}");
    let x5 = x.reshape(&[xs[0], xs[1], 1, xs[2], xs[3]]);
    let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
    let y = conv3d(&x5, &w5, b, [0, pad[0], pad[1]]);
    let ys = y.shape().to_vec();
    y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, pad: [usize; 3]) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let od = xs[2] + 2 * pad[0] + 1 - ws[2];
        let oh = xs[3] + 2 * pad[1] + 1 - ws[3];
        let ow = xs[4] + 2 * pad[2] + 1 - ws[4];
        let mut out = Tensor::zeros(&[xs[0], ws[0], od, oh, ow]);
        let at = |t: &Tensor<f64>, i: [usize; 5]| {
            let s = t.shape();
            t.data()[(((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]]
        };
        for b in 0..xs[0] {
            for co in 0..ws[0] {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut s = 0.0;
                            for ci in 0..xs[1] {
                                for dz in 0..ws[2] {
                                    for dy in 0..ws[3] {
                                        for dx in 0..ws[4] {
                                            let iz = (z + dz) as isize - pad[0] as isize;
                                            let iy = (y + dy) as isize - pad[1] as isize;
                                            let ix = (xx + dx) as isize - pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= xs[2] || iy >= xs[3] || ix >= xs[4] {
                                                continue;
                                            }
                                            s += at(x, [b, ci, iz, iy, ix]) * at(w, [co, ci, dz, dy, dx]);
                                        }
                                    }
                                }
                            }
                            let idx = (((b * ws[0] + co) * od + z) * oh + y) * ow + xx;
                            out.data_mut()[idx] = s;
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], f: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64) * f).sin()).collect())
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let x = ramp(&[2, 2, 4, 5, 3], 0.7);
        let w = ramp(&[3, 2, 3, 3, 3], 1.3);
        for pad in [[1, 1, 1], [0, 1, 0], [0, 0, 0]] {
            let y = conv3d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, pad);
            let expect = naive_conv3d(&x, &w, pad);
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.value().data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = Var::input(ramp(&[2, 2, 3, 4, 3], 0.3));
        let w = Var::input(ramp(&[2, 2, 3, 3, 3], 0.9));
        let b = Var::input(ramp(&[2], 2.1));
        let probe = ramp(&[2, 2, 3, 4, 3], 1.7);
        let f = |x: &Var<f64>, w: &Var<f64>, b: &Var<f64>| {
            conv3d(x, w, Some(b), [1, 1, 1]).mul(&Var::constant(probe.clone())).sum()
        };
        let g = f(&x, &w, &b).backward();
        for (v, which) in [(&x, 0), (&w, 1), (&b, 2)] {
            let analytic = g.wrt(v).unwrap().clone();
            for i in (0..v.value().len()).step_by(7) {
                let bump = |s: f64| {
                    let mut t = v.value().clone();
                    t.data_mut()[i] += s;
                    let t = Var::constant(t);
                    let (xx, ww, bb) = match which {
                        0 => (t, w.detach(), b.detach()),
                        1 => (x.detach(), t, b.detach()),
                        _ => (x.detach(), w.detach(), t),
                    };
                    f(&xx, &ww, &bb).value().item()
                };
                let fd = (bump(1e-6) - bump(-1e-6)) / 2e-6;
                assert!((fd - analytic.data()[i]).abs() < 1e-6, "input {which} idx {i}: {fd} vs {}", analytic.data()[i]);
            }
        }
    }

    #[test]
    fn pointwise_conv_skips_im2col_but_agrees() {
        let x = ramp(&[1, 3, 2, 2, 2], 0.4);
        let w = ramp(&[2, 3, 1, 1, 1], 0.8);
        let y = conv3d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, [0, 0, 0]);
        let expect = naive_conv3d(&x, &w, [0, 0, 0]);
        for (a, b) in y.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
