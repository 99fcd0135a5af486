use crate::{Float, Tensor, Var};

/// Affine map over the last axis: `x (…, in)`, `w (out, in)`, `b (out)`.
pub fn linear<T: Float>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    let fin = *xs.last().expect("linear on a scalar");
    assert_eq!(ws.len(), 2, "linear weight must be 2D");
    assert_eq!(ws[1], fin, "linear expects {} inputs, got {fin}", ws[1]);
    let fout = ws[0];
    let rows = x.value().len() / fin;
    let mut y = vec![T::zero(); rows * fout];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * fout..(r + 1) * fout].copy_from_slice(b.value().data());
        }
    }
    T::gemm(false, true, rows, fin, fout, x.value().data(), w.value().data(), &mut y, b.is_some());
    let mut ys = xs.clone();
    *ys.last_mut().unwrap() = fout;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Var::from_op(Tensor::new(&ys, y), parents, move |c| {
        let go = c.grad.data();
        let gx = c.inputs[0].requires_grad().then(|| {
            let mut v = vec![T::zero(); rows * fin];
            T::gemm(false, false, rows, fout, fin, go, c.input(1).data(), &mut v, false);
            Tensor::new(c.input(0).shape(), v)
        });
        let gw = c.inputs[1].requires_grad().then(|| {
            let mut v = vec![T::zero(); fout * fin];
            T::gemm(true, false, fout, rows, fin, go, c.input(0).data(), &mut v, false);
            Tensor::new(c.input(1).shape(), v)
        });
        let mut out = vec![gx, gw];
        if c.inputs.len() == 3 {
            let mut v = vec![T::zero(); fout];
            for r in 0..rows {
                v.iter_mut().zip(&go[r * fout..(r + 1) * fout]).for_each(|(a, &g)| *a += g);
            }
            out.push(Some(Tensor::new(&[fout], v)));
        }
        out
    })
}

/// Per-timestep spatial average: `(B, C, T, A, L) -> (B, T, C)`.
pub fn spatial_mean_per_step<T: Float>(h: &Var<T>) -> Var<T> {
    let s = h.shape().to_vec();
    assert_eq!(s.len(), 5, "expected (B, C, T, A, L), got {s:?}");
    let (b, ch, t) = (s[0], s[1], s[2]);
    let area = s[3] * s[4];
    let scale = T::one() / T::lit(area as f64);
    let hd = h.value().data();
    let mut out = vec![T::zero(); b * t * ch];
    for bi in 0..b {
        for c in 0..ch {
            for ti in 0..t {
                let base = ((bi * ch + c) * t + ti) * area;
                out[(bi * t + ti) * ch + c] = hd[base..base + area].iter().copied().sum::<T>() * scale;
            }
        }
    }
    Var::from_op(Tensor::new(&[b, t, ch], out), vec![h.clone()], move |cx| {
        let go = cx.grad.data();
        let mut g = Vec::with_capacity(b * ch * t * area);
        for bi in 0..b {
            for c in 0..ch {
                for ti in 0..t {
                    g.extend(std::iter::repeat_n(go[(bi * t + ti) * ch + c] * scale, area));
                }
            }
        }
        vec![Some(Tensor::new(cx.input(0).shape(), g))]
    })
}

/// `keys (B, T, D) · query (B, D) -> (B, T)`.
pub fn batched_dot<T: Float>(keys: &Var<T>, query: &Var<T>) -> Var<T> {
    let ks = keys.shape().to_vec();
    let (b, t, d) = (ks[0], ks[1], ks[2]);
    assert_eq!(query.shape(), &[b, d], "batched_dot query shape");
    let kd = keys.value().data();
    let qd = query.value().data();
    let mut out = vec![T::zero(); b * t];
    for bi in 0..b {
        for ti in 0..t {
            let k = &kd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            out[bi * t + ti] = k.iter().zip(&qd[bi * d..(bi + 1) * d]).map(|(&a, &q)| a * q).sum();
        }
    }
    Var::from_op(Tensor::new(&[b, t], out), vec![keys.clone(), query.clone()], move |c| {
        let go = c.grad.data();
        let kd = c.input(0).data();
        let qd = c.input(1).data();
        let mut gk = vec![T::zero(); b * t * d];
        let mut gq = vec![T::zero(); b * d];
        for bi in 0..b {
            for ti in 0..t {
                let g = go[bi * t + ti];
                for j in 0..d {
                    gk[(bi * t + ti) * d + j] = g * qd[bi * d + j];
                    gq[bi * d + j] += g * kd[(bi * t + ti) * d + j];
                }
            }
        }
        vec![Some(Tensor::new(&[b, t, d], gk)), Some(Tensor::new(&[b, d], gq))]
    })
}

/// Softmax over the last axis.
pub fn softmax_last<T: Float>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let n = *s.last().unwrap();
    let xd = x.value().data();
    let mut out = vec![T::zero(); xd.len()];
    for (row, dst) in xd.chunks(n).zip(out.chunks_mut(n)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    Var::from_op(Tensor::new(&s, out), vec![x.clone()], move |c| {
        let y = c.out.data();
        let go = c.grad.data();
        let mut g = vec![T::zero(); y.len()];
        for ((yr, gr), dst) in y.chunks(n).zip(go.chunks(n)).zip(g.chunks_mut(n)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                dst[i] = yr[i] * (gr[i] - dot);
            }
        }
        vec![Some(Tensor::new(c.grad.shape(), g))]
    })
}

/// `Σ_t α[b,t] · h[b,:,t,:,:]`: `(B, C, T, A, L) × (B, T) -> (B, C, A, L)`.
pub fn time_weighted_sum<T: Float>(h: &Var<T>, alpha: &Var<T>) -> Var<T> {
    let s = h.shape().to_vec();
    let (b, ch, t) = (s[0], s[1], s[2]);
    let area = s[3] * s[4];
    assert_eq!(alpha.shape(), &[b, t], "time weights shape");
    let hd = h.value().data();
    let ad = alpha.value().data();
    let mut out = vec![T::zero(); b * ch * area];
    for bi in 0..b {
        for c in 0..ch {
            let dst = &mut out[(bi * ch + c) * area..(bi * ch + c + 1) * area];
            for ti in 0..t {
                let a = ad[bi * t + ti];
                let src = &hd[((bi * ch + c) * t + ti) * area..((bi * ch + c) * t + ti + 1) * area];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += a * v);
            }
        }
    }
    Var::from_op(Tensor::new(&[b, ch, s[3], s[4]], out), vec![h.clone(), alpha.clone()], move |cx| {
        let go = cx.grad.data();
        let hd = cx.input(0).data();
        let ad = cx.input(1).data();
        let mut gh = vec![T::zero(); hd.len()];
        let mut ga = vec![T::zero(); b * t];
        for bi in 0..b {
            for c in 0..ch {
                let g = &go[(bi * ch + c) * area..(bi * ch + c + 1) * area];
                for ti in 0..t {
                    let off = ((bi * ch + c) * t + ti) * area;
                    let a = ad[bi * t + ti];
                    let mut acc = T::zero();
                    for i in 0..area {
                        gh[off + i] = a * g[i];
                        acc += g[i] * hd[off + i];
                    }
                    ga[bi * t + ti] += acc;
                }
            }
        }
        vec![Some(Tensor::new(cx.input(0).shape(), gh)), Some(Tensor::new(&[b, t], ga))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(Var<f64>) -> Var<f64>, base: Tensor<f64>) {
        let x = Var::input(base.clone());
        let g = f(x.clone()).backward();
        let an = g.wrt(&x).unwrap();
        for i in 0..base.len() {
            let mut p = base.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = base.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (f(Var::constant(p)).value().item() - f(Var::constant(m)).value().item()) / 2e-6;
            assert!((fd - an.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", an.data()[i]);
        }
    }

    fn wave(shape: &[usize], k: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i as f64 * k).sin()).collect())
    }

    #[test]
    fn softmax_rows_sum_to_one_and_differentiate() {
        let x = Var::constant(wave(&[3, 4], 2.3));
        let y = softmax_last(&x);
        for r in y.value().data().chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let probe = Var::constant(wave(&[3, 4], 0.7));
        fd_check(|x| softmax_last(&x).mul(&probe).sum(), wave(&[3, 4], 2.3));
    }

    #[test]
    fn attention_pieces_differentiate() {
        let h = wave(&[2, 3, 4, 2, 2], 0.9);
        let probe = Var::constant(wave(&[2, 3, 2, 2], 1.1));
        let w = Var::constant(wave(&[3, 3], 0.4));
        let f = |h: Var<f64>| {
            let desc = spatial_mean_per_step(&h);
            let keys = linear(&desc, &w, None);
            let q = desc.narrow(1, 3, 1).reshape(&[2, 3]);
            let alpha = softmax_last(&batched_dot(&keys, &q));
            time_weighted_sum(&h, &alpha).mul(&probe).sum()
        };
        fd_check(f, h);
    }

    #[test]
    fn linear_gradients() {
        let w = wave(&[2, 3], 0.5);
        let x = Var::constant(wave(&[4, 3], 1.3));
        let probe = Var::constant(wave(&[4, 2], 0.2));
        fd_check(|w| linear(&x, &w, None).mul(&probe).sum(), w);
        let xw = Var::constant(wave(&[2, 3], 0.5));
        fd_check(|x| linear(&x, &xw, None).mul(&probe).sum(), wave(&[4, 3], 1.3));
    }
}
