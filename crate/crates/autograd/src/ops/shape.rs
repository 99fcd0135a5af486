use crate::{Float, Tensor, Var};

impl<T: Float> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let out = self.value().clone().reshape(shape);
        Var::from_op(out, vec![self.clone()], |c| {
            vec![Some(c.grad.clone().reshape(c.input(0).shape()))]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let out = self.value().narrow(axis, start, len);
        Var::from_op(out, vec![self.clone()], move |c| {
            let src = c.input(0).shape();
            let outer: usize = src[..axis].iter().product();
            let inner: usize = src[axis + 1..].iter().product();
            let d = src[axis];
            let mut g = Tensor::zeros(src);
            let gd = g.data_mut();
            let go = c.grad.data();
            for o in 0..outer {
                let dst = o * d * inner + start * inner;
                let s = o * len * inner;
                gd[dst..dst + len * inner].copy_from_slice(&go[s..s + len * inner]);
            }
            vec![Some(g)]
        })
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(out, parts.to_vec(), move |c| {
            let mut start = 0;
            sizes
                .iter()
                .zip(c.inputs)
                .map(|(&len, p)| {
                    let g = if p.requires_grad() { Some(c.grad.narrow(axis, start, len)) } else { None };
                    start += len;
                    g
                })
                .collect()
        })
    }

    /// Zero padding of the last two axes.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Var<T> {
        let s = self.shape().to_vec();
        let n = s.len();
        assert!(n >= 2, "pad2d needs at least two axes");
        let (h, w) = (s[n - 2], s[n - 1]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let outer: usize = s[..n - 2].iter().product();
        let mut out_shape = s.clone();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let xd = self.value().data();
            for o in 0..outer {
                for i in 0..h {
                    let src = (o * h + i) * w;
                    let dst = (o * oh + i + top) * ow + left;
                    od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
                }
            }
        }
        Var::from_op(out, vec![self.clone()], move |c| {
            let mut g = Tensor::zeros(c.input(0).shape());
            let gd = g.data_mut();
            let go = c.grad.data();
            for o in 0..outer {
                for i in 0..h {
                    let dst = (o * h + i) * w;
                    let src = (o * oh + i + top) * ow + left;
                    gd[dst..dst + w].copy_from_slice(&go[src..src + w]);
                }
            }
            vec![Some(g)]
        })
    }

    /// Keeps rows `[top, top+h)` and columns `[left, left+w)` of the last two axes.
    pub fn crop2d(&self, top: usize, h: usize, left: usize, w: usize) -> Var<T> {
        let n = self.shape().len();
        self.narrow(n - 2, top, h).narrow(n - 1, left, w)
    }

    /// Broadcast multiply of `(B, C, ...)` by per-channel gates `(B, C)`.
    pub fn mul_channel(&self, gates: &Var<T>) -> Var<T> {
        let s = self.shape().to_vec();
        let (b, ch) = (s[0], s[1]);
        assert_eq!(gates.shape(), &[b, ch], "mul_channel gate shape");
        let inner: usize = s[2..].iter().product();
        let xd = self.value().data();
        let gd = gates.value().data();
        let mut out = Vec::with_capacity(xd.len());
        for bc in 0..b * ch {
            let gv = gd[bc];
            out.extend(xd[bc * inner..(bc + 1) * inner].iter().map(|&v| v * gv));
        }
        Var::from_op(Tensor::new(&s, out), vec![self.clone(), gates.clone()], move |c| {
            let go = c.grad.data();
            let xd = c.input(0).data();
            let gd = c.input(1).data();
            let gx = c.inputs[0].requires_grad().then(|| {
                let mut v = Vec::with_capacity(go.len());
                for bc in 0..b * ch {
                    v.extend(go[bc * inner..(bc + 1) * inner].iter().map(|&g| g * gd[bc]));
                }
                Tensor::new(c.grad.shape(), v)
            });
            let gg = c.inputs[1].requires_grad().then(|| {
                let v = (0..b * ch)
                    .map(|bc| {
                        let r = bc * inner..(bc + 1) * inner;
                        go[r.clone()].iter().zip(&xd[r]).map(|(&g, &x)| g * x).sum()
                    })
                    .collect();
                Tensor::new(&[b, ch], v)
            });
            vec![gx, gg]
        })
    }

    /// Mean over every axis after the first two: `(B, C, ...) -> (B, C)`.
    pub fn global_avg_pool(&self) -> Var<T> {
        let s = self.shape().to_vec();
        let (b, ch) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let scale = T::one() / T::lit(inner as f64);
        let xd = self.value().data();
        let out: Vec<T> =
            (0..b * ch).map(|bc| xd[bc * inner..(bc + 1) * inner].iter().copied().sum::<T>() * scale).collect();
        Var::from_op(Tensor::new(&[b, ch], out), vec![self.clone()], move |c| {
            let go = c.grad.data();
            let mut v = Vec::with_capacity(b * ch * inner);
            for &g in go {
                v.extend(std::iter::repeat_n(g * scale, inner));
            }
            vec![Some(Tensor::new(c.input(0).shape(), v))]
        })
    }
}
