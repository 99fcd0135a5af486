use crate::{Float, Tensor, Var};

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity tracked by running estimates.
    pub var_unbiased: Vec<T>,
}

/// Batch normalization over every axis except the channel axis 1.
///
/// With `running = Some((mean, var))` the given statistics are used (inference);
/// otherwise batch statistics are computed and returned.
pub fn batch_norm<T: Float>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
    eps: T,
) -> (Var<T>, Option<BatchStats<T>>) {
    let s = x.shape().to_vec();
    let (b, ch) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let count = b * inner;
    let xd = x.value().data();
    let idx = move |bi: usize, c: usize| (bi * ch + c) * inner;

    let (mean, var, stats) = match running {
        Some((m, v)) => (m.data().to_vec(), v.data().to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            for c in 0..ch {
                let mut acc = T::zero();
                for bi in 0..b {
                    acc += xd[idx(bi, c)..idx(bi, c) + inner].iter().copied().sum::<T>();
                }
                let mu = acc / T::lit(count as f64);
                let mut sq = T::zero();
                for bi in 0..b {
                    sq += xd[idx(bi, c)..idx(bi, c) + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[c] = mu;
                var[c] = sq / T::lit(count as f64);
            }
            let unbiased = if count > 1 {
                var.iter().map(|&v| v * T::lit(count as f64 / (count - 1) as f64)).collect()
            } else {
                var.clone()
            };
            (mean.clone(), var, Some(BatchStats { mean, var_unbiased: unbiased }))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let g = gamma.value().data();
    let be = beta.value().data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for c in 0..ch {
            let r = idx(bi, c)..idx(bi, c) + inner;
            for i in r {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = h * g[c] + be[c];
            }
        }
    }
    let training = running.is_none();
    let y = Var::from_op(Tensor::new(&s, out), vec![x.clone(), gamma.clone(), beta.clone()], move |cx| {
        let go = cx.grad.data();
        let gamma = cx.input(1).data();
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        for bi in 0..b {
            for c in 0..ch {
                for i in idx(bi, c)..idx(bi, c) + inner {
                    dgamma[c] += go[i] * xhat[i];
                    dbeta[c] += go[i];
                }
            }
        }
        let gx = cx.inputs[0].requires_grad().then(|| {
            let mut dx = vec![T::zero(); go.len()];
            let n = T::lit(count as f64);
            for c in 0..ch {
                let k = gamma[c] * inv_std[c];
                for bi in 0..b {
                    for i in idx(bi, c)..idx(bi, c) + inner {
                        dx[i] = if training {
                            // dxhat = g·γ, so Σdxhat = γ·dβ and Σ dxhat·x̂ = γ·dγ.
                            k * (go[i] - (dbeta[c] + xhat[i] * dgamma[c]) / n)
                        } else {
                            k * go[i]
                        };
                    }
                }
            }
            Tensor::new(cx.input(0).shape(), dx)
        });
        vec![gx, Some(Tensor::new(&[ch], dgamma)), Some(Tensor::new(&[ch], dbeta))]
    });
    (y, stats)
}
