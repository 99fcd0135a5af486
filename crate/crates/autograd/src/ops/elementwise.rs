use crate::{Float, Tensor, Var};

fn unary<T: Float>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    // df(input, output) is the local derivative.
    let out = x.value().map(f);
    Var::from_op(out, vec![x.clone()], move |c| {
        let g = c.grad.data();
        let xin = c.input(0).data();
        let y = c.out.data();
        let data = (0..g.len()).map(|i| g[i] * df(xin[i], y[i])).collect();
        vec![Some(Tensor::new(c.grad.shape(), data))]
    })
}

impl<T: Float> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(out, vec![self.clone(), other.clone()], |c| {
            vec![Some(c.grad.clone()), Some(c.grad.clone())]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(out, vec![self.clone(), other.clone()], |c| {
            vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(out, vec![self.clone(), other.clone()], |c| {
            let ga = if c.inputs[0].requires_grad() { Some(c.grad.zip_map(c.input(1), |g, b| g * b)) } else { None };
            let gb = if c.inputs[1].requires_grad() { Some(c.grad.zip_map(c.input(0), |g, a| g * a)) } else { None };
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(out, vec![self.clone(), other.clone()], |c| {
            let ga = c.grad.zip_map(c.input(1), |g, b| g / b);
            let gb = {
                let q = c.out.data();
                let b = c.input(1).data();
                let data = c.grad.data().iter().enumerate().map(|(i, &g)| -g * q[i] / b[i]).collect();
                Tensor::new(c.grad.shape(), data)
            };
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Var<T> {
        unary(self, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        unary(self, move |v| v + s, |_, _| T::one())
    }

    /// `s - self`
    pub fn rsub_scalar(&self, s: T) -> Var<T> {
        unary(self, move |v| s - v, |_, _| -T::one())
    }

    pub fn relu(&self) -> Var<T> {
        unary(self, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(self, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<T> {
        unary(self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Var<T> {
        unary(self, |v| v.abs(), |x, _| x.signum() * if x == T::zero() { T::zero() } else { T::one() })
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        unary(self, |v| v.sqrt(), |_, y| T::lit(0.5) / y)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(out, vec![self.clone()], |c| {
            vec![Some(Tensor::full(c.input(0).shape(), c.grad.item()))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }
}
