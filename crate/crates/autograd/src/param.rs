use std::cell::RefCell;

use crate::var::fresh_id;
use crate::{Float, Tensor, Var};

/// Named model state. Non-trainable params hold buffers such as running statistics.
#[derive(Debug)]
pub struct Param<T: Float> {
    id: u64,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Float> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self { id: fresh_id(), value, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self { id: fresh_id(), value, trainable: false }
    }

    /// Key under which this parameter's gradient is reported.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Graph leaf holding a copy of the current value.
    pub fn var(&self) -> Var<T> {
        if self.trainable {
            Var::param_leaf(self.value.clone(), self.id)
        } else {
            Var::constant(self.value.clone())
        }
    }
}

/// Anything holding params. Names are dot-joined field paths, stable across runs.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Float> Module<T> for Param<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Float> Module<T> for RefCell<Param<T>> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, &self.borrow())
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self.get_mut())
    }
}

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Float, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_module {
    ($ty:ident; $($field:ident),+ $(,)?) => {
        impl<T: $crate::Float> $crate::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::Param<T>)) {
                $( $crate::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )+
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::Param<T>)) {
                $( $crate::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )+
            }
        }
    };
}
