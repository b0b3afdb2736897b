//! Named, ordered access to every tensor of a model.
//!
//! Gradient buffers reuse the model's own structure: a tensor that is not
//! trainable has an empty gradient buffer.

use crate::scalar::Scalar;

pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
    pub trainable: bool,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub data: &'a mut Vec<T>,
    pub trainable: bool,
}

impl<T> ParamRef<'_, T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Implemented by every layer that owns parameters.
pub trait ParamSet<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    /// A zeroed gradient buffer with the same structure; frozen tensors are empty.
    fn zero_grad(&self) -> Self
    where
        Self: Sized;

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push<'a, T>(
    out: &mut Vec<ParamRef<'a, T>>,
    prefix: &str,
    name: &str,
    shape: Vec<usize>,
    data: &'a [T],
    trainable: bool,
) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape,
        data,
        trainable,
    });
}

pub(crate) fn push_mut<'a, T>(
    out: &mut Vec<ParamMut<'a, T>>,
    prefix: &str,
    name: &str,
    data: &'a mut Vec<T>,
    trainable: bool,
) {
    out.push(ParamMut {
        name: join(prefix, name),
        data,
        trainable,
    });
}

/// Adds `src` into `dst` tensor by tensor. Both must share a structure.
pub fn accumulate<T: Scalar, P: ParamSet<T>>(dst: &mut P, src: &P) {
    let src = src.params();
    for (d, s) in dst.params_mut().into_iter().zip(src) {
        debug_assert_eq!(d.name, s.name);
        crate::ops::add_assign(d.data, s.data);
    }
}
