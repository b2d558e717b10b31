use std::fmt;
use std::sync::{Arc, Mutex, RwLock};


use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// A named, shareable parameter (or non-trainable buffer such as batchnorm
/// running statistics).
///
/// Cloning a `Param` clones the handle, not the storage, so two layers holding
/// clones of the same `Param` share weights. The value is held behind an
/// `Arc` so graphs can reference it without copying.
#[derive(Clone)]
pub struct Param<T: Scalar> {
    inner: Arc<ParamInner<T>>,
}

struct ParamInner<T> {
    name: String,
    trainable: bool,
    value: RwLock<Arc<Tensor<T>>>,
    grad: Mutex<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self::build(name.into(), value, true)
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self::build(name.into(), value, false)
    }

    fn build(name: String, value: Tensor<T>, trainable: bool) -> Self {
        let grad = vec![T::zero(); value.numel()];
        Self {
            inner: Arc::new(ParamInner {
                name,
                trainable,
                value: RwLock::new(Arc::new(value)),
                grad: Mutex::new(grad),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.inner.value.read().expect("param lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    /// Replace the value; the shape must not change.
    pub fn set_value(&self, v: Tensor<T>) -> Result<()> {
        let mut guard = self.inner.value.write().expect("param lock poisoned");
        if guard.shape() != v.shape() {
            return Err(dim_err(format!(
                "parameter {} has shape {:?}, cannot assign {:?}",
                self.inner.name,
                guard.shape(),
                v.shape()
            )));
        }
        *guard = Arc::new(v);
        Ok(())
    }

    pub fn grad(&self) -> Tensor<T> {
        let g = self.inner.grad.lock().expect("grad lock poisoned").clone();
        Tensor::from_parts(self.shape(), g)
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        debug_assert_eq!(guard.len(), g.len());
        for (acc, &v) in guard.iter_mut().zip(g) {
            *acc += v;
        }
    }

    pub fn zero_grad(&self) {
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        guard.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Mutate the value in place with read access to the gradient.
    pub fn update(&self, f: impl FnOnce(&mut [T], &[T])) {
        let grad = self.inner.grad.lock().expect("grad lock poisoned");
        let mut guard = self.inner.value.write().expect("param lock poisoned");
        let value = Arc::make_mut(&mut guard);
        f(value.data_mut(), &grad);
    }

    pub(crate) fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as *const () as usize
    }

    pub fn same_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl<T: Scalar> fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.inner.name)
            .field("shape", &self.shape())
            .field("trainable", &self.inner.trainable)
            .finish()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    /// Every parameter and buffer, in a stable order. Shared parameters may
    /// appear more than once; callers that need uniqueness use
    /// [`unique_params`].
    fn params(&self) -> Vec<Param<T>>;
}

pub fn unique_params<T: Scalar>(params: Vec<Param<T>>) -> Vec<Param<T>> {
    let mut out: Vec<Param<T>> = Vec::with_capacity(params.len());
    for p in params {
        if !out.iter().any(|q| q.same_storage(&p)) {
            out.push(p);
        }
    }
    out
}

/// Number of trainable scalars, counting shared storage once.
pub fn count_trainable<T: Scalar>(params: Vec<Param<T>>) -> usize {
    unique_params(params)
        .iter()
        .filter(|p| p.is_trainable())
        .map(|p| p.numel())
        .sum()
}

pub fn zero_grads<T: Scalar>(params: &[Param<T>]) {
    params.iter().for_each(|p| p.zero_grad());
}
