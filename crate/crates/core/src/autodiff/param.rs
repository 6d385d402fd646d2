use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter, stable across clones. Graphs use it to bind each
/// parameter to a single leaf node per forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    id: ParamId,
    name: String,
    value: Tensor<S>,
    grad: Tensor<S>,
    trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self::new(name, value, false)
    }

    pub fn trainable(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self::new(name, value, true)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<S> {
        &self.grad
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Replaces the value. The new value must keep the shape.
    pub fn set_value(&mut self, value: Tensor<S>) -> crate::Result<()> {
        if value.shape() != self.value.shape() {
            return Err(crate::Error::shape("set_value", self.value.shape(), value.shape()));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut [S] {
        self.value.data_mut()
    }

    pub fn set_grad(&mut self, grad: Tensor<S>) -> crate::Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(crate::Error::shape("set_grad", self.value.shape(), grad.shape()));
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    pub fn cast<T: Scalar>(&self) -> Parameter<T> {
        Parameter {
            id: self.id,
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            trainable: self.trainable,
        }
    }
}
