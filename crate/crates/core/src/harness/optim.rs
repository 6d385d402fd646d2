use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Contract(format!("cosine_lr needs 0 <= t <= T with T >= 1, got t={t}, T={total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// SGD with heavy-ball momentum: `b ← μ b + g`, `p ← p − lr · b`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    momentum: f64,
    buffers: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            buffers: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`. Parameters must arrive in the
    /// same order on every call; frozen parameters are left untouched.
    pub fn step(&mut self, params: &mut [&mut Parameter<S>], grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        let mu = S::of(self.momentum);
        let lr = S::of(lr);
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if !p.is_trainable() {
                continue;
            }
            if g.shape() != p.value().shape() {
                return Err(Error::shape("sgd_step", g.shape(), p.value().shape()));
            }
            let b = match buf {
                Some(b) => {
                    for (bv, &gv) in b.data_mut().iter_mut().zip(g.data()) {
                        *bv = mu * *bv + gv;
                    }
                    b
                }
                None => buf.insert(g.clone()),
            };
            for (v, &bv) in p.value_mut().iter_mut().zip(b.data()) {
                *v = *v - lr * bv;
            }
        }
        Ok(())
    }
}
