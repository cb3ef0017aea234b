use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently stored in `params`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some(bad) = params.groups().iter().find(|g| !g.grad.all_finite()) {
            return Err(Error::NonFinite {
                path: format!("{}.grad", bad.name),
            });
        }
        if self.velocity.len() != params.len() {
            self.velocity = params
                .groups()
                .iter()
                .map(|g| Tensor::zeros(g.value.shape()))
                .collect();
        }
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for (group, vel) in params.groups_mut().iter_mut().zip(&mut self.velocity) {
            let grads = group.grad.data().to_vec();
            for ((w, v), g) in group
                .value
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grads)
            {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
