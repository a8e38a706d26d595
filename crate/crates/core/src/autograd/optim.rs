use serde::{Deserialize, Serialize};

use crate::autograd::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, v)| Matrix::zeros(v.rows(), v.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Parameters without a gradient keep their moments.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Matrix<T>>]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / c1);
        let c2 = T::of(c2);
        let eps = T::of(eps);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = params.value_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv / c2).sqrt() + eps);
            }
        }
    }

    pub(crate) fn moments(&self) -> (&[Matrix<T>], &[Matrix<T>]) {
        (&self.first, &self.second)
    }

    pub(crate) fn restore(config: AdamConfig, step: u64, first: Vec<Matrix<T>>, second: Vec<Matrix<T>>) -> Self {
        Adam {
            config,
            step,
            first,
            second,
        }
    }
}
