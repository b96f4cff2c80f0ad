use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<OptimizerKind> {
        [OptimizerKind::SgdMomentum, OptimizerKind::Adam]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First-order optimizer with per-parameter state.
pub struct Optimizer<T: Real> {
    cfg: OptimizerConfig,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
    steps: u32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        Optimizer {
            cfg,
            first: vec![None; params.len()],
            second: vec![None; params.len()],
            steps: 0,
        }
    }

    /// Applies one update at learning rate `lr` and returns the update norm.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) -> f64 {
        self.steps += 1;
        let lr_t = T::of(lr);
        let mut norm2 = 0.0f64;
        match self.cfg.kind {
            OptimizerKind::SgdMomentum => {
                let mu = T::of(self.cfg.momentum);
                for (id, g) in grads {
                    let vel =
                        self.first[id.index()].get_or_insert_with(|| vec![T::zero(); g.numel()]);
                    let p = params.get_mut(*id).data_mut();
                    for ((pi, vi), &gi) in p.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                        *vi = mu * *vi + gi;
                        let u = lr_t * *vi;
                        norm2 += u.as_f64() * u.as_f64();
                        *pi -= u;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let c1 = T::of(1.0 - b1.powi(self.steps as i32));
                let c2 = T::of(1.0 - b2.powi(self.steps as i32));
                let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(self.cfg.epsilon));
                for (id, g) in grads {
                    let n = g.numel();
                    let m = self.first[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
                    let v = self.second[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
                    let p = params.get_mut(*id).data_mut();
                    for i in 0..n {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        let u = lr_t * mhat / (vhat.sqrt() + eps);
                        norm2 += u.as_f64() * u.as_f64();
                        p[i] -= u;
                    }
                }
            }
        }
        norm2.sqrt()
    }
}
