use rand::Rng;

use super::params::{init_with_rng, Init, Mode, ParamId, ParamStore, Session, StatUpdate};
use crate::autodiff::{ConvOptions, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// 2-D convolution with a `(k, k, cin, cout)` kernel and optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub opts: ConvOptions,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        opts: ConvOptions,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || cin == 0 || cout == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv {name}: kernel {kernel}, channels {cin}->{cout}"
            )));
        }
        let weight = store.add(
            format!("{name}/kernel"),
            init_with_rng(init, &[kernel, kernel, cin, cout], rng),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}/bias"), Tensor::zeros(&[cout]), true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            kernel,
            cin,
            cout,
            opts,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        let y = s.graph.conv2d(x, w, self.opts)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b)?;
                s.graph.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
            + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Per-channel batch normalization over every axis but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Number of running-statistics updates so far, stored as a 1-element tensor.
    pub updates: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(
                format!("{name}/gamma"),
                Tensor::full(&[channels], T::one()),
                true,
            )?,
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(
                format!("{name}/moving_mean"),
                Tensor::zeros(&[channels]),
                false,
            )?,
            running_var: store.add(
                format!("{name}/moving_variance"),
                Tensor::full(&[channels], T::one()),
                false,
            )?,
            updates: store.add(format!("{name}/updates"), Tensor::zeros(&[1]), false)?,
            channels,
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma)?;
        let beta = s.param(self.beta)?;
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, gamma, beta, T::of(self.eps))?;
                s.record_stats(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    count: self.updates,
                    batch_mean: stats.mean,
                    batch_var: stats.var,
                    momentum: T::of(self.momentum),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                if store.get(self.updates).item() == T::zero() {
                    return Err(Error::UninitializedStatistics(
                        store.entry(self.gamma).name.clone(),
                    ));
                }
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                s.graph
                    .batch_norm_eval(x, gamma, beta, &mean, &var, T::of(self.eps))
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Affine map `x · W + b` on `(N, D)` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Dense {
            weight: store.add(
                format!("{name}/kernel"),
                init_with_rng(init, &[din, dout], rng),
                true,
            )?,
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[dout]), true)?,
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.din {
            return Err(Error::shape(
                "fully_connected",
                format!("input {shape:?}, weights expect {} features", self.din),
            ));
        }
        let w = s.param(self.weight)?;
        let b = s.param(self.bias)?;
        let y = s.graph.matmul(x, w)?;
        s.graph.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + self.dout
    }
}
