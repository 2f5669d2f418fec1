//! Network building blocks: sparse convolution, batch norm, linear maps,
//! residual blocks, and generalized-mean pooling.
//!
//! Layers own no tensors; they hold [`ParamId`] handles into a shared
//! [`ParamStore`] plus the static shape information needed to wire a tape.
//! Convolution weights are stored as one `C_in x C_out` matrix per kernel
//! offset so the fused sparse convolution can consume them directly.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::sparse::KernelMap;

/// He-style uniform init over [-sqrt(6 / fan_in), sqrt(6 / fan_in)].
pub fn he_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| S::of(rng.gen_range(-bound..bound)))
}

/// Sparse convolution layer: `kernel^3` weight matrices, optional bias.
/// The stem convolutions omit the bias (batch norm follows them); the
/// attention branches keep it.
#[derive(Debug, Clone)]
pub struct SpConv {
    weights: Vec<ParamId>,
    bias: Option<ParamId>,
    kernel: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
}

impl SpConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let n_offsets = kernel * kernel * kernel;
        let fan_in = c_in * n_offsets;
        let weights = (0..n_offsets)
            .map(|d| {
                store.register(
                    format!("{name}.weight.{d:03}"),
                    he_uniform(rng, c_in, c_out, fan_in),
                )
            })
            .collect();
        let bias = bias.then(|| store.register(format!("{name}.bias"), Array2::zeros((1, c_out))));
        Self {
            weights,
            bias,
            kernel,
            stride,
            c_in,
            c_out,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
        map: &Arc<KernelMap>,
    ) -> Result<NodeId> {
        debug_assert_eq!(map.kernel(), self.kernel);
        debug_assert_eq!(map.stride(), self.stride);
        let weights: Vec<NodeId> = self
            .weights
            .iter()
            .map(|&w| binder.bind(store, tape, w))
            .collect();
        let bias = self.bias.map(|b| binder.bind(store, tape, b));
        tape.sp_conv(x, &weights, bias, map.clone())
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
}

/// Batch normalization over voxel rows. Training mode uses batch statistics
/// and folds them into running estimates; eval mode applies the frozen
/// affine map.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Array2::ones((1, channels))),
            beta: store.register(format!("{name}.beta"), Array2::zeros((1, channels))),
            running_mean: store
                .register_buffer(format!("{name}.running_mean"), Array2::zeros((1, channels))),
            running_var: store
                .register_buffer(format!("{name}.running_var"), Array2::ones((1, channels))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let gamma = binder.bind(store, tape, self.gamma);
        let beta = binder.bind(store, tape, self.beta);
        if training {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, S::of(self.eps))?;
            // Running estimates use the unbiased variance; normalization
            // itself used the biased one.
            let unbias = S::of(stats.n_rows as f64 / (stats.n_rows as f64 - 1.0));
            let mom = S::of(self.momentum);
            let keep = S::of(1.0 - self.momentum);
            let rm = store.value_mut(self.running_mean);
            for (j, v) in rm.row_mut(0).iter_mut().enumerate() {
                *v = keep * *v + mom * stats.mean[j];
            }
            let rv = store.value_mut(self.running_var);
            for (j, v) in rv.row_mut(0).iter_mut().enumerate() {
                *v = keep * *v + mom * stats.var_biased[j] * unbias;
            }
            Ok(y)
        } else {
            let mean = store.value(self.running_mean).row(0).to_owned();
            let var = store.value(self.running_var).row(0).to_owned();
            tape.batch_norm_eval(x, gamma, beta, &mean, &var, S::of(self.eps))
        }
    }

    pub fn running_mean(&self) -> ParamId {
        self.running_mean
    }

    pub fn running_var(&self) -> ParamId {
        self.running_var
    }
}

/// Dense linear map on feature rows. A kernel-1 stride-1 sparse convolution
/// reduces to exactly this, so the attention branches use it directly.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    c_in: usize,
    c_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), he_uniform(rng, c_in, c_out, c_in));
        let bias = bias.then(|| store.register(format!("{name}.bias"), Array2::zeros((1, c_out))));
        Self {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = binder.bind(store, tape, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = binder.bind(store, tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
}

/// Residual block of two kernel-3 convolutions with batch norm. When the
/// channel count changes, the shortcut goes through a kernel-1 convolution
/// plus batch norm; otherwise it is the identity.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: SpConv,
    bn1: BatchNorm,
    conv2: SpConv,
    bn2: BatchNorm,
    shortcut: Option<(SpConv, BatchNorm)>,
}

impl ResBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let conv1 = SpConv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, false);
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = SpConv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, false);
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out);
        let shortcut = (c_in != c_out).then(|| {
            (
                SpConv::new(store, rng, &format!("{name}.shortcut"), c_in, c_out, 1, 1, false),
                BatchNorm::new(store, &format!("{name}.shortcut_bn"), c_out),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    /// `map3` is the kernel-3 stride-1 map over the block's coordinates;
    /// `map1` the kernel-1 identity map (used only by a channel-changing
    /// shortcut).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
        map3: &Arc<KernelMap>,
        map1: &Arc<KernelMap>,
        training: bool,
    ) -> Result<NodeId> {
        let h = self.conv1.forward(store, binder, tape, x, map3)?;
        let h = self.bn1.forward(store, binder, tape, h, training)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(store, binder, tape, h, map3)?;
        let h = self.bn2.forward(store, binder, tape, h, training)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(store, binder, tape, x, map1)?;
                bn.forward(store, binder, tape, s, training)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }
}

/// Generalized-mean pooling over voxel rows with a single learnable
/// exponent shared across channels: f = (mean(max(x, 1e-6)^p))^(1/p).
#[derive(Debug, Clone)]
pub struct GemPool {
    p: ParamId,
}

/// Lower bound kept on the GeM exponent after each optimizer step.
pub const GEM_P_FLOOR: f64 = 1e-3;

/// Clamp floor applied to activations before the power, keeping the
/// fractional powers and their gradients finite.
pub const GEM_CLAMP: f64 = 1e-6;

impl GemPool {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, p_init: f64) -> Self {
        Self {
            p: store.register(format!("{name}.p"), Array2::from_elem((1, 1), S::of(p_init))),
        }
    }

    /// Pools all rows of `x` into a single 1 x C descriptor.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        binder: &mut Binder,
        tape: &mut Tape<S>,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = binder.bind(store, tape, self.p);
        let clamped = tape.clamp_min(x, S::of(GEM_CLAMP));
        let powered = tape.pow(clamped, p)?;
        let pooled = tape.mean_rows(powered);
        let minus_one = tape.scalar_const(S::of(-1.0));
        let inv_p = tape.pow(p, minus_one)?;
        tape.pow(pooled, inv_p)
    }

    /// Projects the exponent back above its floor. Called after each
    /// optimizer step so the power stays well defined.
    pub fn constrain<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let floor = S::of(GEM_P_FLOOR);
        let v = store.value_mut(self.p);
        if v[[0, 0]] < floor {
            v[[0, 0]] = floor;
        }
    }

    pub fn p(&self) -> ParamId {
        self.p
    }
}
