//! Parameterised building blocks shared by the fusion modules and the
//! network.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ConvGeom, Graph, NormState, ParamId, ParamStore, Real, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Weight initialisation for a fresh layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He normal, `std = sqrt(2 / fan_in)`; for layers feeding a ReLU.
    He,
    /// `std = sqrt(1 / fan_in)`.
    Lecun,
    Zeros,
}

/// Child generator for the sub-layer `name`, keyed only by `base` and the
/// name. Enabling or disabling one module then leaves the initial weights
/// of every other module unchanged, so ablation rows are paired.
pub fn sub_rng(base: u64, name: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(base);
    r.set_stream(h);
    r
}

fn init_tensor<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::He => Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng),
        Init::Lecun => Tensor::randn(shape.to_vec(), (1.0 / fan_in as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape.to_vec()),
    }
}

/// Register `name` with `value`, or reuse an existing entry of the same
/// shape. Lets several configurations share one store.
pub(crate) fn register<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    value: Tensor<T>,
    trainable: bool,
) -> Result<ParamId> {
    if let Some(id) = store.id(name) {
        let existing = store.value(id).shape();
        if existing != value.shape() {
            return Err(crate::Error::Config(format!(
                "parameter `{name}` already exists with shape {existing:?}, wanted {:?}",
                value.shape()
            )));
        }
        return Ok(id);
    }
    if trainable {
        store.add(name, value)
    } else {
        store.add_buffer(name, value)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let weight = register(
            store,
            &format!("{name}.weight"),
            init_tensor(&shape, cin * kernel * kernel, init, rng),
            true,
        )?;
        let bias = if bias {
            Some(register(
                store,
                &format!("{name}.bias"),
                Tensor::zeros([cout]),
                true,
            )?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, geom })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Bias-free `y = x · Wᵀ` over the last axis of a rank-2 or rank-3 input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = register(
            store,
            &format!("{name}.weight"),
            init_tensor(&[out_features, in_features], in_features, init, rng),
            true,
        )?;
        Ok(Linear {
            weight,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.in_features])?;
        let w = g.param(self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(flat, wt)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_features;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub state: NormState,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            state: NormState {
                gamma: register(
                    store,
                    &format!("{name}.weight"),
                    Tensor::ones([channels]),
                    true,
                )?,
                beta: register(
                    store,
                    &format!("{name}.bias"),
                    Tensor::zeros([channels]),
                    true,
                )?,
                running_mean: register(
                    store,
                    &format!("{name}.running_mean"),
                    Tensor::zeros([channels]),
                    false,
                )?,
                running_var: register(
                    store,
                    &format!("{name}.running_var"),
                    Tensor::ones([channels]),
                    false,
                )?,
            },
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.batch_norm(x, self.state, BN_MOMENTUM, BN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.state.gamma, self.state.beta]
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub norm: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                kernel,
                geom,
                false,
                Init::He,
                rng,
            )?,
            norm: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
            relu,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }
}
