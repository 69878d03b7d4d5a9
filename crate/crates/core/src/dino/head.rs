use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    /// Number of output dimensions (prototypes).
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            bottleneck_dim: 32,
            out_dim: 128,
        }
    }
}

/// Three-layer GELU MLP down to a bottleneck, then a bias-free linear map onto
/// the output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    config: HeadConfig,
    input_dim: usize,
    params: ParamStore,
}

const NAMES: [&str; 7] = [
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
    "fc3.weight",
    "fc3.bias",
    "last.weight",
];

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: HeadConfig, rng: &mut R) -> Result<Self> {
        let HeadConfig {
            hidden_dim: h,
            bottleneck_dim: b,
            out_dim: k,
        } = config;
        if [input_dim, h, b, k].contains(&0) {
            return Err(Error::Parameter(format!("head sizes must be positive: {config:?}")));
        }
        let mut params = ParamStore::new();
        let shapes: [&[usize]; 7] = [&[input_dim, h], &[h], &[h, h], &[h], &[h, b], &[b], &[b, k]];
        for (name, shape) in NAMES.iter().zip(shapes) {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
            };
            params.push(*name, t);
        }
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    pub fn from_params(input_dim: usize, config: HeadConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(input_dim, config, &mut crate::rng::seeded(0, 0))?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Validation("stored head weights do not match the configuration".into()));
        }
        Ok(Self {
            config,
            input_dim,
            params,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// `x` is `rows x input_dim`; returns `rows x out_dim` logits.
pub fn head_forward(g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in 0..3 {
        h = g.matmul(h, vars[2 * layer])?;
        h = g.add_row(h, vars[2 * layer + 1])?;
        if layer < 2 {
            h = g.gelu(h);
        }
    }
    g.matmul(h, vars[6])
}
