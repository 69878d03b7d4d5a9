//! Dual-stream multiple-instance aggregator over frozen instance embeddings.
//!
//! For a bag `H = [h_1; ...; h_N]` (`N x K`):
//!
//! ```text
//! instance stream  c(h_i) = W_p h_i,  m = argmax_i c(h_i),  c_m = c(h_m)
//! attention        q_i = W_q h_i,  s_i = softmax_i(<q_i, q_m>)
//! bag stream       v_i = W_v h_i,  b = sum_i s_i v_i,  c_b = W_b b
//! final score      (c_m + c_b) / 2,  positive iff sigmoid(final) >= 0.5
//! loss             (BCE(c_m, y) + BCE(c_b, y)) / 2
//! ```
//!
//! Argmax ties go to the smallest index. There are no bias terms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::preprocess::Coord;
use crate::rng::seeded;
use crate::tensor::{sigmoid, AdamW, Graph, Tensor, Var};

pub const W_P: usize = 0;
pub const W_Q: usize = 1;
pub const W_V: usize = 2;
pub const W_B: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilConfig {
    /// Rows of `W_q`.
    pub query_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            query_dim: 128,
            lr: 2e-5,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-3,
        }
    }
}

/// A slide as a bag of instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub label: u8,
    /// Embedding width `K`.
    pub dim: usize,
    /// Row-major `N x K`.
    pub embeddings: Vec<f64>,
    pub coords: Vec<Coord>,
    /// Per-instance ground truth; evaluation only, never read by training.
    pub instance_labels: Option<Vec<u8>>,
}

impl Bag {
    pub fn new(slide_id: impl Into<String>, label: u8, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if dim == 0 || !embeddings.len().is_multiple_of(dim) {
            return Err(Error::dim("bag", &[embeddings.len()], &[dim]));
        }
        if label > 1 {
            return Err(Error::Validation(format!("bag label must be 0 or 1, got {label}")));
        }
        let n = embeddings.len() / dim;
        Ok(Self {
            slide_id: slide_id.into(),
            label,
            dim,
            embeddings,
            coords: (0..n as u32).map(|i| (0, i)).collect(),
            instance_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    fn matrix(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::Validation(format!("bag {} has no instances", self.slide_id)));
        }
        Tensor::matrix(self.len(), self.dim, self.embeddings.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    /// Pre-sigmoid instance scores `c(h_i)`.
    pub instance_scores: Vec<f64>,
    pub critical: usize,
    pub attention: Vec<f64>,
    pub instance_score_max: f64,
    pub bag_score: f64,
    pub final_score: f64,
    pub predicted: u8,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn final_score(c_m: f64, c_b: f64) -> f64 {
    (c_m + c_b) / 2.0
}

pub fn predicted_label(final_score: f64) -> u8 {
    u8::from(sigmoid(final_score) >= 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    dim: usize,
    query_dim: usize,
    params: ParamStore,
}

/// Nodes of one aggregator pass.
#[derive(Debug, Clone, Copy)]
pub struct MilGraph {
    pub scores: Var,
    pub critical: usize,
    pub c_m: Var,
    pub attention: Var,
    pub bag_repr: Var,
    pub c_b: Var,
}

impl MilModel {
    /// Entries uniform on `+-1/sqrt(K)`.
    pub fn new<R: Rng + ?Sized>(dim: usize, query_dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || query_dim == 0 {
            return Err(Error::Parameter("aggregator sizes must be positive".into()));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut params = ParamStore::new();
        params.push("w_p", Tensor::uniform(&[1, dim], bound, rng));
        params.push("w_q", Tensor::uniform(&[query_dim, dim], bound, rng));
        params.push("w_v", Tensor::uniform(&[dim, dim], bound, rng));
        params.push("w_b", Tensor::uniform(&[1, dim], bound, rng));
        Ok(Self { dim, query_dim, params })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let names = ["w_p", "w_q", "w_v", "w_b"];
        if params.names() != names {
            return Err(Error::Validation("aggregator weights must be w_p, w_q, w_v, w_b".into()));
        }
        let dim = params.tensor(W_P).shape()[1];
        let query_dim = params.tensor(W_Q).shape()[0];
        let ok = params.tensor(W_P).shape() == [1, dim]
            && params.tensor(W_Q).shape() == [query_dim, dim]
            && params.tensor(W_V).shape() == [dim, dim]
            && params.tensor(W_B).shape() == [1, dim];
        if !ok {
            return Err(Error::Validation("aggregator weight shapes are inconsistent".into()));
        }
        Ok(Self { dim, query_dim, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Builds both streams for `bag` on `g` using bound weights `vars`.
    pub fn build(&self, g: &mut Graph, vars: &[Var], bag: &Bag) -> Result<MilGraph> {
        if bag.dim != self.dim {
            return Err(Error::dim("mil", &[bag.len(), bag.dim], &[bag.len(), self.dim]));
        }
        let h = g.constant(&bag.matrix()?);
        let n = bag.len();

        let wp_t = g.transpose(vars[W_P])?;
        let scores = g.matmul(h, wp_t)?;
        let critical = argmax_first(g.value(scores).data());
        let c_m = g.element(scores, critical)?;

        let wq_t = g.transpose(vars[W_Q])?;
        let q = g.matmul(h, wq_t)?;
        let q_m = g.rows(q, critical, 1)?;
        let q_m_t = g.transpose(q_m)?;
        let logits = g.matmul(q, q_m_t)?;
        let logits = g.reshape(logits, &[1, n])?;
        let attention = g.softmax(logits, 1.0)?;

        let wv_t = g.transpose(vars[W_V])?;
        let v = g.matmul(h, wv_t)?;
        let bag_repr = g.matmul(attention, v)?;
        let wb_t = g.transpose(vars[W_B])?;
        let c_b = g.matmul(bag_repr, wb_t)?;
        let c_b = g.reshape(c_b, &[1])?;
        Ok(MilGraph {
            scores,
            critical,
            c_m,
            attention,
            bag_repr,
            c_b,
        })
    }

    pub fn predict(&self, bag: &Bag) -> Result<BagPrediction> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let out = self.build(&mut g, &vars, bag)?;
        let c_m = g.value(out.c_m).item();
        let c_b = g.value(out.c_b).item();
        let f = final_score(c_m, c_b);
        Ok(BagPrediction {
            instance_scores: g.value(out.scores).data().to_vec(),
            critical: out.critical,
            attention: g.value(out.attention).data().to_vec(),
            instance_score_max: c_m,
            bag_score: c_b,
            final_score: f,
            predicted: predicted_label(f),
        })
    }

    /// Loss value and weight gradients for one bag.
    pub fn loss_and_grads(&self, bag: &Bag) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let out = self.build(&mut g, &vars, bag)?;
        let loss = mil_loss(&mut g, out.c_m, out.c_b, bag.label)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        Ok((value, self.params.grads(&g, &vars)))
    }
}

/// `(BCE(c_m, y) + BCE(c_b, y)) / 2` on logits.
pub fn mil_loss(g: &mut Graph, c_m: Var, c_b: Var, label: u8) -> Result<Var> {
    if label > 1 {
        return Err(Error::Validation(format!("bag label must be 0 or 1, got {label}")));
    }
    let y = f64::from(label);
    let a = g.bce_with_logits(c_m, y)?;
    let b = g.bce_with_logits(c_b, y)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilOutcome {
    pub model: MilModel,
    /// Mean loss over the bags seen in each epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped: Vec<String>,
}

/// One AdamW step per bag, bags visited in a seeded shuffled order each epoch.
pub fn train_mil(bags: &[Bag], mut model: MilModel, config: &MilConfig, seed: u64) -> Result<MilOutcome> {
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for (i, bag) in bags.iter().enumerate() {
        if bag.is_empty() {
            log::warn!("skipping bag {} with no instances", bag.slide_id);
            skipped.push(bag.slide_id.clone());
        } else {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::Validation("no non-empty bags to train on".into()));
    }
    let mut opt = AdamW::new(config.beta1, config.beta2, 1e-8, config.weight_decay);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order = usable;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut seeded(seed, 2000 + epoch as u64));
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.loss_and_grads(&bags[i])?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    detail: format!("aggregator loss is {loss} on bag {}", bags[i].slide_id),
                });
            }
            model.params.adamw_step(&mut opt, &grads, config.lr)?;
            total += loss;
            step += 1;
        }
        let mean = total / order.len() as f64;
        log::debug!("aggregator epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(MilOutcome {
        model,
        epoch_losses,
        skipped,
    })
}
