//! Vision Transformer backbone.
//!
//! An image of size `C x S x S` is cut into `N = S^2 / P^2` square sub-patches,
//! each flattened to `P*P*C` values (row-major over pixels, channel fastest)
//! and projected to `D`. A learnable `[cls]` row is prepended and learnable
//! positional embeddings are added. Each encoder block is pre-norm:
//!
//! ```text
//! x <- x + MSA(LN(x))
//! x <- x + MLP(LN(x))
//! ```
//!
//! There is no final norm; the `[cls]` row after every block is recorded so
//! that features can stack the last few of them.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Std of the Gaussian used for `[cls]` and positional embeddings.
pub const EMBED_INIT_STD: f64 = 0.02;

/// Per-channel statistics used to standardise 8-bit RGB input.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub channels: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// Small model that trains on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            num_blocks: 4,
            num_heads: 2,
            mlp_hidden_dim: 64,
            channels: 3,
        }
    }

    /// ViT-B/16 at 224 pixels.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_hidden_dim: 3072,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.num_blocks,
            self.num_heads,
            self.mlp_hidden_dim,
            self.channels,
        ];
        if nonzero.contains(&0) {
            return Err(Error::Parameter(format!("ViT sizes must be positive: {self:?}")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Parameter(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Parameter(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Number of sub-patch tokens `N`.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn feature_dim(&self, k_last: usize) -> usize {
        (k_last + 1) * self.embed_dim
    }
}

/// Indices of one block's weights inside the store.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: Vec<usize>,
    pub bq: Vec<usize>,
    pub wk: Vec<usize>,
    pub bk: Vec<usize>,
    pub wv: Vec<usize>,
    pub bv: Vec<usize>,
    pub wo: Vec<usize>,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc1_weight: usize,
    pub fc1_bias: usize,
    pub fc2_weight: usize,
    pub fc2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitLayout {
    pub patch_weight: usize,
    pub patch_bias: usize,
    pub cls_token: usize,
    pub pos_embed: usize,
    pub blocks: Vec<BlockLayout>,
}

/// Weight of a linear map `y = x W + b` with `W` stored `fan_in x fan_out`.
fn linear_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl VitLayout {
    /// Registers every weight of `config` in `store`, initialised from `rng`.
    fn build<R: Rng + ?Sized>(config: &VitConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let dh = config.head_dim();
        let patch_weight = store.push("patch.weight", linear_weight(config.patch_dim(), d, rng));
        let patch_bias = store.push("patch.bias", Tensor::zeros(&[d]));
        let cls_token = store.push("cls_token", Tensor::randn(&[1, d], EMBED_INIT_STD, rng));
        let pos_embed = store.push(
            "pos_embed",
            Tensor::randn(&[config.num_patches() + 1, d], EMBED_INIT_STD, rng),
        );
        let blocks = (0..config.num_blocks)
            .map(|b| {
                let mut p = |name: &str, t: Tensor| store.push(format!("blocks.{b}.{name}"), t);
                let ln1_gain = p("ln1.gain", Tensor::full(&[d], 1.0));
                let ln1_bias = p("ln1.bias", Tensor::zeros(&[d]));
                let (mut wq, mut bq, mut wk, mut bk, mut wv, mut bv, mut wo) =
                    (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
                for h in 0..config.num_heads {
                    wq.push(p(&format!("attn.{h}.wq"), linear_weight(d, dh, rng)));
                    bq.push(p(&format!("attn.{h}.bq"), Tensor::zeros(&[dh])));
                    wk.push(p(&format!("attn.{h}.wk"), linear_weight(d, dh, rng)));
                    bk.push(p(&format!("attn.{h}.bk"), Tensor::zeros(&[dh])));
                    wv.push(p(&format!("attn.{h}.wv"), linear_weight(d, dh, rng)));
                    bv.push(p(&format!("attn.{h}.bv"), Tensor::zeros(&[dh])));
                }
                for h in 0..config.num_heads {
                    wo.push(p(&format!("attn.{h}.wo"), linear_weight(d, d, rng).rows_slice(h * dh, dh)));
                }
                let bo = p("attn.bo", Tensor::zeros(&[d]));
                let ln2_gain = p("ln2.gain", Tensor::full(&[d], 1.0));
                let ln2_bias = p("ln2.bias", Tensor::zeros(&[d]));
                let fc1_weight = p("mlp.fc1.weight", linear_weight(d, config.mlp_hidden_dim, rng));
                let fc1_bias = p("mlp.fc1.bias", Tensor::zeros(&[config.mlp_hidden_dim]));
                let fc2_weight = p("mlp.fc2.weight", linear_weight(config.mlp_hidden_dim, d, rng));
                let fc2_bias = p("mlp.fc2.bias", Tensor::zeros(&[d]));
                BlockLayout {
                    ln1_gain,
                    ln1_bias,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_gain,
                    ln2_bias,
                    fc1_weight,
                    fc1_bias,
                    fc2_weight,
                    fc2_bias,
                }
            })
            .collect();
        Self {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
        }
    }
}

/// Values recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct VitTrace {
    /// `[cls]` row (`1 x D`) after each block.
    pub cls_rows: Vec<Var>,
    /// Attention matrices `(N+1) x (N+1)`, indexed `[block][head]`.
    pub attention: Vec<Vec<Var>>,
    /// Token matrix after the last block.
    pub tokens: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vit {
    config: VitConfig,
    params: ParamStore,
    layout: VitLayout,
}

impl Vit {
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = VitLayout::build(&config, &mut params, rng);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored weights; names and shapes must match `config`.
    pub fn from_params(config: VitConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut reference = ParamStore::new();
        let layout = VitLayout::build(&config, &mut reference, &mut crate::rng::seeded(0, 0));
        if !reference.same_layout(&params) {
            return Err(Error::Validation(
                "stored ViT weights do not match the configuration".into(),
            ));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn layout(&self) -> &VitLayout {
        &self.layout
    }

    /// Forward pass with no gradient bookkeeping; returns the `[cls]` rows.
    pub fn cls_rows(&self, image: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let trace = forward(&mut g, &vars, &self.config, &self.layout, image)?;
        Ok(trace.cls_rows.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    /// Last `k_last` `[cls]` rows followed by their mean, length `(k_last+1) * D`.
    pub fn extract_features(&self, image: &Tensor, k_last: usize) -> Result<Vec<f64>> {
        check_k_last(&self.config, k_last)?;
        stack_features(&self.cls_rows(image)?, k_last)
    }
}

pub(crate) fn check_k_last(config: &VitConfig, k_last: usize) -> Result<()> {
    if k_last == 0 || k_last > config.num_blocks {
        return Err(Error::Parameter(format!(
            "k_last must be in 1..={}, got {k_last}",
            config.num_blocks
        )));
    }
    Ok(())
}

/// Concatenates the last `k_last` rows and appends their elementwise mean.
pub fn stack_features(cls_rows: &[Vec<f64>], k_last: usize) -> Result<Vec<f64>> {
    if k_last == 0 || k_last > cls_rows.len() {
        return Err(Error::Parameter(format!(
            "k_last must be in 1..={}, got {k_last}",
            cls_rows.len()
        )));
    }
    let tail = &cls_rows[cls_rows.len() - k_last..];
    let d = tail[0].len();
    let mut out = Vec::with_capacity((k_last + 1) * d);
    let mut mean = vec![0.0; d];
    for row in tail {
        out.extend_from_slice(row);
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    out.extend(mean.iter().map(|m| m / k_last as f64));
    Ok(out)
}

/// Standardised `3 x H x W` tensor from an RGB image.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                (f64::from(p[c]) / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Tensor::new(&[3, h, w], data).expect("non-empty image")
}

/// Rearranges `C x S x S` into `N x (P*P*C)` sub-patch rows, grid row-major.
pub fn patchify(image: &Tensor, config: &VitConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::dim("tokenize", image.shape(), &[c, s, s]));
    }
    let grid = s / p;
    let src = image.data();
    let mut out = Vec::with_capacity(c * s * s);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..c {
                        out.push(src[ch * s * s + y * s + x]);
                    }
                }
            }
        }
    }
    Tensor::new(&[grid * grid, p * p * c], out)
}

/// `(N+1) x D` tokens: projected sub-patches below the `[cls]` row, plus positions.
pub fn tokenize(
    g: &mut Graph,
    vars: &[Var],
    config: &VitConfig,
    layout: &VitLayout,
    image: &Tensor,
) -> Result<Var> {
    let patches = g.constant(&patchify(image, config)?);
    let projected = g.matmul(patches, vars[layout.patch_weight])?;
    let projected = g.add_row(projected, vars[layout.patch_bias])?;
    let tokens = g.concat_rows(&[vars[layout.cls_token], projected])?;
    g.add(tokens, vars[layout.pos_embed])
}

/// Scaled dot-product attention for one head; returns `(output, weights)`.
pub fn attention_head(g: &mut Graph, x: Var, wq: Var, bq: Var, wk: Var, bk: Var, wv: Var, bv: Var) -> Result<(Var, Var)> {
    let q = g.matmul(x, wq)?;
    let q = g.add_row(q, bq)?;
    let k = g.matmul(x, wk)?;
    let k = g.add_row(k, bk)?;
    let v = g.matmul(x, wv)?;
    let v = g.add_row(v, bv)?;
    let dh = g.shape(q)[1] as f64;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    // softmax(QK^T / sqrt(dh)) is a softmax at temperature sqrt(dh)
    let weights = g.softmax(logits, dh.sqrt())?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// One pre-norm block; returns the new tokens and each head's attention weights.
pub fn encoder_block(g: &mut Graph, vars: &[Var], block: &BlockLayout, x: Var) -> Result<(Var, Vec<Var>)> {
    let h = g.layer_norm(x, vars[block.ln1_gain], vars[block.ln1_bias], LAYER_NORM_EPS)?;
    let mut attn_sum = None;
    let mut weights = Vec::with_capacity(block.wq.len());
    for i in 0..block.wq.len() {
        let (out, w) = attention_head(
            g,
            h,
            vars[block.wq[i]],
            vars[block.bq[i]],
            vars[block.wk[i]],
            vars[block.bk[i]],
            vars[block.wv[i]],
            vars[block.bv[i]],
        )?;
        weights.push(w);
        let projected = g.matmul(out, vars[block.wo[i]])?;
        attn_sum = Some(match attn_sum {
            None => projected,
            Some(acc) => g.add(acc, projected)?,
        });
    }
    let attn = g.add_row(attn_sum.expect("at least one head"), vars[block.bo])?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, vars[block.ln2_gain], vars[block.ln2_bias], LAYER_NORM_EPS)?;
    let h = g.matmul(h, vars[block.fc1_weight])?;
    let h = g.add_row(h, vars[block.fc1_bias])?;
    let h = g.gelu(h);
    let h = g.matmul(h, vars[block.fc2_weight])?;
    let h = g.add_row(h, vars[block.fc2_bias])?;
    Ok((g.add(x, h)?, weights))
}

/// Full forward pass over weights already bound to `g`.
pub fn forward(
    g: &mut Graph,
    vars: &[Var],
    config: &VitConfig,
    layout: &VitLayout,
    image: &Tensor,
) -> Result<VitTrace> {
    let mut x = tokenize(g, vars, config, layout, image)?;
    let mut cls_rows = Vec::with_capacity(layout.blocks.len());
    let mut attention = Vec::with_capacity(layout.blocks.len());
    for block in &layout.blocks {
        let (next, weights) = encoder_block(g, vars, block, x)?;
        x = next;
        cls_rows.push(g.rows(x, 0, 1)?);
        attention.push(weights);
    }
    Ok(VitTrace {
        cls_rows,
        attention,
        tokens: x,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;
    use crate::rng::seeded;

    fn tiny(blocks: usize, patch: usize) -> VitConfig {
        VitConfig {
            num_blocks: blocks,
            patch_size: patch,
            ..VitConfig::desk()
        }
    }

    fn random_image(config: &VitConfig, seed: u64) -> Tensor {
        let mut rng = seeded(seed, 9);
        Tensor::uniform(&[3, config.image_size, config.image_size], 1.0, &mut rng)
    }

    #[test]
    fn token_counts_follow_grid_arithmetic() {
        let mut rng = seeded(0, 0);
        for (size, patch, n) in [(32, 16, 4), (32, 8, 16)] {
            let config = VitConfig {
                image_size: size,
                patch_size: patch,
                ..VitConfig::desk()
            };
            assert_eq!(config.num_patches(), n);
            let vit = Vit::new(config, &mut rng).unwrap();
            let mut g = Graph::new();
            let vars = vit.params().bind(&mut g, false);
            let t = tokenize(&mut g, &vars, &config, vit.layout(), &random_image(&config, 1)).unwrap();
            assert_eq!(g.shape(t), &[n + 1, 16]);
        }
        assert_eq!(VitConfig::vit_b16().num_patches(), 196);
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let config = VitConfig::desk();
        let vit = Vit::new(config, &mut seeded(0, 0)).unwrap();
        let img = Tensor::zeros(&[3, 24, 24]);
        assert!(matches!(vit.cls_rows(&img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = VitConfig {
            image_size: 30,
            ..VitConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = VitConfig {
            num_heads: 3,
            ..VitConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn permuting_subpatches_permutes_projected_rows() {
        let config = tiny(1, 8);
        let mut vit = Vit::new(config, &mut seeded(3, 0)).unwrap();
        let pos = vit.layout().pos_embed;
        vit.params_mut().tensor_mut(pos).data_mut().fill(0.0);
        let img = random_image(&config, 5);
        // swap the top-left and bottom-right sub-patches
        let mut swapped = img.clone();
        let s = config.image_size;
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let a = c * s * s + y * s + x;
                    let b = c * s * s + (y + 24) * s + (x + 24);
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let rows = |image: &Tensor| {
            let mut g = Graph::new();
            let vars = vit.params().bind(&mut g, false);
            let t = tokenize(&mut g, &vars, &config, vit.layout(), image).unwrap();
            let v = g.value(t).clone();
            (0..v.rows_cols().0).map(|i| v.row(i).to_vec()).collect::<Vec<_>>()
        };
        let (a, b) = (rows(&img), rows(&swapped));
        assert_ne!(a, b);
        let mut sa = a.clone();
        let mut sb = b.clone();
        let key = |r: &Vec<f64>| r.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        sa.sort_by_key(key);
        sb.sort_by_key(key);
        assert_eq!(sa, sb);
        assert_eq!(a[1], b[16]);
    }

    #[test]
    fn tokenize_round_trips_through_pseudo_inverse() {
        // P*P*C = 48 <= D = 64 so the projection can be full rank
        let config = VitConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 2,
            ..VitConfig::desk()
        };
        let mut vit = Vit::new(config, &mut seeded(4, 0)).unwrap();
        let l = vit.layout().clone();
        vit.params_mut().tensor_mut(l.pos_embed).data_mut().fill(0.0);
        vit.params_mut().tensor_mut(l.cls_token).data_mut().fill(0.0);
        let img = random_image(&config, 2);
        let mut g = Graph::new();
        let vars = vit.params().bind(&mut g, false);
        let t = tokenize(&mut g, &vars, &config, &l, &img).unwrap();
        let tokens = g.value(t);
        let w = vit.params().tensor(l.patch_weight);
        let wm = DMatrix::from_row_slice(48, 64, w.data());
        let pinv = wm.clone().pseudo_inverse(1e-12).unwrap();
        let n = config.num_patches();
        let proj = DMatrix::from_row_slice(n, 64, &tokens.data()[64..]);
        let recovered = proj * pinv;
        let expected = patchify(&img, &config).unwrap();
        for (a, b) in recovered.transpose().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // and the cls row is exactly zero
        assert!(tokens.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let config = tiny(1, 8);
        let mut vit = Vit::new(config, &mut seeded(1, 0)).unwrap();
        let block = vit.layout().blocks[0].clone();
        let zeroed: Vec<usize> = [block.wo.clone(), vec![block.bo, block.fc2_weight, block.fc2_bias]].concat();
        for i in zeroed {
            vit.params_mut().tensor_mut(i).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let vars = vit.params().bind(&mut g, false);
        let img = random_image(&config, 3);
        let x = tokenize(&mut g, &vars, &config, vit.layout(), &img).unwrap();
        let (y, _) = encoder_block(&mut g, &vars, &block, x).unwrap();
        assert_eq!(g.value(x).data(), g.value(y).data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let config = VitConfig::desk();
        let vit = Vit::new(config, &mut seeded(2, 0)).unwrap();
        let mut g = Graph::new();
        let vars = vit.params().bind(&mut g, false);
        let trace = forward(&mut g, &vars, &config, vit.layout(), &random_image(&config, 7)).unwrap();
        for block in &trace.attention {
            for &w in block {
                let t = g.value(w);
                let (r, c) = t.rows_cols();
                assert_eq!((r, c), (17, 17));
                for i in 0..r {
                    let s: f64 = t.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut rng = seeded(8, 0);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::randn(&[1, 6], 1.0, &mut rng));
        let mut w = || g.constant(&Tensor::randn(&[6, 3], 1.0, &mut rng));
        let (wq, wk, wv) = (w(), w(), w());
        let mut b = || g.constant(&Tensor::randn(&[3], 1.0, &mut rng));
        let (bq, bk, bv) = (b(), b(), b());
        let (out, weights) = attention_head(&mut g, x, wq, bq, wk, bk, wv, bv).unwrap();
        assert_eq!(g.value(weights).data(), &[1.0]);
        let v = g.matmul(x, wv).unwrap();
        let v = g.add_row(v, bv).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn one_block_forward_is_one_block_application() {
        let config = tiny(1, 8);
        let vit = Vit::new(config, &mut seeded(6, 0)).unwrap();
        let img = random_image(&config, 6);
        let rows = vit.cls_rows(&img).unwrap();
        let mut g = Graph::new();
        let vars = vit.params().bind(&mut g, false);
        let x = tokenize(&mut g, &vars, &config, vit.layout(), &img).unwrap();
        let (y, _) = encoder_block(&mut g, &vars, &vit.layout().blocks[0], x).unwrap();
        assert_eq!(rows, vec![g.value(y).row(0).to_vec()]);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let config = VitConfig::desk();
        let a = Vit::new(config, &mut seeded(9, 0)).unwrap();
        let b = Vit::new(config, &mut seeded(9, 0)).unwrap();
        let img = random_image(&config, 4);
        assert_eq!(a.cls_rows(&img).unwrap(), b.cls_rows(&img).unwrap());
    }

    #[test]
    fn features_stack_last_rows_and_their_mean() {
        let config = VitConfig::desk();
        let vit = Vit::new(config, &mut seeded(10, 0)).unwrap();
        let img = random_image(&config, 8);
        let rows = vit.cls_rows(&img).unwrap();
        let f = vit.extract_features(&img, 4).unwrap();
        assert_eq!(f.len(), 80);
        for j in 0..16 {
            let mean = (0..4).map(|k| f[k * 16 + j]).sum::<f64>() / 4.0;
            assert!((f[64 + j] - mean).abs() < 1e-12);
        }
        let one = vit.extract_features(&img, 1).unwrap();
        assert_eq!(&one[..16], rows[3].as_slice());
        assert_eq!(&one[16..], rows[3].as_slice());
        assert!(vit.extract_features(&img, 5).is_err());
        assert!(vit.extract_features(&img, 0).is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let vit = Vit::new(VitConfig::desk(), &mut seeded(0, 0)).unwrap();
        let params = vit.params().clone();
        let back = Vit::from_params(VitConfig::desk(), params.clone()).unwrap();
        assert_eq!(back, vit);
        assert!(Vit::from_params(tiny(2, 8), params).is_err());
    }

    #[test]
    fn image_tensor_layout_is_channel_major() {
        let img = RgbImage::from_fn(4, 2, |x, y| image::Rgb([(x * 10) as u8, (y * 20) as u8, 255]));
        let t = image_tensor(&img);
        assert_eq!(t.shape(), &[3, 2, 4]);
        let r = t.data()[3]; // channel 0, y 0, x 3
        assert!((r - (30.0 / 255.0 - PIXEL_MEAN[0]) / PIXEL_STD[0]).abs() < 1e-12);
        let g = t.data()[8 + 4]; // channel 1, y 1, x 0
        assert!((g - (20.0 / 255.0 - PIXEL_MEAN[1]) / PIXEL_STD[1]).abs() < 1e-12);
    }

    #[test]
    fn activations_stay_finite_on_random_images() {
        let config = VitConfig::desk();
        for m in 0..10u64 {
            let vit = Vit::new(config, &mut seeded(m, 0)).unwrap();
            let mut rng = seeded(m, 1);
            for _ in 0..100 {
                let data = (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
                let img = Tensor::new(&[3, 32, 32], data).unwrap();
                let mut g = Graph::new();
                let vars = vit.params().bind(&mut g, false);
                forward(&mut g, &vars, &config, vit.layout(), &img).unwrap();
                assert!((0..g.len()).all(|i| g.value(Var::from_id(i)).all_finite()));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::check_params;
        let config = VitConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden_dim: 32,
            channels: 3,
        };
        let mut rng = seeded(21, 0);
        let vit = Vit::new(config, &mut rng).unwrap();
        let img = random_image(&config, 21);
        let heads: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[1, 16], 1.0, &mut rng)).collect();
        let run = |store: &ParamStore, grads: bool| {
            let mut g = Graph::new();
            let vars = store.bind(&mut g, true);
            let trace = forward(&mut g, &vars, &config, vit.layout(), &img).unwrap();
            let mut terms = Vec::new();
            for (row, head) in trace.cls_rows.iter().zip(&heads) {
                let h = g.constant(head);
                let prod = g.mul(*row, h).unwrap();
                terms.push(g.sum(prod));
            }
            let total = g.add(terms[0], terms[1]).unwrap();
            let loss = g.value(total).item();
            if grads {
                g.backward(total).unwrap();
            }
            (loss, store.grads(&g, &vars))
        };
        let (_, grads) = run(vit.params(), true);
        let report = check_params(vit.params(), &grads, |s| Ok(run(s, false).0), 2, 10, &mut rng).unwrap();
        assert!(report.cases > 100);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
