//! Diffusion Transformer noise predictor.
//!
//! Forward pass:
//! 1. `c = MLP(sinusoidal(t))`
//! 2. `h = patchify(x_t)·W_embed + b + E_pos` (with an optional CLS token
//!    prepended before the positional embedding)
//! 3. `depth` blocks of `h += MHSA(adaLN(h, c)); h += FFN(adaLN(h, c))`
//! 4. final adaLN, linear projection to `P²·C`, unpatchify (CLS row dropped)
//!
//! adaLN is `γ ⊙ LayerNorm(h) + β` where the modulation linear emits
//! `(γ − 1, β)`. The modulation linears, the attention output projection,
//! the second FFN linear and the final projection all start at zero, so
//! every block is an exact identity and the network output is exactly zero
//! right after initialization.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::DiffusionRng;
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    ClsToken,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub feature_pooling: Pooling,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch_size: 4,
            hidden_dim: 32,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            timesteps: 100,
            feature_pooling: Pooling::ClsToken,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("T", self.timesteps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.image_h.is_multiple_of(self.patch_size) || !self.image_w.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch size {} must divide image {}x{}",
                self.patch_size, self.image_h, self.image_w
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be even",
                self.hidden_dim
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }

    /// Token count including the CLS token when enabled.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.feature_pooling == Pooling::ClsToken)
    }
}

/// Image index for each element of the patch-token layout.
///
/// Tokens follow raster order over the patch grid; inside a token, pixels
/// are in raster order with each pixel's channels contiguous.
fn patch_order(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for ty in 0..gh {
        for tx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (ty * p + dy, tx * p + dx);
                    for ch in 0..c {
                        idx.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn image_dims(x: &[usize]) -> Result<(usize, usize, usize)> {
    match x {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("expected an HxWxC image, got {s:?}"))),
    }
}

/// `[H×W×C] → [N × P²·C]`.
pub fn patchify<S: Real>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (h, w, c) = image_dims(x.shape())?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide image {h}x{w}"
        )));
    }
    let src = x.data();
    let data = patch_order(h, w, c, p).into_iter().map(|i| src[i]).collect();
    Tensor::new([(h / p) * (w / p), p * p * c], data)
}

/// `[N × P²·C] → [H×W×C]`, the inverse of [`patchify`].
pub fn unpatchify<S: Real>(z: &Tensor<S>, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor<S>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide image {h}x{w}"
        )));
    }
    let want = [(h / p) * (w / p), p * p * c];
    if z.shape() != want {
        return Err(Error::Shape(format!(
            "token tensor {:?} does not match expected {want:?}",
            z.shape()
        )));
    }
    let src = z.data();
    let data = inverse(&patch_order(h, w, c, p))
        .into_iter()
        .map(|i| src[i])
        .collect();
    Tensor::new([h, w, c], data)
}

/// `[sin(t·ω_0..) | cos(t·ω_0..)]` with `ω_i = 10000^(−2i/D)`.
pub fn sinusoidal_embedding<S: Real>(t: usize, dim: usize) -> Result<Tensor<S>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "sinusoidal embedding needs an even dimension, got {dim}"
        )));
    }
    let half = dim / 2;
    let t = t as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64))
        .collect();
    let data = freqs
        .iter()
        .map(|w| (t * w).sin())
        .chain(freqs.iter().map(|w| (t * w).cos()))
        .map(S::of)
        .collect();
    Tensor::new([dim], data)
}

/// `γ ⊙ LayerNorm(h) + β`, broadcast over tokens.
pub fn adaln<S: Real>(g: &mut Graph<S>, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.layer_norm(h, S::of(LN_EPS));
    let scaled = g.mul_row(n, gamma)?;
    g.add_row(scaled, beta)
}

/// The timestep conditioning vector `c`, shaped `[D]` or `[1 × D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector<S: Real = f32>(pub Tensor<S>);

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    mod_attn: Linear,
    qkv: Linear,
    attn_out: Linear,
    mod_ffn: Linear,
    ffn1: Linear,
    ffn2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiTModel<S: Real = f32> {
    config: DiTConfig,
    params: ParamStore<S>,
    embed: Linear,
    pos: ParamId,
    cls: Option<ParamId>,
    t_mlp1: Linear,
    t_mlp2: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    final_proj: Linear,
    frozen: bool,
}

struct Init<'a, S: Real> {
    store: ParamStore<S>,
    rng: &'a mut DiffusionRng,
    zero_set_random: bool,
}

impl<S: Real> Init<'_, S> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let w = if zero && !self.zero_set_random {
            self.store.add_zeros(&format!("{name}.w"), &[fan_in, fan_out])
        } else {
            self.store
                .add_normal(&format!("{name}.w"), &[fan_in, fan_out], INIT_STD, self.rng)
        };
        let b = self.store.add_zeros(&format!("{name}.b"), &[fan_out]);
        Linear { w, b }
    }
}

/// Coarse parameter family, used to report gradient checks per group.
pub fn param_group(name: &str) -> &'static str {
    let last = name.rsplit('.').nth(1).unwrap_or(name);
    match last {
        _ if name.starts_with("embed.") => "embed",
        _ if name == "pos" => "pos",
        _ if name == "cls" => "cls",
        _ if name.starts_with("t_mlp") => "timestep-mlp",
        "mod_attn" | "mod_ffn" | "mod" => "adaln-modulation",
        "qkv" | "attn_out" => "attention",
        "ffn1" | "ffn2" => "ffn",
        "proj" => "final-projection",
        _ => "other",
    }
}

impl<S: Real> DiTModel<S> {
    /// Weights ~ N(0, 0.02²), biases zero, adaLN-Zero layers zero.
    pub fn new(config: DiTConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Like [`DiTModel::new`] but the adaLN-Zero layers also get random
    /// weights, so blocks are non-trivial functions from the start.
    pub fn new_dense_random(config: DiTConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: DiTConfig, seed: u64, zero_set_random: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = DiffusionRng::new(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
            zero_set_random,
        };
        let d = config.hidden_dim;
        let hidden = config.mlp_ratio * d;
        let embed = init.linear("embed", config.patch_dim(), d, false);
        let pos = init
            .store
            .add_normal("pos", &[config.num_tokens(), d], INIT_STD, init.rng);
        let cls = (config.feature_pooling == Pooling::ClsToken)
            .then(|| init.store.add_normal("cls", &[1, d], INIT_STD, init.rng));
        let t_mlp1 = init.linear("t_mlp.0", d, d, false);
        let t_mlp2 = init.linear("t_mlp.1", d, d, false);
        let blocks = (0..config.depth)
            .map(|i| Block {
                mod_attn: init.linear(&format!("blocks.{i}.mod_attn"), d, 2 * d, true),
                qkv: init.linear(&format!("blocks.{i}.qkv"), d, 3 * d, false),
                attn_out: init.linear(&format!("blocks.{i}.attn_out"), d, d, true),
                mod_ffn: init.linear(&format!("blocks.{i}.mod_ffn"), d, 2 * d, true),
                ffn1: init.linear(&format!("blocks.{i}.ffn1"), d, hidden, false),
                ffn2: init.linear(&format!("blocks.{i}.ffn2"), hidden, d, true),
            })
            .collect();
        let final_mod = init.linear("final.mod", d, 2 * d, true);
        let final_proj = init.linear("final.proj", d, config.patch_dim(), true);
        Ok(DiTModel {
            config,
            params: init.store,
            embed,
            pos,
            cls,
            t_mlp1,
            t_mlp2,
            blocks,
            final_mod,
            final_proj,
            frozen: false,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Excludes every parameter from taping and optimization. Idempotent.
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
        self.frozen = true;
    }

    pub fn cast<T: Real>(&self) -> DiTModel<T> {
        DiTModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            pos: self.pos,
            cls: self.cls,
            t_mlp1: self.t_mlp1,
            t_mlp2: self.t_mlp2,
            blocks: self.blocks.clone(),
            final_mod: self.final_mod,
            final_proj: self.final_proj,
            frozen: self.frozen,
        }
    }

    fn linear(&self, g: &mut Graph<S>, p: &BoundParams, lin: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(lin.w))?;
        g.add_row(y, p.var(lin.b))
    }

    /// Taped `c = MLP(sinusoidal(t))`, shape `[1×D]`.
    pub fn condition_vector(&self, g: &mut Graph<S>, p: &BoundParams, t: usize) -> Result<Var> {
        let d = self.config.hidden_dim;
        let emb = sinusoidal_embedding::<S>(t, d)?.reshape([1, d])?;
        let emb = g.constant(emb);
        let a = self.linear(g, p, self.t_mlp1, emb)?;
        let a = g.gelu(a);
        self.linear(g, p, self.t_mlp2, a)
    }

    /// `(γ, β)` from the conditioning vector, `γ = 1 + Linear(c)[..D]`.
    fn modulation(&self, g: &mut Graph<S>, p: &BoundParams, lin: Linear, c: Var) -> Result<(Var, Var)> {
        let d = self.config.hidden_dim;
        let m = self.linear(g, p, lin, c)?;
        let scale = g.slice_cols(m, 0, d)?;
        let gamma = g.add_scalar(scale, S::one());
        let beta = g.slice_cols(m, d, d)?;
        Ok((gamma, beta))
    }

    fn attention(&self, g: &mut Graph<S>, p: &BoundParams, blk: &Block, x: Var) -> Result<Var> {
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let qkv = self.linear(g, p, blk.qkv, x)?;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, d + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores);
            outs.push(g.matmul(weights, v)?);
        }
        let ctx = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.linear(g, p, blk.attn_out, ctx)
    }

    /// One adaLN-Zero block: `h' = h + MHSA(adaLN(h)); h'' = h' + FFN(adaLN(h'))`.
    pub fn block_forward(&self, g: &mut Graph<S>, p: &BoundParams, index: usize, h: Var, c: Var) -> Result<Var> {
        let blk = &self.blocks[index];
        let (gamma, beta) = self.modulation(g, p, blk.mod_attn, c)?;
        let x = adaln(g, h, gamma, beta)?;
        let a = self.attention(g, p, blk, x)?;
        let h = g.add(h, a)?;

        let (gamma, beta) = self.modulation(g, p, blk.mod_ffn, c)?;
        let x = adaln(g, h, gamma, beta)?;
        let f = self.linear(g, p, blk.ffn1, x)?;
        let f = g.gelu(f);
        let f = self.linear(g, p, blk.ffn2, f)?;
        g.add(h, f)
    }

    fn check_image(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model shape {:?}",
                x.shape(),
                self.config.image_shape()
            )));
        }
        Ok(())
    }

    /// Steps 1–3: conditioning, embedding, all blocks. Returns the final
    /// hidden states (CLS first when enabled) and `c`.
    pub fn encode(&self, g: &mut Graph<S>, p: &BoundParams, x: &Tensor<S>, t: usize) -> Result<(Var, Var)> {
        self.check_image(x)?;
        if t == 0 || t > self.config.timesteps {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.config.timesteps
            )));
        }
        let c = self.condition_vector(g, p, t)?;
        let patches = g.constant(patchify(x, self.config.patch_size)?);
        let mut h = self.linear(g, p, self.embed, patches)?;
        if let Some(cls) = self.cls {
            h = g.concat_rows(&[p.var(cls), h])?;
        }
        h = g.add(h, p.var(self.pos))?;
        for i in 0..self.blocks.len() {
            h = self.block_forward(g, p, i, h, c)?;
        }
        Ok((h, c))
    }

    fn forward_on(&self, g: &mut Graph<S>, p: &BoundParams, xt: &Tensor<S>, t: usize) -> Result<Var> {
        let (h, c) = self.encode(g, p, xt, t)?;
        let (gamma, beta) = self.modulation(g, p, self.final_mod, c)?;
        let out = adaln(g, h, gamma, beta)?;
        let mut z = self.linear(g, p, self.final_proj, out)?;
        if self.cls.is_some() {
            z = g.slice_rows(z, 1, self.config.num_patches())?;
        }
        let [hh, ww, cc] = self.config.image_shape();
        let order = inverse(&patch_order(hh, ww, cc, self.config.patch_size));
        g.gather(z, order, &[hh, ww, cc])
    }

    /// Untaped `c` for timestep `t`.
    pub fn condition(&self, t: usize) -> Result<ConditioningVector<S>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let c = self.condition_vector(&mut g, &p, t)?;
        Ok(ConditioningVector(g.value(c).clone()))
    }

    /// Untaped single block on explicit hidden states `[tokens × D]`.
    pub fn dit_block(&self, index: usize, h: &Tensor<S>, c: &ConditioningVector<S>) -> Result<Tensor<S>> {
        if index >= self.blocks.len() {
            return Err(Error::Contract(format!("no block {index}")));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let hv = g.constant(h.clone());
        let d = self.config.hidden_dim;
        if c.0.len() != d {
            return Err(Error::Shape(format!("conditioning vector has shape {:?}, expected [{d}]", c.0.shape())));
        }
        let cv = g.constant(c.0.clone().reshape([1, d])?);
        let out = self.block_forward(&mut g, &p, index, hv, cv)?;
        Ok(g.value(out).clone())
    }

    /// Untaped noise prediction, same shape as `xt`.
    pub fn dit_forward(&self, xt: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let out = self.forward_on(&mut g, &p, xt, t)?;
        Ok(g.value(out).clone())
    }

    /// Final-block feature vector of a clean image conditioned on `t_feat`:
    /// the CLS token, or the mean over patch tokens.
    pub fn extract_features(&self, x: &Tensor<S>, t_feat: usize) -> Result<Tensor<S>> {
        if !self.frozen {
            return Err(Error::Contract(
                "feature extraction requires a frozen encoder".into(),
            ));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let (h, _) = self.encode(&mut g, &p, x, t_feat)?;
        let pooled = match self.config.feature_pooling {
            Pooling::ClsToken => g.slice_rows(h, 0, 1)?,
            Pooling::MeanPool => g.mean_rows(h)?,
        };
        g.value(pooled).clone().reshape([self.config.hidden_dim])
    }
}

impl<S: Real> Denoiser<S> for DiTModel<S> {
    type Bound = BoundParams;

    fn image_shape(&self) -> [usize; 3] {
        self.config.image_shape()
    }

    fn bind(&self, g: &mut Graph<S>) -> BoundParams {
        self.params.bind(g)
    }

    fn predict(&self, g: &mut Graph<S>, bound: &BoundParams, xt: &Tensor<S>, t: usize) -> Result<Var> {
        self.forward_on(g, bound, xt, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_like;

    fn small() -> DiTConfig {
        DiTConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 2,
            hidden_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            timesteps: 20,
            feature_pooling: Pooling::ClsToken,
        }
    }

    #[test]
    fn patchify_layout() {
        let x = Tensor::<f32>::new([4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let z = patchify(&x, 2).unwrap();
        assert_eq!(z.shape(), &[4, 4]);
        assert_eq!(&z.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&z.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(unpatchify(&z, 4, 4, 1, 2).unwrap(), x);
    }

    #[test]
    fn patchify_channels_are_contiguous_per_pixel() {
        let x = Tensor::<f32>::new([2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let z = patchify(&x, 2).unwrap();
        assert_eq!(z.shape(), &[1, 12]);
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn patchify_errors() {
        let x = Tensor::<f32>::zeros([5, 4, 1]);
        assert!(patchify(&x, 2).is_err());
        let z = Tensor::<f32>::zeros([3, 4]);
        assert!(unpatchify(&z, 4, 4, 1, 2).is_err());
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_embedding::<f64>(0, 8).unwrap();
        assert_eq!(e.data(), &[0., 0., 0., 0., 1., 1., 1., 1.]);
        let e = sinusoidal_embedding::<f64>(7, 8).unwrap();
        assert_eq!(e.data()[0], 7f64.sin());
        assert_eq!(e.data()[4], 7f64.cos());
        assert!(sinusoidal_embedding::<f64>(3, 7).is_err());
    }

    #[test]
    fn sinusoidal_embeddings_are_distinct() {
        let embs: Vec<Tensor<f64>> = (1..=100)
            .map(|t| sinusoidal_embedding(t, 32).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i]
                    .data()
                    .iter()
                    .zip(embs[j].data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                assert!(d.sqrt() > 1e-3, "t={} and t={}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.patch_size = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small();
        c.hidden_dim = 15;
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adaln_modulation_cases() {
        let mut rng = DiffusionRng::new(2);
        let h = gaussian_like::<f64>(&mut rng, &[5, 4]);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let zero = g.constant(Tensor::zeros([1, 4]));
        let one = g.constant(Tensor::full([1, 4], 1.0));
        let b = g.constant(Tensor::from_f64([1, 4], &[0.5, -1., 2., 3.]).unwrap());

        let out = adaln(&mut g, hv, zero, zero).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let out = adaln(&mut g, hv, one, zero).unwrap();
        let ln = g.layer_norm(hv, LN_EPS);
        assert_eq!(g.value(out).data(), g.value(ln).data());

        let out = adaln(&mut g, hv, zero, b).unwrap();
        for row in g.value(out).data().chunks(4) {
            assert_eq!(row, &[0.5, -1., 2., 3.]);
        }
    }

    #[test]
    fn fresh_model_modulation_is_plain_layer_norm() {
        let model = DiTModel::<f64>::new(small(), 1).unwrap();
        let mut g = Graph::inference();
        let p = model.params.bind(&mut g);
        let c = model.condition_vector(&mut g, &p, 3).unwrap();
        let (gamma, beta) = model.modulation(&mut g, &p, model.final_mod, c).unwrap();
        assert!(g.value(gamma).data().iter().all(|&v| v == 1.0));
        assert!(g.value(beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_block_is_identity() {
        let model = DiTModel::<f32>::new(small(), 4).unwrap();
        let mut rng = DiffusionRng::new(9);
        for t in [1, 10, 20] {
            let h = gaussian_like::<f32>(&mut rng, &[17, 16]);
            let c = model.condition(t).unwrap();
            for b in 0..2 {
                assert_eq!(model.dit_block(b, &h, &c).unwrap(), h);
            }
        }
    }

    #[test]
    fn fresh_forward_is_zero_and_shape_preserving() {
        let model = DiTModel::<f32>::new(small(), 4).unwrap();
        let mut rng = DiffusionRng::new(3);
        let x = gaussian_like::<f32>(&mut rng, &[8, 8, 1]);
        let out = model.dit_forward(&x, 5).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut cfg = small();
        cfg.image_h = 2;
        cfg.image_w = 2;
        cfg.feature_pooling = Pooling::MeanPool;
        let model = DiTModel::<f64>::new_dense_random(cfg, 5).unwrap();
        let blk = &model.blocks[0];
        let mut rng = DiffusionRng::new(6);
        let x = gaussian_like::<f64>(&mut rng, &[1, 16]);
        let mut g = Graph::inference();
        let p = model.params.bind(&mut g);
        let xv = g.constant(x);
        let att = model.attention(&mut g, &p, blk, xv).unwrap();
        // v = x·W_v + b_v, then the output projection
        let qkv = model.linear(&mut g, &p, blk.qkv, xv).unwrap();
        let v = g.slice_cols(qkv, 32, 16).unwrap();
        let expect = model.linear(&mut g, &p, blk.attn_out, v).unwrap();
        for (a, b) in g.value(att).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let model = DiTModel::<f64>::new_dense_random(small(), 8).unwrap();
        let mut rng = DiffusionRng::new(10);
        let h = gaussian_like::<f64>(&mut rng, &[17, 16]);
        let c = model.condition(4).unwrap();
        let perm = rng.permutation(17);
        let permute = |t: &Tensor<f64>| {
            let d = t.data();
            let data = perm.iter().flat_map(|&r| d[r * 16..(r + 1) * 16].to_vec()).collect();
            Tensor::new([17, 16], data).unwrap()
        };
        let a = permute(&model.dit_block(0, &h, &c).unwrap());
        let b = model.dit_block(0, &permute(&h), &c).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_vector_degenerates_to_bias() {
        let mut model = DiTModel::<f64>::new(small(), 1).unwrap();
        for lin in [model.t_mlp1, model.t_mlp2] {
            model.params.get_mut(lin.w).data_mut().fill(0.0);
        }
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        model.params.get_mut(model.t_mlp2.b).data_mut().copy_from_slice(&bias);
        let c = model.condition(7).unwrap();
        assert_eq!(c.0.data(), bias.as_slice());
        assert_eq!(model.condition(7).unwrap(), c);
        for t in 1..=20 {
            assert!(model.condition(t).unwrap().0.is_finite());
        }
    }

    #[test]
    fn features_need_frozen_model() {
        let mut model = DiTModel::<f32>::new(small(), 1).unwrap();
        let x = Tensor::zeros([8, 8, 1]);
        assert!(matches!(model.extract_features(&x, 1), Err(Error::Contract(_))));
        model.freeze();
        model.freeze();
        let f = model.extract_features(&x, 1).unwrap();
        assert_eq!(f.shape(), &[16]);
        assert_eq!(model.extract_features(&x, 1).unwrap(), f);
    }

    #[test]
    fn mean_pool_single_token() {
        let cfg = DiTConfig {
            image_h: 2,
            image_w: 2,
            feature_pooling: Pooling::MeanPool,
            ..small()
        };
        let mut model = DiTModel::<f64>::new_dense_random(cfg, 3).unwrap();
        model.freeze();
        let mut rng = DiffusionRng::new(1);
        let x = gaussian_like::<f64>(&mut rng, &[2, 2, 1]);
        let f = model.extract_features(&x, 1).unwrap();
        let mut g = Graph::inference();
        let p = model.params.bind(&mut g);
        let (h, _) = model.encode(&mut g, &p, &x, 1).unwrap();
        assert_eq!(g.value(h).data(), f.data());
    }

    #[test]
    fn frozen_forward_is_untaped() {
        let mut model = DiTModel::<f32>::new(small(), 1).unwrap();
        model.freeze();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let x = Tensor::zeros([8, 8, 1]);
        model.predict(&mut g, &p, &x, 3).unwrap();
        assert_eq!(g.taped_len(), 0);
    }

    #[test]
    fn param_groups_cover_everything() {
        let model = DiTModel::<f32>::new(small(), 1).unwrap();
        for (name, _) in model.params.iter() {
            assert_ne!(param_group(name), "other", "{name}");
        }
    }
}
