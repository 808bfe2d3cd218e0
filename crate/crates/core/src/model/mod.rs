//! The desk-scale diffusion transformer: stand-in visual codec, patch /
//! positional / timestep embeddings, a pre-norm masked transformer stack
//! with LoRA adapters, and the velocity readout head.
//!
//! Layout of one forward pass: the assembled token sequence (text, two
//! wrapped condition-image spans, the wrapped noisy span, one timestep
//! slot) is embedded row by row, runs through `n_layers` pre-norm blocks
//! under the hybrid attention mask, and only the noisy-image positions are
//! read out and projected back to patch space as a velocity.

mod codec;
mod lora;

pub use codec::{Codec, LatentGrid};
pub use lora::{lora_apply, Linear, LoraPair};

use crate::prompt::{AssembledSequence, AttnMask, Segment};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("indivisible dims: {0}")]
    IndivisibleDims(String),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("lora rank mismatch: {0}")]
    RankMismatch(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Space-to-depth factor of the stand-in codec.
    pub latent_factor: usize,
    /// Patch side in latent cells.
    pub patch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            latent_factor: 2,
            patch: 2,
            lora_rank: 16,
            lora_alpha: 0.5,
            vocab_size: crate::prompt::Vocab::builtin().size(),
            max_seq: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(ModelError::BadConfig(
                "d_model must be divisible by 4 for 2-D position embeddings".into(),
            ));
        }
        if self.latent_factor == 0 || self.patch == 0 {
            return Err(ModelError::BadConfig(
                "latent_factor and patch must be >= 1".into(),
            ));
        }
        if self.vocab_size < crate::prompt::Vocab::builtin().size() {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} smaller than builtin vocabulary",
                self.vocab_size
            )));
        }
        if !self.lora_alpha.is_finite() {
            return Err(ModelError::BadConfig("lora_alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.latent_factor * self.latent_factor
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![d], T::one()),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ln1: LayerNormParams<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

/// All named parameters of the model. LoRA pairs are the only tensors that
/// track gradients by default; everything else (including the codec mix)
/// stays frozen during adaptation.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<T>,
    pub patch_embed: Linear<T>,
    pub time_mlp1: Linear<T>,
    pub time_mlp2: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub final_ln: LayerNormParams<T>,
    pub head: Linear<T>,
    pub codec: Codec<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from(seed);
        let d = config.d_model;
        let (r, alpha) = (config.lora_rank, config.lora_alpha);
        let pdim = config.patch_dim();

        let tok_embed = Tensor::randn(vec![config.vocab_size, d], 0.02, &mut rng);
        let patch_embed =
            Linear::init("patch_embed", pdim, d, 1.0 / (pdim as f64).sqrt(), &mut rng)
                .with_lora(r, alpha, &mut rng);
        let time_mlp1 = Linear::init("time_mlp1", d, d, 1.0 / (d as f64).sqrt(), &mut rng)
            .with_lora(r, alpha, &mut rng);
        let time_mlp2 = Linear::init("time_mlp2", d, d, 1.0 / (d as f64).sqrt(), &mut rng)
            .with_lora(r, alpha, &mut rng);

        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let std = 1.0 / (d as f64).sqrt();
            let hidden = 4 * d;
            blocks.push(Block {
                ln1: LayerNormParams::init(d),
                qkv: Linear::init(&format!("layer{i}.qkv"), d, 3 * d, std, &mut rng)
                    .with_lora(r, alpha, &mut rng),
                proj: Linear::init(&format!("layer{i}.proj"), d, d, std, &mut rng)
                    .with_lora(r, alpha, &mut rng),
                ln2: LayerNormParams::init(d),
                mlp1: Linear::init(&format!("layer{i}.mlp1"), d, hidden, std, &mut rng)
                    .with_lora(r, alpha, &mut rng),
                mlp2: Linear::init(
                    &format!("layer{i}.mlp2"),
                    hidden,
                    d,
                    1.0 / (hidden as f64).sqrt(),
                    &mut rng,
                )
                .with_lora(r, alpha, &mut rng),
            });
        }

        // zero base head: with fresh (zero-delta) adapters the model starts
        // at exactly zero velocity
        let head = Linear::init_zero("head", d, pdim).with_lora(r, alpha, &mut rng);
        let codec = Codec::seeded(config.latent_factor, rng.next_u64());

        Ok(ModelParams {
            config: config.clone(),
            tok_embed,
            patch_embed,
            time_mlp1,
            time_mlp2,
            blocks,
            final_ln: LayerNormParams::init(d),
            head,
            codec,
        })
    }

    /// Visits every named tensor in a stable order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        let visit_linear = |name: &str, lin: &Linear<T>, f: &mut dyn FnMut(&str, &Tensor<T>)| {
            f(&format!("{name}.w"), &lin.w);
            if let Some(b) = &lin.bias {
                f(&format!("{name}.b"), b);
            }
            if let Some(l) = &lin.lora {
                f(&format!("{name}.lora_a"), &l.a);
                f(&format!("{name}.lora_b"), &l.b);
            }
        };
        f("tok_embed", &self.tok_embed);
        visit_linear("patch_embed", &self.patch_embed, &mut f);
        visit_linear("time_mlp1", &self.time_mlp1, &mut f);
        visit_linear("time_mlp2", &self.time_mlp2, &mut f);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("layer{i}.ln1.gamma"), &b.ln1.gamma);
            f(&format!("layer{i}.ln1.beta"), &b.ln1.beta);
            visit_linear(&format!("layer{i}.qkv"), &b.qkv, &mut f);
            visit_linear(&format!("layer{i}.proj"), &b.proj, &mut f);
            f(&format!("layer{i}.ln2.gamma"), &b.ln2.gamma);
            f(&format!("layer{i}.ln2.beta"), &b.ln2.beta);
            visit_linear(&format!("layer{i}.mlp1"), &b.mlp1, &mut f);
            visit_linear(&format!("layer{i}.mlp2"), &b.mlp2, &mut f);
        }
        f("final_ln.gamma", &self.final_ln.gamma);
        f("final_ln.beta", &self.final_ln.beta);
        visit_linear("head", &self.head, &mut f);
        f("codec.q", self.codec.q());
    }

    /// Mutable visit in the same order as [`ModelParams::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        let visit_linear =
            |name: &str, lin: &mut Linear<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)| {
                f(&format!("{name}.w"), &mut lin.w);
                if let Some(b) = &mut lin.bias {
                    f(&format!("{name}.b"), b);
                }
                if let Some(l) = &mut lin.lora {
                    f(&format!("{name}.lora_a"), &mut l.a);
                    f(&format!("{name}.lora_b"), &mut l.b);
                }
            };
        f("tok_embed", &mut self.tok_embed);
        visit_linear("patch_embed", &mut self.patch_embed, &mut f);
        visit_linear("time_mlp1", &mut self.time_mlp1, &mut f);
        visit_linear("time_mlp2", &mut self.time_mlp2, &mut f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("layer{i}.ln1.gamma"), &mut b.ln1.gamma);
            f(&format!("layer{i}.ln1.beta"), &mut b.ln1.beta);
            visit_linear(&format!("layer{i}.qkv"), &mut b.qkv, &mut f);
            visit_linear(&format!("layer{i}.proj"), &mut b.proj, &mut f);
            f(&format!("layer{i}.ln2.gamma"), &mut b.ln2.gamma);
            f(&format!("layer{i}.ln2.beta"), &mut b.ln2.beta);
            visit_linear(&format!("layer{i}.mlp1"), &mut b.mlp1, &mut f);
            visit_linear(&format!("layer{i}.mlp2"), &mut b.mlp2, &mut f);
        }
        f("final_ln.gamma", &mut self.final_ln.gamma);
        f("final_ln.beta", &mut self.final_ln.beta);
        visit_linear("head", &mut self.head, &mut f);
        f("codec.q", self.codec.q_mut());
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each_tensor(|name, t| {
            if t.requires_grad() {
                out.push(name.to_string());
            }
        });
        out
    }

    /// Marks every tensor except the codec mix as trainable.
    pub fn set_full_finetune(&mut self) {
        self.for_each_tensor_mut(|name, t| {
            if name != "codec.q" && !t.requires_grad() {
                *t = t.clone().with_grad();
            }
        });
    }

    pub fn zero_grads(&self) {
        self.for_each_tensor(|_, t| t.zero_grad());
    }
}

/// 2-D sinusoidal position embedding: d/4 frequency bands per axis,
/// base 10000, laid out [sin(y·ω), cos(y·ω), sin(x·ω), cos(x·ω)].
pub fn pos_embed_2d<T: Scalar>(gy: usize, gx: usize, d: usize) -> Vec<T> {
    let bands = d / 4;
    let mut out = Vec::with_capacity(d);
    for &coord in &[gy as f64, gx as f64] {
        for k in 0..bands {
            let omega = 10000f64.powf(-(k as f64) / bands as f64);
            out.push(T::of_f64((coord * omega).sin()));
        }
        for k in 0..bands {
            let omega = 10000f64.powf(-(k as f64) / bands as f64);
            out.push(T::of_f64((coord * omega).cos()));
        }
    }
    out
}

/// 1-D sinusoidal embedding over the absolute sequence position.
pub fn pos_embed_1d<T: Scalar>(pos: usize, d: usize) -> Vec<T> {
    let bands = d / 2;
    let mut out = Vec::with_capacity(d);
    for k in 0..bands {
        let omega = 10000f64.powf(-(k as f64) / bands as f64);
        out.push(T::of_f64((pos as f64 * omega).sin()));
    }
    for k in 0..bands {
        let omega = 10000f64.powf(-(k as f64) / bands as f64);
        out.push(T::of_f64((pos as f64 * omega).cos()));
    }
    out
}

/// Pre-MLP timestep features: d/2 bands with frequencies 10000^(−2k/d)
/// applied to 1000·t, sines then cosines.
pub fn time_features<T: Scalar>(t: T, d: usize) -> Vec<T> {
    let bands = d / 2;
    let arg0 = t.as_f64() * 1000.0;
    let mut out = Vec::with_capacity(d);
    for k in 0..bands {
        let freq = 10000f64.powf(-2.0 * k as f64 / d as f64);
        out.push(T::of_f64((arg0 * freq).sin()));
    }
    for k in 0..bands {
        let freq = 10000f64.powf(-2.0 * k as f64 / d as f64);
        out.push(T::of_f64((arg0 * freq).cos()));
    }
    out
}

/// Learned timestep embedding: sinusoidal features through a 2-layer MLP.
pub fn timestep_embed<T: Scalar>(
    g: &Graph<T>,
    params: &ModelParams<T>,
    t: T,
) -> Result<Tensor<T>> {
    let d = params.config.d_model;
    let pre = Tensor::from_vec(vec![1, d], time_features(t, d)).map_err(ModelError::Tensor)?;
    let h = params.time_mlp1.forward(g, &pre)?;
    let h = g.silu(&h)?;
    params.time_mlp2.forward(g, &h)
}

/// Patch tokens of a latent grid: linear projection plus 2-D position
/// embedding, patch-grid row-major.
pub fn embed_patches<T: Scalar>(
    g: &Graph<T>,
    params: &ModelParams<T>,
    lat: &LatentGrid<T>,
) -> Result<Tensor<T>> {
    let p = params.config.patch;
    let d = params.config.d_model;
    if lat.c != params.config.latent_channels() {
        return Err(ModelError::ShapeMismatch(format!(
            "latent channels {} vs config {}",
            lat.c,
            params.config.latent_channels()
        )));
    }
    let tokens = lat.patchify(p)?;
    let projected = params.patch_embed.forward(g, &tokens)?;
    let (gh, gw) = (lat.h / p, lat.w / p);
    let mut pos = Vec::with_capacity(gh * gw * d);
    for gy in 0..gh {
        for gx in 0..gw {
            pos.extend(pos_embed_2d::<T>(gy, gx, d));
        }
    }
    let pos = Tensor::from_vec(vec![gh * gw, d], pos).map_err(ModelError::Tensor)?;
    Ok(g.add(&projected, &pos)?)
}

/// Builds the [n, d] embedding matrix for an assembled sequence.
///
/// The learned timestep embedding fills the trailing timestep slot and is
/// also added to every noisy-image patch token: with the causal rule no
/// position can attend to the (final) timestep slot, so the velocity
/// readout must receive t directly at its own positions.
pub fn embed_sequence<T: Scalar>(
    g: &Graph<T>,
    params: &ModelParams<T>,
    seq: &AssembledSequence,
    cond: [&LatentGrid<T>; 2],
    noisy: &LatentGrid<T>,
    t: T,
) -> Result<Tensor<T>> {
    let d = params.config.d_model;
    let p = params.config.patch;
    let time_vec = timestep_embed(g, params, t)?;
    let time_row = g.reshape(&time_vec, vec![d])?;
    let mut parts: Vec<Tensor<T>> = Vec::new();
    for seg in &seq.layout.segments {
        match seg {
            Segment::Text { start, len } => {
                let ids: Vec<usize> = (*start..start + len)
                    .map(|pos| seq.tokens[pos].expect("text slot") as usize)
                    .collect();
                let emb = g.gather_rows(&params.tok_embed, &ids)?;
                let mut pos = Vec::with_capacity(len * d);
                for abs in *start..start + len {
                    pos.extend(pos_embed_1d::<T>(abs, d));
                }
                let pos = Tensor::from_vec(vec![*len, d], pos).map_err(ModelError::Tensor)?;
                parts.push(g.add(&emb, &pos)?);
            }
            Segment::CondImage { index, len, .. } => {
                let lat = cond[*index];
                if lat.patch_count(p)? != *len {
                    return Err(ModelError::ShapeMismatch(format!(
                        "cond image {} occupies {} tokens, latent gives {}",
                        index,
                        len,
                        lat.patch_count(p)?
                    )));
                }
                parts.push(embed_patches(g, params, lat)?);
            }
            Segment::NoisyImage { len, .. } => {
                if noisy.patch_count(p)? != *len {
                    return Err(ModelError::ShapeMismatch(format!(
                        "noisy span is {} tokens, latent gives {}",
                        len,
                        noisy.patch_count(p)?
                    )));
                }
                let emb = embed_patches(g, params, noisy)?;
                parts.push(g.add_bias(&emb, &time_row)?);
            }
            Segment::Timestep { .. } => {
                parts.push(time_vec.clone());
            }
        }
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(g.concat_rows(&refs)?)
}

/// Runs the block stack over pre-embedded rows and reads out the velocity
/// at `noisy_range` positions.
pub fn transformer_velocity<T: Scalar>(
    g: &Graph<T>,
    params: &ModelParams<T>,
    embedded: &Tensor<T>,
    mask: &AttnMask,
    noisy_range: std::ops::Range<usize>,
) -> Result<Tensor<T>> {
    let d = params.config.d_model;
    let heads = params.config.n_heads;
    let dh = d / heads;
    let n = embedded.shape()[0];
    if mask.n() != n {
        return Err(ModelError::ShapeMismatch(format!(
            "mask is {}x{}, sequence has {} rows",
            mask.n(),
            mask.n(),
            n
        )));
    }
    let eps = T::of_f64(LN_EPS);
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());

    let mut h = embedded.clone();
    for block in &params.blocks {
        let normed = g.layernorm(&h, &block.ln1.gamma, &block.ln1.beta, eps)?;
        let qkv = block.qkv.forward(g, &normed)?;
        let mut head_outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(&qkv, hd * dh, dh)?;
            let k = g.slice_cols(&qkv, d + hd * dh, dh)?;
            let v = g.slice_cols(&qkv, 2 * d + hd * dh, dh)?;
            let scores = g.scale(&g.matmul(&q, &g.transpose(&k)?)?, scale)?;
            let probs = g.softmax_masked(&scores, mask.as_bools())?;
            head_outs.push(g.matmul(&probs, &v)?);
        }
        let refs: Vec<&Tensor<T>> = head_outs.iter().collect();
        let attn = block.proj.forward(g, &g.concat_cols(&refs)?)?;
        h = g.add(&h, &attn)?;

        let normed = g.layernorm(&h, &block.ln2.gamma, &block.ln2.beta, eps)?;
        let mid = g.silu(&block.mlp1.forward(g, &normed)?)?;
        let mlp = block.mlp2.forward(g, &mid)?;
        h = g.add(&h, &mlp)?;
    }
    let h = g.layernorm(&h, &params.final_ln.gamma, &params.final_ln.beta, eps)?;
    let noisy_rows: Vec<usize> = noisy_range.collect();
    let picked = g.gather_rows(&h, &noisy_rows)?;
    Ok(params.head.forward(g, &picked)?)
}

/// Full forward pass: velocity over the noisy-image tokens, shape
/// [noisy patches, p²·C].
pub fn forward<T: Scalar>(
    g: &Graph<T>,
    params: &ModelParams<T>,
    seq: &AssembledSequence,
    mask: &AttnMask,
    cond: [&LatentGrid<T>; 2],
    noisy: &LatentGrid<T>,
    t: T,
) -> Result<Tensor<T>> {
    let n = seq.layout.len;
    if n > params.config.max_seq {
        return Err(ModelError::SeqTooLong {
            len: n,
            max: params.config.max_seq,
        });
    }
    let embedded = embed_sequence(g, params, seq, cond, noisy, t)?;
    let noisy_range = seq
        .layout
        .noisy_span()
        .ok_or_else(|| ModelError::ShapeMismatch("layout lacks a noisy span".into()))?;
    transformer_velocity(g, params, &embedded, mask, noisy_range)
}

/// Reshapes a velocity token matrix back into latent-grid form.
pub fn velocity_to_grid<T: Scalar>(
    params: &ModelParams<T>,
    velocity: &Tensor<T>,
    like: &LatentGrid<T>,
) -> Result<LatentGrid<T>> {
    LatentGrid::unpatchify(
        velocity.data(),
        params.config.patch,
        like.h,
        like.w,
        like.c,
    )
}
