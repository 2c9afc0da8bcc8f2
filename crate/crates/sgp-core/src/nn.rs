//! Neural building blocks: projections (dense and low-rank-adapted),
//! attention with residuals, the patch encoder, the mask downsampler,
//! the prompt encoder, and the two-stage upsampling mask decoder.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    add, add_bias_cols, add_bias_rows, concat_rows, conv2d, matmul, matmul_nt, mul_scalar,
    patchify, relu, resize_bilinear, sigmoid, softmax_rows, layer_norm, transpose, Tensor,
};

// ── parameter registry ──────────────────────────────────────────────────

/// Named parameters in construction order. Frozen tensors are registered
/// too (they are part of the model and of every checkpoint); only entries
/// whose tensor requires a gradient are handed to the optimizer.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn register(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn all(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

/// Builder that seeds every tensor from a per-name RNG split, so
/// initialization does not depend on construction order.
pub struct Init<'a> {
    pub set: &'a mut ParamSet,
    pub rng: Rng,
}

impl<'a> Init<'a> {
    pub fn new(set: &'a mut ParamSet, rng: Rng) -> Self {
        Init { set, rng }
    }

    fn draw(&self, name: &str, dims: &[usize], sigma: f64) -> Vec<f32> {
        let mut r = self.rng.split(name);
        let n: usize = dims.iter().product();
        (0..n).map(|_| (r.normal() * sigma) as f32).collect()
    }

    pub fn param(&mut self, name: &str, dims: Vec<usize>, sigma: f64) -> Tensor {
        let data = self.draw(name, &dims, sigma);
        let t = Tensor::param(dims, data);
        self.set.register(name, t.clone());
        t
    }

    pub fn param_zeros(&mut self, name: &str, dims: Vec<usize>) -> Tensor {
        let n: usize = dims.iter().product();
        let t = Tensor::param(dims, vec![0.0; n]);
        self.set.register(name, t.clone());
        t
    }

    pub fn param_full(&mut self, name: &str, dims: Vec<usize>, v: f32) -> Tensor {
        let n: usize = dims.iter().product();
        let t = Tensor::param(dims, vec![v; n]);
        self.set.register(name, t.clone());
        t
    }

    /// Frozen weight: registered and checkpointed, never optimized.
    pub fn frozen(&mut self, name: &str, dims: Vec<usize>, sigma: f64) -> Tensor {
        let data = self.draw(name, &dims, sigma);
        let t = Tensor::constant(dims, data);
        self.set.register(name, t.clone());
        t
    }

    pub fn frozen_full(&mut self, name: &str, dims: Vec<usize>, v: f32) -> Tensor {
        let n: usize = dims.iter().product();
        let t = Tensor::constant(dims, vec![v; n]);
        self.set.register(name, t.clone());
        t
    }
}

// ── projections ─────────────────────────────────────────────────────────

/// Low-rank adapted projection: frozen base plus (alpha/r)·(x·A)·B with B
/// zero-initialized, so the adapted layer starts exactly at the base.
pub struct LoraLinear {
    pub frozen: Tensor, // [in, out]
    pub a: Tensor,      // [in, r]
    pub b: Tensor,      // [r, out]
    pub scale: f32,     // alpha / r
}

impl LoraLinear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let base = matmul(x, &self.frozen)?;
        let delta = matmul(&matmul(x, &self.a)?, &self.b)?;
        add(&base, &mul_scalar(&delta, self.scale))
    }

    /// Base path only; what the layer computed before any adaptation.
    pub fn forward_base(&self, x: &Tensor) -> Result<Tensor> {
        matmul(x, &self.frozen)
    }
}

pub enum Proj {
    Dense(Tensor), // [in, out]
    Lora(LoraLinear),
}

impl Proj {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Proj::Dense(w) => matmul(x, w),
            Proj::Lora(l) => l.forward(x),
        }
    }

    fn forward_mode(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        match self {
            Proj::Dense(w) => matmul(x, w),
            Proj::Lora(l) if adapters => l.forward(x),
            Proj::Lora(l) => l.forward_base(x),
        }
    }
}

pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias, 1e-5)
    }
}

// ── attention ───────────────────────────────────────────────────────────

/// How the residual term is taken. `Input` adds the block input (the
/// stable form used throughout the model); `Value` adds the projected
/// values, the form the memory-attention equations print literally.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ResidualKind {
    Input,
    Value,
}

pub struct AttentionBlock {
    pub wq: Proj,
    pub wk: Proj,
    pub wv: Proj,
    pub wo: Proj,
    /// Pre-norm on the query-side input; None disables normalization.
    pub ln: Option<LayerNorm>,
    pub d: usize,
    pub residual: ResidualKind,
}

impl AttentionBlock {
    fn attend(&self, q_in: &Tensor, kv_in: &Tensor, adapters: bool) -> Result<(Tensor, Tensor)> {
        let qx = match &self.ln {
            Some(ln) => ln.forward(q_in)?,
            None => q_in.clone(),
        };
        let q = self.wq.forward_mode(&qx, adapters)?;
        let k = self.wk.forward_mode(kv_in, adapters)?;
        let v = self.wv.forward_mode(kv_in, adapters)?;
        let scores = mul_scalar(&matmul_nt(&q, &k)?, 1.0 / (self.d as f32).sqrt());
        let attn = softmax_rows(&scores)?;
        let ctx = matmul(&attn, &v)?;
        let proj = self.wo.forward_mode(&ctx, adapters)?;
        Ok((proj, v))
    }

    pub fn self_attention(&self, x: &Tensor) -> Result<Tensor> {
        self.self_attention_mode(x, true)
    }

    pub(crate) fn self_attention_mode(&self, x: &Tensor, adapters: bool) -> Result<Tensor> {
        let (proj, v) = self.attend(x, x, adapters)?;
        match self.residual {
            ResidualKind::Input => add(&proj, x),
            ResidualKind::Value => add(&proj, &v),
        }
    }

    /// Queries keep their token count; keys/values come from `memory`.
    pub fn cross_attention(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        if memory.dims()[0] == 0 {
            return Err(Error::EmptyMemory);
        }
        let (proj, v) = self.attend(queries, memory, true)?;
        match self.residual {
            ResidualKind::Input => add(&proj, queries),
            ResidualKind::Value => {
                if v.dims() != queries.dims() {
                    return Err(Error::Contract(format!(
                        "value residual needs matching token counts, got {:?} vs {:?}",
                        queries.dims(),
                        v.dims()
                    )));
                }
                add(&proj, &v)
            }
        }
    }
}

// ── positional encoding ─────────────────────────────────────────────────

/// Fixed sinusoidal encoding of a normalized (y, x) position into `c`
/// dims (groups of sin/cos at geometric frequencies; c must be a
/// multiple of 4).
pub fn posenc(y: f64, x: f64, c: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; c];
    let quads = c / 4;
    for q in 0..quads {
        let f = std::f64::consts::TAU * (1 << q) as f64;
        v[4 * q] = (f * y).sin() as f32;
        v[4 * q + 1] = (f * y).cos() as f32;
        v[4 * q + 2] = (f * x).sin() as f32;
        v[4 * q + 3] = (f * x).cos() as f32;
    }
    v
}

fn norm_coord(i: usize, extent: usize) -> f64 {
    if extent > 1 {
        i as f64 / (extent - 1) as f64
    } else {
        0.5
    }
}

pub fn posenc_grid(h: usize, w: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            data.extend(posenc(norm_coord(y, h), norm_coord(x, w), c));
        }
    }
    Tensor::constant(vec![h * w, c], data)
}

// ── encoder ─────────────────────────────────────────────────────────────

/// Token grid plus provenance: the stem activations feed the final
/// decoder's skip path, and the image extents pin the decode resolution.
#[derive(Debug)]
pub struct FeatureMap {
    pub tokens: Tensor, // [h·w, C]
    pub stem: Tensor,   // [h·w, C]
    pub grid: (usize, usize),
    pub image: (usize, usize),
}

impl FeatureMap {
    pub fn with_tokens(&self, tokens: Tensor) -> FeatureMap {
        FeatureMap {
            tokens,
            stem: self.stem.clone(),
            grid: self.grid,
            image: self.image,
        }
    }

    /// Spatial mean of the token grid, read without touching the tape.
    pub fn pooled(&self) -> Vec<f32> {
        pooled_mean(&self.tokens)
    }
}

pub fn pooled_mean(tokens: &Tensor) -> Vec<f32> {
    let dims = tokens.dims();
    let (n, c) = (dims[0], dims[1]);
    let d = tokens.data();
    let mut out = vec![0.0f64; c];
    for i in 0..n {
        for j in 0..c {
            out[j] += d[i * c + j] as f64;
        }
    }
    out.iter().map(|v| (*v / n as f64) as f32).collect()
}

/// Patch-embedding encoder with frozen weights and trainable low-rank
/// adapters in every projection. Output grid is input extents / patch.
pub struct Encoder {
    pub patch_w: Tensor, // frozen [Cin·p·p, C]
    pub patch_b: Tensor, // frozen [C]
    pub blocks: Vec<AttentionBlock>,
    pub patch: usize,
    pub dim: usize,
    pub in_channels: usize,
}

impl Encoder {
    pub fn forward(&self, image: &Tensor) -> Result<FeatureMap> {
        self.forward_mode(image, true)
    }

    /// Adapter-free forward; used for retrieval embeddings so support
    /// ranking stays fixed while the adapters train.
    pub fn forward_frozen(&self, image: &Tensor) -> Result<FeatureMap> {
        self.forward_mode(image, false)
    }

    fn forward_mode(&self, image: &Tensor, adapters: bool) -> Result<FeatureMap> {
        let dims = image.dims().to_vec();
        if dims.len() != 3 || dims[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "encoder: expected [{}, H, W] image, got {:?}",
                self.in_channels, dims
            )));
        }
        let (h, w) = (dims[1], dims[2]);
        let tokens = patchify(image, self.patch)?;
        let x = matmul(&tokens, &self.patch_w)?;
        let x = add_bias_cols(&x, &self.patch_b)?;
        let (gh, gw) = (h / self.patch, w / self.patch);
        let stem = add(&x, &posenc_grid(gh, gw, self.dim))?;
        let mut x = stem.clone();
        for blk in &self.blocks {
            x = blk.self_attention_mode(&x, adapters)?;
        }
        Ok(FeatureMap {
            tokens: x,
            stem,
            grid: (gh, gw),
            image: (h, w),
        })
    }
}

// ── mask downsampler φ ──────────────────────────────────────────────────

/// Strided conv stack taking a 1×H×W map to the encoder's token grid.
pub struct MaskDownsampler {
    pub stages: Vec<(Tensor, Tensor)>, // k3 s2 convs
}

impl MaskDownsampler {
    /// Returns mask features in token layout [h·w, C].
    pub fn forward(&self, mask: &Tensor) -> Result<Tensor> {
        let dims = mask.dims();
        if dims.len() != 3 || dims[0] != 1 {
            return Err(Error::Shape(format!(
                "mask downsampler: expected [1, H, W], got {dims:?}"
            )));
        }
        let mut x = mask.clone();
        let last = self.stages.len() - 1;
        for (i, (w, b)) in self.stages.iter().enumerate() {
            x = conv2d(&x, w, Some(b), 3, 2)?;
            if i < last {
                x = relu(&x);
            }
        }
        let d = x.dims().to_vec();
        let grid = x.reshape(vec![d[0], d[1] * d[2]])?;
        transpose(&grid)
    }
}

// ── prompt encoder ──────────────────────────────────────────────────────

/// Inclusive pixel-coordinate box in image space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn full(h: usize, w: usize) -> BBox {
        BBox { r0: 0, c0: 0, r1: h - 1, c1: w - 1 }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.r0 <= self.r1 && self.r1 < h && self.c0 <= self.c1 && self.c1 < w {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "box {self:?} out of bounds for {h}x{w}"
            )))
        }
    }
}

/// Maps a box to two corner tokens, or no prompt to one learned token.
pub struct PromptEncoder {
    pub none: Tensor,    // [1, C]
    pub corners: Tensor, // [2, C]
    pub dim: usize,
}

impl PromptEncoder {
    pub fn encode_none(&self) -> Tensor {
        self.none.clone()
    }

    pub fn encode_box(&self, b: &BBox, image: (usize, usize)) -> Result<Tensor> {
        b.validate(image.0, image.1)?;
        let mut pe = Vec::with_capacity(2 * self.dim);
        pe.extend(posenc(
            norm_coord(b.r0, image.0),
            norm_coord(b.c0, image.1),
            self.dim,
        ));
        pe.extend(posenc(
            norm_coord(b.r1, image.0),
            norm_coord(b.c1, image.1),
            self.dim,
        ));
        add(&self.corners, &Tensor::constant(vec![2, self.dim], pe))
    }
}

// ── mask decoder ────────────────────────────────────────────────────────

/// Prompt-conditioned decoder: cross-attends feature tokens to the prompt
/// tokens, then upsamples back to image resolution in ×2 stages (one per
/// halving the patch embedding performed). The final-stage decoder also
/// merges the patch-stem features before upsampling.
pub struct MaskDecoder {
    pub ca: AttentionBlock,
    pub stem_proj: Option<(Tensor, Tensor)>, // 1×1 conv on [stem ; tokens]
    pub ups: Vec<(Tensor, Tensor)>,          // k3 s1 convs after each ×2
    pub head: (Tensor, Tensor),              // 1×1 conv to class logits
    pub out_channels: usize,
}

impl MaskDecoder {
    /// Logits at full image resolution, [out_channels, H, W].
    pub fn decode(&self, fm: &FeatureMap, prompt: &Tensor) -> Result<Tensor> {
        let np = prompt.dims()[0];
        if np != 1 && np != 2 {
            return Err(Error::Contract(format!(
                "decoder: prompt token count must be 1 or 2, got {np}"
            )));
        }
        let x = self.ca.cross_attention(&fm.tokens, prompt)?;
        let (gh, gw) = fm.grid;
        let c = x.dims()[1];
        let mut grid = transpose(&x)?.reshape(vec![c, gh, gw])?;
        if let Some((w, b)) = &self.stem_proj {
            let stem_grid = transpose(&fm.stem)?;
            let flat = grid.reshape(vec![c, gh * gw])?;
            let cat = concat_rows(&[flat, stem_grid])?;
            let merged = add_bias_rows(&matmul(w, &cat)?, b)?;
            grid = relu(&merged).reshape(vec![c, gh, gw])?;
        }
        let (mut ch, mut cw) = (gh, gw);
        let mut x = grid;
        for (w, b) in &self.ups {
            ch *= 2;
            cw *= 2;
            let up = resize_bilinear(&x, ch, cw)?;
            x = relu(&conv2d(&up, w, Some(b), 3, 1)?);
        }
        if (ch, cw) != fm.image {
            return Err(Error::Contract(format!(
                "decoder: upsampled to {ch}x{cw} but image is {:?}",
                fm.image
            )));
        }
        conv2d(&x, &self.head.0, Some(&self.head.1), 1, 1)
    }

    /// Probability maps: logistic over the decoded logits.
    pub fn decode_probs(&self, fm: &FeatureMap, prompt: &Tensor) -> Result<Tensor> {
        Ok(sigmoid(&self.decode(fm, prompt)?))
    }
}
