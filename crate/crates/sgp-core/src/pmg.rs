//! Pseudo-mask generation: fuse support masks with support features into
//! memory entries, condition query features on them through memory
//! attention, and decode a prompt-free pseudo-mask.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{pooled_mean, FeatureMap};
use crate::tensor::{add, concat_rows, sigmoid, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MemorySource {
    Support,
    Volumetric,
}

/// Fused feature+mask token grid plus a pooled key for similarity scoring.
#[derive(Clone)]
pub struct MemoryEntry {
    pub tokens: Tensor, // [h·w, C]
    pub key: Vec<f32>,  // spatial mean of tokens
    pub source: MemorySource,
}

#[derive(Clone, Default)]
pub struct SupportMemorySet {
    pub entries: Vec<MemoryEntry>,
}

impl SupportMemorySet {
    pub fn new(entries: Vec<MemoryEntry>) -> Self {
        SupportMemorySet { entries }
    }

    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.tokens.dims()[0]).sum()
    }

    pub fn concat_tokens(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let parts: Vec<Tensor> = self.entries.iter().map(|e| e.tokens.clone()).collect();
        concat_rows(&parts)
    }
}

/// Reduce a possibly multi-class mask or prediction to the single
/// foreground channel the downsampler consumes (max over classes).
pub fn foreground_channel(mask: &Tensor) -> Result<Tensor> {
    let dims = mask.dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "foreground_channel: expected [K, H, W], got {dims:?}"
        )));
    }
    let (k, h, w) = (dims[0], dims[1], dims[2]);
    if k == 1 {
        return Ok(mask.clone());
    }
    // Non-differentiable reduction; memory building is detached from the
    // tape wherever multi-class predictions feed it.
    let d = mask.data();
    let mut out = vec![0.0f32; h * w];
    for c in 0..k {
        for (o, v) in out.iter_mut().zip(&d[c * h * w..(c + 1) * h * w]) {
            *o = o.max(*v);
        }
    }
    drop(d);
    Ok(Tensor::constant(vec![1, h, w], out))
}

fn build_entry(model: &Model, feat: &FeatureMap, map: &Tensor, source: MemorySource) -> Result<MemoryEntry> {
    let fg = foreground_channel(map)?;
    if fg.dims()[1] != feat.image.0 || fg.dims()[2] != feat.image.1 {
        return Err(Error::Shape(format!(
            "memory encoder: mask {:?} does not match image {:?}",
            map.dims(),
            feat.image
        )));
    }
    let mask_tokens = model.phi.forward(&fg)?;
    if mask_tokens.dims() != feat.tokens.dims() {
        return Err(Error::Contract(format!(
            "mask downsampler produced {:?}, feature grid is {:?}",
            mask_tokens.dims(),
            feat.tokens.dims()
        )));
    }
    let tokens = add(&mask_tokens, &feat.tokens)?;
    let key = pooled_mean(&tokens);
    Ok(MemoryEntry { tokens, key, source })
}

/// Support memory: downsampled mask added elementwise onto the features.
pub fn encode_support_memory(model: &Model, feat: &FeatureMap, mask: &Tensor) -> Result<MemoryEntry> {
    let d = mask.data();
    if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Param("support mask values must lie in [0, 1]".into()));
    }
    drop(d);
    build_entry(model, feat, mask, MemorySource::Support)
}

/// Volumetric memory: same fusion applied to a slice's own prediction.
pub fn encode_volumetric(model: &Model, feat: &FeatureMap, pred: &Tensor) -> Result<MemoryEntry> {
    build_entry(model, feat, pred, MemorySource::Volumetric)
}

/// Memory attention: self-attention over query tokens, then
/// cross-attention against every memory token.
pub fn memory_attend(model: &Model, memory: &SupportMemorySet, f_q: &FeatureMap) -> Result<FeatureMap> {
    let mem_tokens = memory.concat_tokens()?;
    let sa = model.mem_sa.self_attention(&f_q.tokens)?;
    let ca = model.mem_ca.cross_attention(&sa, &mem_tokens)?;
    Ok(f_q.with_tokens(ca))
}

/// Prompt-free decode of the conditioned features into per-class
/// probability maps at full image resolution.
pub fn generate_pseudo_mask(model: &Model, f_tilde: &FeatureMap) -> Result<Tensor> {
    let logits = model.dec_pseudo.decode(f_tilde, &model.prompt.encode_none())?;
    Ok(sigmoid(&logits))
}

// ── support ranking ─────────────────────────────────────────────────────

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Indices of the k most similar pool entries, ranked by cosine
/// similarity, ties broken toward the lower index. When the pool is
/// smaller than k, entries repeat cyclically in rank order (the
/// duplicated-support ablation regime).
pub fn rank_support(query: &[f32], pool: &[Vec<f32>], k: usize) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Config("support pool is empty".into()));
    }
    let mut scored: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine(query, e)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok((0..k).map(|j| scored[j % scored.len()].0).collect())
}
