//! Composite loss, Adam, the episode training loop for 2D and 3D
//! corpora, evaluation, and the metrics log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::{slice_image, Dataset, Episode, Split, SupportPool};
use crate::error::{Error, Result};
use crate::mem3d::propagate_volume;
use crate::model::{forward_slice, ComponentMode, Model, ModelConfig, SliceOutput};
use crate::pmg::{self, encode_support_memory, rank_support, SupportMemorySet};
use crate::rng::Rng;
use crate::sgt;
use crate::tensor::{add, matmul, mul_scalar, patchify, Tensor};

pub const CSV_HEADER: &str =
    "step,split,class,dice,iou,loss_total,loss_dice,loss_ce,loss_kl,fallback_box_count";

const CLAMP: f64 = 1e-6;

// ── loss functions ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub dice: f32,
    pub ce: f32,
    pub kl: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { dice: 1.0, ce: 1.0, kl: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.dice, self.ce, self.kl];
        if ws.iter().any(|w| *w < 0.0) || ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn class_extents(t: &Tensor) -> (usize, usize) {
    let dims = t.dims();
    if dims.len() >= 2 {
        (dims[0], dims[1..].iter().product())
    } else {
        (1, t.numel())
    }
}

/// Soft Dice loss, averaged over class channels:
/// 1 − (2·Σ p·t + ε)/(Σp + Σt + ε), ε = 1e-6.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_dims(pred, target, "dice_loss")?;
    let (k, plane) = class_extents(pred);
    let eps = 1e-6f64;
    let (pd, td) = (pred.data(), target.data());
    let mut per_class = Vec::with_capacity(k);
    let mut total = 0.0f64;
    for c in 0..k {
        let p = &pd[c * plane..(c + 1) * plane];
        let t = &td[c * plane..(c + 1) * plane];
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut tsum = 0.0f64;
        for (pv, tv) in p.iter().zip(t) {
            inter += *pv as f64 * *tv as f64;
            psum += *pv as f64;
            tsum += *tv as f64;
        }
        let num = 2.0 * inter + eps;
        let den = psum + tsum + eps;
        per_class.push((num, den));
        total += 1.0 - num / den;
    }
    drop(pd);
    drop(td);
    let loss = total / k as f64;
    let (pp, pt) = (pred.clone(), target.clone());
    Ok(Tensor::scalar_op(
        loss,
        vec![pred.clone(), target.clone()],
        Box::new(move |g: &[f32]| {
            if !pp.requires_grad() {
                return;
            }
            let gv = g[0] as f64 / k as f64;
            let td = pt.data();
            pp.accumulate_grad_with(|buf| {
                for (c, (num, den)) in per_class.iter().enumerate() {
                    let t = &td[c * plane..(c + 1) * plane];
                    let b = &mut buf[c * plane..(c + 1) * plane];
                    for (bv, tv) in b.iter_mut().zip(t) {
                        // d(1 − num/den)/dp = −(2t·den − num)/den²
                        let d = -(2.0 * *tv as f64 * den - num) / (den * den);
                        *bv += (gv * d) as f32;
                    }
                }
            });
        }),
    ))
}

/// Mean binary cross entropy over clamped probabilities.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_dims(pred, target, "bce_loss")?;
    let n = pred.numel();
    let (pd, td) = (pred.data(), target.data());
    let mut total = 0.0f64;
    for (p, t) in pd.iter().zip(td.iter()) {
        let p = (*p as f64).clamp(CLAMP, 1.0 - CLAMP);
        let t = *t as f64;
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    drop(pd);
    drop(td);
    let loss = total / n as f64;
    let (pp, pt) = (pred.clone(), target.clone());
    Ok(Tensor::scalar_op(
        loss,
        vec![pred.clone(), target.clone()],
        Box::new(move |g: &[f32]| {
            if !pp.requires_grad() {
                return;
            }
            let gv = g[0] as f64 / n as f64;
            let td = pt.data();
            let pd = pp.to_vec();
            pp.accumulate_grad_with(|buf| {
                for ((bv, pv), tv) in buf.iter_mut().zip(&pd).zip(td.iter()) {
                    let p = *pv as f64;
                    if !(CLAMP..=1.0 - CLAMP).contains(&p) {
                        continue; // clamped region: flat
                    }
                    let d = (p - *tv as f64) / (p * (1.0 - p));
                    *bv += (gv * d) as f32;
                }
            });
        }),
    ))
}

/// Mean pixelwise Bernoulli KL(final ‖ pseudo). The final prediction is a
/// constant target here — no gradient reaches it — so this term steers
/// the pseudo-mask branch toward the final prediction.
pub fn kl_loss(pseudo: &Tensor, final_probs: &Tensor) -> Result<Tensor> {
    check_same_dims(pseudo, final_probs, "kl_loss")?;
    let n = pseudo.numel();
    let fd: Vec<f64> = final_probs
        .data()
        .iter()
        .map(|v| (*v as f64).clamp(CLAMP, 1.0 - CLAMP))
        .collect();
    let pd = pseudo.data();
    let mut total = 0.0f64;
    for (p, f) in pd.iter().zip(&fd) {
        let p = (*p as f64).clamp(CLAMP, 1.0 - CLAMP);
        total += f * (f / p).ln() + (1.0 - f) * ((1.0 - f) / (1.0 - p)).ln();
    }
    drop(pd);
    let loss = total / n as f64;
    let pp = pseudo.clone();
    Ok(Tensor::scalar_op(
        loss,
        vec![pseudo.clone()], // final is deliberately not a parent
        Box::new(move |g: &[f32]| {
            if !pp.requires_grad() {
                return;
            }
            let gv = g[0] as f64 / n as f64;
            let pd = pp.to_vec();
            pp.accumulate_grad_with(|buf| {
                for ((bv, pv), f) in buf.iter_mut().zip(&pd).zip(&fd) {
                    let p = *pv as f64;
                    if !(CLAMP..=1.0 - CLAMP).contains(&p) {
                        continue;
                    }
                    let d = (p - f) / (p * (1.0 - p));
                    *bv += (gv * d) as f32;
                }
            });
        }),
    ))
}

/// Mean squared error (used by the auxiliary reconstruction pretraining).
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_dims(pred, target, "mse_loss")?;
    let n = pred.numel();
    let (pd, td) = (pred.data(), target.data());
    let total: f64 = pd
        .iter()
        .zip(td.iter())
        .map(|(p, t)| ((*p as f64) - (*t as f64)).powi(2))
        .sum();
    drop(pd);
    drop(td);
    let (pp, pt) = (pred.clone(), target.clone());
    Ok(Tensor::scalar_op(
        total / n as f64,
        vec![pred.clone(), target.clone()],
        Box::new(move |g: &[f32]| {
            if !pp.requires_grad() {
                return;
            }
            let gv = g[0] as f64 * 2.0 / n as f64;
            let td = pt.data();
            let pd = pp.to_vec();
            pp.accumulate_grad_with(|buf| {
                for ((bv, pv), tv) in buf.iter_mut().zip(&pd).zip(td.iter()) {
                    *bv += (gv * (*pv as f64 - *tv as f64)) as f32;
                }
            });
        }),
    ))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
    pub kl: f64,
}

/// Weighted sum of the three terms. The KL term is skipped when no live
/// pseudo branch exists (component ablation) or its weight is zero.
pub fn total_loss(
    pred: &Tensor,
    pseudo: Option<&Tensor>,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, LossParts)> {
    cfg.validate()?;
    let d = dice_loss(pred, target)?;
    let c = bce_loss(pred, target)?;
    let mut parts = LossParts {
        dice: d.item_f64(),
        ce: c.item_f64(),
        ..Default::default()
    };
    let mut total = add(&mul_scalar(&d, cfg.dice), &mul_scalar(&c, cfg.ce))?;
    if let Some(ps) = pseudo {
        if cfg.kl > 0.0 {
            let k = kl_loss(ps, &pred.detach())?;
            parts.kl = k.item_f64();
            total = add(&total, &mul_scalar(&k, cfg.kl))?;
        }
    }
    parts.total = total.item_f64();
    Ok((total, parts))
}

// ── optimizer ───────────────────────────────────────────────────────────

pub struct Adam {
    pub lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(trainable: &[Tensor], lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: trainable.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: trainable.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update; returns the global L2 gradient norm. Gradients are
    /// consumed (zeroed) afterwards by the caller.
    pub fn step(&mut self, trainable: &[Tensor]) -> f64 {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut norm_sq = 0.0f64;
        for (i, t) in trainable.iter().enumerate() {
            let grad = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            for g in &grad {
                norm_sq += (*g as f64).powi(2);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, g) in grad.iter().enumerate() {
                let g = *g as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
            }
            if self.lr != 0.0 {
                let lr = self.lr as f64;
                t.update_data(|j, val| {
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    *val = (*val as f64 - lr * mh / (vh.sqrt() + self.eps)) as f32;
                });
            }
        }
        norm_sq.sqrt()
    }
}

// ── metrics ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct HardCounts {
    pub intersection: u64,
    pub union: u64,
}

impl HardCounts {
    pub fn add_maps(&mut self, pred: &[f32], target: &[f32]) {
        for (p, t) in pred.iter().zip(target) {
            let hp = *p > 0.5;
            let ht = *t > 0.5;
            if hp && ht {
                self.intersection += 1;
            }
            if hp || ht {
                self.union += 1;
            }
        }
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0 // both empty: perfect agreement
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// Derived from the reported IoU so the dice = 2·iou/(1+iou) identity
    /// holds exactly for every reported pair.
    pub fn dice(&self) -> f64 {
        let i = self.iou();
        2.0 * i / (1.0 + i)
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_class: Vec<(f64, f64)>, // (dice, iou)
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub samples: usize,
}

// ── episode assembly ────────────────────────────────────────────────────

/// Frozen-encoder pooled embeddings for retrieval; computed once, since
/// the base weights never move.
pub struct RetrievalIndex {
    pub pool_embeds: Vec<Vec<f32>>,
}

impl RetrievalIndex {
    pub fn build(model: &Model, pool: &SupportPool) -> Result<RetrievalIndex> {
        let mut pool_embeds = Vec::with_capacity(pool.items.len());
        for item in &pool.items {
            let fm = model.encoder.forward_frozen(&item.image)?;
            pool_embeds.push(fm.pooled());
        }
        Ok(RetrievalIndex { pool_embeds })
    }

    pub fn query_embed(&self, model: &Model, image: &Tensor) -> Result<Vec<f32>> {
        // volumes embed as the mean of their slice embeddings
        let dims = image.dims().to_vec();
        if dims.len() == 4 {
            let d = dims[0];
            let mut acc = vec![0.0f64; model.cfg.dim];
            for s in 0..d {
                let fm = model.encoder.forward_frozen(&slice_image(image, s)?)?;
                for (a, v) in acc.iter_mut().zip(fm.pooled()) {
                    *a += v as f64;
                }
            }
            Ok(acc.iter().map(|v| (*v / d as f64) as f32).collect())
        } else {
            Ok(model.encoder.forward_frozen(image)?.pooled())
        }
    }
}

pub fn build_episode(
    ds: &Dataset,
    pool: &SupportPool,
    index: &RetrievalIndex,
    model: &Model,
    query_idx: usize,
    k: usize,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("support.k must be >= 1".into()));
    }
    if !pool.duplicated && k > pool.items.len() {
        return Err(Error::Config(format!(
            "support.k={k} exceeds the support pool ({} items)",
            pool.items.len()
        )));
    }
    let image = ds.image(query_idx)?;
    let mask = ds.mask(query_idx)?;
    let qe = index.query_embed(model, &image)?;
    let support = rank_support(&qe, &index.pool_embeds, k)?;
    Ok(Episode { query_idx, query_image: image, query_mask: mask, support })
}

/// Run the trainable support encoder over the selected pool items.
pub fn encode_support_set(
    model: &Model,
    pool: &SupportPool,
    picks: &[usize],
) -> Result<SupportMemorySet> {
    let mut entries = Vec::with_capacity(picks.len());
    for &p in picks {
        let item = &pool.items[p];
        let fm = model.encoder.forward(&item.image)?;
        let fg = pmg::foreground_channel(&item.mask)?;
        entries.push(encode_support_memory(model, &fm, &fg)?);
    }
    Ok(SupportMemorySet::new(entries))
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub support_k: usize,
    pub bank_capacity: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub mode: ComponentMode,
    /// None: train on the query split against the support split.
    /// Some(s): duplicated-support regime with a pool of s copies.
    pub duplicated_support: Option<usize>,
    /// Evaluate the test split every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            support_k: 4,
            bank_capacity: 4,
            loss: LossConfig::default(),
            seed: 42,
            mode: ComponentMode::Full,
            duplicated_support: None,
            eval_every: 1,
        }
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub best_dice: f64,
    pub best_step: usize,
    pub final_eval: EvalReport,
    pub rows: usize,
    pub fallback_total: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

struct EpisodeLoss {
    loss: Tensor,
    parts: LossParts,
    dice_hard: f64,
    iou_hard: f64,
    fallbacks: u64,
}

fn episode_forward(
    model: &Model,
    ds: &Dataset,
    pool: &SupportPool,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<EpisodeLoss> {
    let loss_cfg = cfg.loss;
    let support = if cfg.mode == ComponentMode::PmgOff {
        SupportMemorySet::default()
    } else {
        encode_support_set(model, pool, &episode.support)?
    };
    let mut fallbacks = 0u64;
    let mut counts = HardCounts::default();
    let (loss, parts) = if ds.is_volumetric() {
        let vout = propagate_volume(
            model,
            &episode.query_image,
            &support,
            cfg.bank_capacity,
            cfg.mode,
        )?;
        let d = vout.slices.len();
        let mut total: Option<Tensor> = None;
        let mut parts = LossParts::default();
        for (s, out) in vout.slices.iter().enumerate() {
            let target = slice_image(&episode.query_mask, s)?;
            fallbacks += out.boxes.iter().filter(|(_, f)| *f).count() as u64;
            counts.add_maps(&out.final_probs.data(), &target.data());
            let pseudo = out.pseudo_live.then_some(&out.pseudo);
            let (l, p) = total_loss(&out.final_probs, pseudo, &target, &loss_cfg)?;
            parts.total += p.total / d as f64;
            parts.dice += p.dice / d as f64;
            parts.ce += p.ce / d as f64;
            parts.kl += p.kl / d as f64;
            total = Some(match total {
                None => l,
                Some(acc) => add(&acc, &l)?,
            });
        }
        (mul_scalar(&total.unwrap(), 1.0 / d as f32), parts)
    } else {
        let feats = model.encoder.forward(&episode.query_image)?;
        let out: SliceOutput = forward_slice(model, &feats, &support, cfg.mode)?;
        fallbacks += out.boxes.iter().filter(|(_, f)| *f).count() as u64;
        counts.add_maps(&out.final_probs.data(), &episode.query_mask.data());
        let pseudo = out.pseudo_live.then_some(&out.pseudo);
        total_loss(&out.final_probs, pseudo, &episode.query_mask, &loss_cfg)?
    };
    Ok(EpisodeLoss {
        loss,
        parts,
        dice_hard: counts.dice(),
        iou_hard: counts.iou(),
        fallbacks,
    })
}

fn fmt_row(
    step: usize,
    split: &str,
    class: &str,
    dice: Option<f64>,
    iou: Option<f64>,
    parts: Option<&LossParts>,
    fallbacks: u64,
) -> String {
    let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let (lt, ld, lc, lk) = match parts {
        Some(p) => (
            format!("{:.6}", p.total),
            format!("{:.6}", p.dice),
            format!("{:.6}", p.ce),
            format!("{:.6}", p.kl),
        ),
        None => (String::new(), String::new(), String::new(), String::new()),
    };
    format!(
        "{step},{split},{class},{},{},{lt},{ld},{lc},{lk},{fallbacks}",
        f(dice),
        f(iou)
    )
}

/// Evaluate a split. Hard-mask counts pool over the whole split (for
/// volumes, slices pool into their volume and volumes into the split),
/// per class for the class rows and across classes for the mean row, so
/// dice = 2·iou/(1+iou) holds exactly for every reported pair. Pure:
/// repeated calls give identical numbers.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: Split,
    pool: &SupportPool,
    index: &RetrievalIndex,
    k: usize,
    bank_capacity: usize,
    mode: ComponentMode,
) -> Result<EvalReport> {
    let ids = ds.indices(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("split {split} is empty", split = split.tag())));
    }
    let classes = ds.meta.classes;
    // support entries are a pure function of the weights: encode once
    let all_picks: Vec<usize> = (0..pool.items.len()).collect();
    let cached = if mode == ComponentMode::PmgOff {
        SupportMemorySet::default()
    } else {
        encode_support_set(model, pool, &all_picks)?
    };
    let mut counts = vec![HardCounts::default(); classes];
    for &idx in &ids {
        let image = ds.image(idx)?;
        let mask = ds.mask(idx)?;
        let support = if mode == ComponentMode::PmgOff {
            SupportMemorySet::default()
        } else {
            let qe = index.query_embed(model, &image)?;
            let picks = rank_support(&qe, &index.pool_embeds, k)?;
            SupportMemorySet::new(picks.iter().map(|&p| cached.entries[p].clone()).collect())
        };
        if ds.is_volumetric() {
            let vout = propagate_volume(model, &image, &support, bank_capacity, mode)?;
            for (s, out) in vout.slices.iter().enumerate() {
                let target = slice_image(&mask, s)?;
                accumulate_class_counts(&mut counts, &out.final_probs, &target);
            }
        } else {
            let feats = model.encoder.forward(&image)?;
            let out = forward_slice(model, &feats, &support, mode)?;
            accumulate_class_counts(&mut counts, &out.final_probs, &mask);
        }
    }
    let per_class: Vec<(f64, f64)> = counts.iter().map(|hc| (hc.dice(), hc.iou())).collect();
    let pooled = counts.iter().fold(HardCounts::default(), |mut acc, hc| {
        acc.intersection += hc.intersection;
        acc.union += hc.union;
        acc
    });
    let (mean_dice, mean_iou) = (pooled.dice(), pooled.iou());
    Ok(EvalReport { per_class, mean_dice, mean_iou, samples: ids.len() })
}

fn accumulate_class_counts(counts: &mut [HardCounts], pred: &Tensor, target: &Tensor) {
    let classes = counts.len();
    let plane = pred.numel() / classes;
    let (pd, td) = (pred.data(), target.data());
    for (c, hc) in counts.iter_mut().enumerate() {
        hc.add_maps(&pd[c * plane..(c + 1) * plane], &td[c * plane..(c + 1) * plane]);
    }
}

/// Full training run: episodes over the query split, Adam updates,
/// per-epoch test evaluation, best checkpoint and a metrics CSV under
/// `out`.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<TrainReport> {
    cfg.loss.validate()?;
    if cfg.bank_capacity == 0 {
        return Err(Error::Config("bank.capacity must be >= 1".into()));
    }
    let mut mc = model_cfg.clone();
    mc.classes = ds.meta.classes;
    let model = Model::new(mc, cfg.seed)?;
    let pool = match cfg.duplicated_support {
        Some(s) => SupportPool::duplicated(ds, s, cfg.seed)?,
        None => SupportPool::from_dataset(ds)?,
    };
    let index = RetrievalIndex::build(&model, &pool)?;

    let mut queries = ds.indices(Split::Query);
    if cfg.duplicated_support.is_some() {
        // duplicated regime trains on the whole training distribution
        queries.extend(ds.indices(Split::Support));
        queries.sort_unstable();
    }
    if queries.is_empty() {
        return Err(Error::Config("no query samples to train on".into()));
    }

    let trainable: Vec<Tensor> =
        model.params.trainable().map(|(_, t)| t.clone()).collect();
    let mut adam = Adam::new(&trainable, cfg.lr);
    let root_rng = Rng::new(cfg.seed).split("train");

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut fallback_total = 0u64;
    let mut last_grad_norm = 0.0f64;
    let mut rows = 0usize;
    let ckpt_dir = out.join("best.ckpt");

    'outer: loop {
        let mut order = queries.clone();
        root_rng.split_index("epoch", epoch).shuffle(&mut order);
        let mut epoch_fallbacks = 0u64;
        for &qidx in &order {
            if step >= cfg.steps {
                break 'outer;
            }
            step += 1;
            let episode = build_episode(ds, &pool, &index, &model, qidx, cfg.support_k)?;
            let ep = episode_forward(&model, ds, &pool, &episode, cfg).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "{m}; aborted at step {step} (lr={}, last grad norm {last_grad_norm:.3e})",
                    cfg.lr
                )),
                other => other,
            })?;
            let loss_val = ep.loss.item_f64();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at step {step} (lr={}, last grad norm {last_grad_norm:.3e})",
                    cfg.lr
                )));
            }
            ep.loss.backward()?;
            last_grad_norm = adam.step(&trainable);
            model.params.zero_grads();
            epoch_fallbacks += ep.fallbacks;
            fallback_total += ep.fallbacks;
            let _ = writeln!(
                csv,
                "{}",
                fmt_row(
                    step,
                    "train",
                    "mean",
                    Some(ep.dice_hard),
                    Some(ep.iou_hard),
                    Some(&ep.parts),
                    epoch_fallbacks,
                )
            );
            rows += 1;
        }
        epoch += 1;
        if epoch % cfg.eval_every as u64 != 0 {
            continue;
        }
        // per-epoch test evaluation
        let report = evaluate(
            &model,
            ds,
            Split::Test,
            &pool,
            &index,
            cfg.support_k,
            cfg.bank_capacity,
            cfg.mode,
        )?;
        for (c, (d, i)) in report.per_class.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{}",
                fmt_row(step, "test", &c.to_string(), Some(*d), Some(*i), None, epoch_fallbacks)
            );
            rows += 1;
        }
        let _ = writeln!(
            csv,
            "{}",
            fmt_row(
                step,
                "test",
                "mean",
                Some(report.mean_dice),
                Some(report.mean_iou),
                None,
                epoch_fallbacks
            )
        );
        rows += 1;
        if report.mean_dice > best_dice {
            best_dice = report.mean_dice;
            best_step = step;
            checkpoint::save(&ckpt_dir, &model.params)?;
        }
    }

    if best_dice == f64::NEG_INFINITY {
        // the run ended before any epoch boundary: evaluate once so a
        // best checkpoint always exists
        let report = evaluate(
            &model,
            ds,
            Split::Test,
            &pool,
            &index,
            cfg.support_k,
            cfg.bank_capacity,
            cfg.mode,
        )?;
        let _ = writeln!(
            csv,
            "{}",
            fmt_row(step, "test", "mean", Some(report.mean_dice), Some(report.mean_iou), None, 0)
        );
        rows += 1;
        best_dice = report.mean_dice;
        best_step = step;
        checkpoint::save(&ckpt_dir, &model.params)?;
    }

    // final evaluation on the persisted best weights
    checkpoint::load(&ckpt_dir, &model.params)?;
    let final_eval = evaluate(
        &model,
        ds,
        Split::Test,
        &pool,
        &index,
        cfg.support_k,
        cfg.bank_capacity,
        cfg.mode,
    )?;
    let metrics = out.join("metrics.csv");
    sgt::write_bytes_atomic(&metrics, csv.as_bytes())?;
    Ok(TrainReport {
        best_dice,
        best_step,
        final_eval,
        rows,
        fallback_total,
        checkpoint: ckpt_dir,
        metrics,
    })
}

// ── auxiliary pretraining ───────────────────────────────────────────────

/// Patch-space autoencoding: a trainable twin of the encoder learns to
/// reconstruct images, and the learned base weights become the frozen
/// initialization of a segmentation model (the stand-in for starting
/// from released backbone weights instead of noise).
pub fn pretrain_encoder(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<(String, Vec<f32>)>> {
    use crate::nn::{AttentionBlock, LayerNorm, ParamSet, Proj, ResidualKind};
    let mut mc = model_cfg.clone();
    mc.classes = ds.meta.classes;
    mc.validate()?;
    let c = mc.dim;
    let pdim = mc.in_channels * mc.patch * mc.patch;
    let sp = 1.0 / (c as f64).sqrt();
    let mut params = ParamSet::default();
    let mut init = crate::nn::Init::new(&mut params, Rng::new(seed).split("pretrain"));
    let patch_w = init.param("enc.patch.w", vec![pdim, c], 1.0 / (pdim as f64).sqrt());
    let patch_b = init.param_zeros("enc.patch.b", vec![c]);
    let mut blocks = Vec::new();
    for i in 0..mc.blocks {
        blocks.push(AttentionBlock {
            ln: Some(LayerNorm {
                gain: init.param_full(&format!("enc.blk{i}.ln.g"), vec![c], 1.0),
                bias: init.param_zeros(&format!("enc.blk{i}.ln.b"), vec![c]),
            }),
            wq: Proj::Dense(init.param(&format!("enc.blk{i}.q.w"), vec![c, c], sp)),
            wk: Proj::Dense(init.param(&format!("enc.blk{i}.k.w"), vec![c, c], sp)),
            wv: Proj::Dense(init.param(&format!("enc.blk{i}.v.w"), vec![c, c], sp)),
            wo: Proj::Dense(init.param(&format!("enc.blk{i}.o.w"), vec![c, c], sp)),
            d: c,
            residual: ResidualKind::Input,
        });
    }
    let recon_w = init.param("recon.w", vec![c, pdim], sp);
    let recon_b = init.param_zeros("recon.b", vec![pdim]);
    drop(init);

    let trainable: Vec<Tensor> = params.trainable().map(|(_, t)| t.clone()).collect();
    let mut adam = Adam::new(&trainable, lr);
    let mut rng = Rng::new(seed).split("pretrain-order");
    let train_ids: Vec<usize> = ds
        .entries
        .iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| e.idx)
        .collect();
    for _step in 0..steps {
        let idx = train_ids[rng.below(train_ids.len())];
        let image = ds.image(idx)?;
        let image = if image.dims().len() == 4 {
            slice_image(&image, rng.below(image.dims()[0]))?
        } else {
            image
        };
        let patches = patchify(&image, mc.patch)?;
        let mut x = crate::tensor::add_bias_cols(&matmul(&patches, &patch_w)?, &patch_b)?;
        let (gh, gw) = (image.dims()[1] / mc.patch, image.dims()[2] / mc.patch);
        x = add(&x, &crate::nn::posenc_grid(gh, gw, c))?;
        for blk in &blocks {
            x = blk.self_attention(&x)?;
        }
        let recon = crate::tensor::add_bias_cols(&matmul(&x, &recon_w)?, &recon_b)?;
        let loss = mse_loss(&recon, &patches.detach())?;
        if !loss.item_f64().is_finite() {
            return Err(Error::Numerical("pretraining diverged".into()));
        }
        loss.backward()?;
        adam.step(&trainable);
        params.zero_grads();
    }
    // the twin's names mirror the segmentation model's frozen slots
    Ok(params
        .all()
        .iter()
        .filter(|(n, _)| n.starts_with("enc."))
        .map(|(n, t)| (n.clone(), t.to_vec()))
        .collect())
}

/// Install pretrained base weights into a model's frozen tensors.
pub fn load_pretrained(model: &Model, weights: &[(String, Vec<f32>)]) -> Result<()> {
    for (name, data) in weights {
        if let Some(t) = model.params.get(name) {
            if t.numel() != data.len() {
                return Err(Error::Shape(format!(
                    "pretained weight {name}: {} values for {} slots",
                    data.len(),
                    t.numel()
                )));
            }
            t.set_data(data);
        }
    }
    Ok(())
}
