//! Full model assembly and the per-slice forward pass shared by the 2D
//! pipeline and volumetric propagation (a depth-1 volume and a 2D image
//! run the exact same code path).

use crate::error::{Error, Result};
use crate::nn::{
    AttentionBlock, Encoder, FeatureMap, Init, LayerNorm, LoraLinear, MaskDecoder,
    MaskDownsampler, ParamSet, Proj, PromptEncoder, ResidualKind, BBox,
};
use crate::pma;
use crate::pmg::{self, SupportMemorySet};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub patch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub in_channels: usize,
    pub classes: usize,
    /// Pre-normalize query paths in memory attention and the decoders.
    pub pre_norm: bool,
    /// Use the literally printed value-residual in memory attention
    /// instead of the input residual. Comparison switch, off by default.
    pub literal_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            blocks: 2,
            patch: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            in_channels: 1,
            classes: 1,
            pre_norm: true,
            literal_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 || self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model.dim must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return Err(Error::Config(format!(
                "model.patch must be a power of two >= 2, got {}",
                self.patch
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("model.blocks must be >= 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora.rank must be >= 1".into()));
        }
        if self.classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("classes and input channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which pieces of the pipeline are active; the component ablation
/// toggles these.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ComponentMode {
    Full,
    /// No support conditioning: features pass through untouched and the
    /// pseudo-mask is an all-ones gate with a full-image box.
    PmgOff,
    /// Volumetric memory disabled: slices see only the static support.
    Mem3dOff,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub phi: MaskDownsampler,
    pub mem_sa: AttentionBlock,
    pub mem_ca: AttentionBlock,
    pub pma_q: Tensor,
    pub pma_k: Tensor,
    pub pma_v: Tensor,
    pub prompt: PromptEncoder,
    pub dec_pseudo: MaskDecoder,
    pub dec_final: MaskDecoder,
}

fn c_at(dim: usize, level: usize) -> usize {
    (dim >> level).max(2)
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut init = Init::new(&mut params, Rng::new(seed).split("model"));
        let c = cfg.dim;
        let sp = 1.0 / (c as f64).sqrt();

        // encoder: frozen stem + frozen projections with trainable adapters
        let pdim = cfg.in_channels * cfg.patch * cfg.patch;
        let patch_w = init.frozen("enc.patch.w", vec![pdim, c], 1.0 / (pdim as f64).sqrt());
        let patch_b = init.frozen_full("enc.patch.b", vec![c], 0.0);
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks {
            let lora = |init: &mut Init, tag: &str| -> Proj {
                Proj::Lora(LoraLinear {
                    frozen: init.frozen(&format!("enc.blk{i}.{tag}.w"), vec![c, c], sp),
                    a: init.param(&format!("enc.blk{i}.{tag}.a"), vec![c, cfg.lora_rank], sp),
                    b: init.param_zeros(&format!("enc.blk{i}.{tag}.b"), vec![cfg.lora_rank, c]),
                    scale: cfg.lora_alpha / cfg.lora_rank as f32,
                })
            };
            blocks.push(AttentionBlock {
                ln: Some(LayerNorm {
                    gain: init.frozen_full(&format!("enc.blk{i}.ln.g"), vec![c], 1.0),
                    bias: init.frozen_full(&format!("enc.blk{i}.ln.b"), vec![c], 0.0),
                }),
                wq: lora(&mut init, "q"),
                wk: lora(&mut init, "k"),
                wv: lora(&mut init, "v"),
                wo: lora(&mut init, "o"),
                d: c,
                residual: ResidualKind::Input,
            });
        }
        let encoder = Encoder {
            patch_w,
            patch_b,
            blocks,
            patch: cfg.patch,
            dim: c,
            in_channels: cfg.in_channels,
        };

        // mask downsampler: one stride-2 stage per halving of the patch stem
        let halvings = cfg.patch.trailing_zeros() as usize;
        let mut stages = Vec::new();
        let mut ch_in = 1;
        for s in 0..halvings {
            let ch_out = c_at(c, halvings - 1 - s);
            stages.push((
                init.param(
                    &format!("phi.s{s}.w"),
                    vec![ch_out, ch_in * 9],
                    1.0 / ((ch_in * 9) as f64).sqrt(),
                ),
                init.param_zeros(&format!("phi.s{s}.b"), vec![ch_out]),
            ));
            ch_in = ch_out;
        }
        let phi = MaskDownsampler { stages };

        let residual = if cfg.literal_residual {
            ResidualKind::Value
        } else {
            ResidualKind::Input
        };
        let dense_block = |init: &mut Init, tag: &str, residual: ResidualKind| AttentionBlock {
            ln: cfg.pre_norm.then(|| LayerNorm {
                gain: init.param_full(&format!("{tag}.ln.g"), vec![c], 1.0),
                bias: init.param_zeros(&format!("{tag}.ln.b"), vec![c]),
            }),
            wq: Proj::Dense(init.param(&format!("{tag}.q.w"), vec![c, c], sp)),
            wk: Proj::Dense(init.param(&format!("{tag}.k.w"), vec![c, c], sp)),
            wv: Proj::Dense(init.param(&format!("{tag}.v.w"), vec![c, c], sp)),
            wo: Proj::Dense(init.param(&format!("{tag}.o.w"), vec![c, c], sp)),
            d: c,
            residual,
        };
        let mem_sa = dense_block(&mut init, "mem.sa", residual);
        let mem_ca = dense_block(&mut init, "mem.ca", residual);

        // pseudo-mask attention projections (no output projection: the
        // gated attention term adds straight onto the features)
        let pma_q = init.param("pma.q.w", vec![c, c], sp);
        let pma_k = init.param("pma.k.w", vec![c, c], sp);
        let pma_v = init.param("pma.v.w", vec![c, c], sp);

        let prompt = PromptEncoder {
            none: init.param("pe.none", vec![1, c], 0.5),
            corners: init.param("pe.corners", vec![2, c], 0.5),
            dim: c,
        };

        let decoder = |init: &mut Init, tag: &str, out_channels: usize, with_stem: bool| {
            let ca = dense_block(init, &format!("{tag}.ca"), ResidualKind::Input);
            let stem_proj = with_stem.then(|| {
                (
                    init.param(
                        &format!("{tag}.stem.w"),
                        vec![c, 2 * c],
                        1.0 / ((2 * c) as f64).sqrt(),
                    ),
                    init.param_zeros(&format!("{tag}.stem.b"), vec![c]),
                )
            });
            let mut ups = Vec::new();
            for s in 0..halvings {
                let (ci, co) = (c_at(c, s), c_at(c, s + 1));
                ups.push((
                    init.param(
                        &format!("{tag}.up{s}.w"),
                        vec![co, ci * 9],
                        1.0 / ((ci * 9) as f64).sqrt(),
                    ),
                    init.param_zeros(&format!("{tag}.up{s}.b"), vec![co]),
                ));
            }
            let hin = c_at(c, halvings);
            let head = (
                init.param(
                    &format!("{tag}.head.w"),
                    vec![out_channels, hin],
                    1.0 / (hin as f64).sqrt(),
                ),
                init.param_zeros(&format!("{tag}.head.b"), vec![out_channels]),
            );
            MaskDecoder { ca, stem_proj, ups, head, out_channels }
        };
        // independent decoders: the consistency loss compares their outputs
        let dec_pseudo = decoder(&mut init, "dec.pm", cfg.classes, false);
        let dec_final = decoder(&mut init, "dec.fi", 1, true);

        drop(init);
        Ok(Model {
            cfg,
            params,
            encoder,
            phi,
            mem_sa,
            mem_ca,
            pma_q,
            pma_k,
            pma_v,
            prompt,
            dec_pseudo,
            dec_final,
        })
    }
}

pub struct SliceOutput {
    /// Per-class pseudo-mask probabilities, [K, H, W].
    pub pseudo: Tensor,
    /// Per-class final prediction probabilities, [K, H, W].
    pub final_probs: Tensor,
    /// One box per class, plus whether the full-image fallback fired.
    pub boxes: Vec<(BBox, bool)>,
    /// True when the pseudo branch is live (KL term applies).
    pub pseudo_live: bool,
}

/// One query forward pass: memory-conditioned features, pseudo-mask,
/// gated attention, box prompt, final prediction.
pub fn forward_slice(
    model: &Model,
    feats: &FeatureMap,
    memory: &SupportMemorySet,
    mode: ComponentMode,
) -> Result<SliceOutput> {
    let k_cls = model.cfg.classes;
    let (h, w) = feats.image;
    let (f_tilde, pseudo, pseudo_live) = if mode == ComponentMode::PmgOff {
        let f_tilde = feats.with_tokens(feats.tokens.clone());
        let pseudo = Tensor::full(vec![k_cls, h, w], 1.0);
        (f_tilde, pseudo, false)
    } else {
        let f_tilde = pmg::memory_attend(model, memory, feats)?;
        let pseudo = pmg::generate_pseudo_mask(model, &f_tilde)?;
        (f_tilde, pseudo, true)
    };
    let (final_probs, boxes) = pma::predict_all(model, &f_tilde, &pseudo)?;
    Ok(SliceOutput { pseudo, final_probs, boxes, pseudo_live })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::constant(vec![1, h, w], (0..h * w).map(|_| rng.uniform() as f32).collect())
    }

    #[test]
    fn encoder_grid_arithmetic() {
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let fm = model.encoder.forward(&image(64, 64, 1)).unwrap();
        assert_eq!(fm.grid, (16, 16));
        assert_eq!(fm.tokens.dims(), &[256, 32]);
    }

    #[test]
    fn encoder_deterministic_bitwise() {
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let img = image(32, 32, 2);
        let a = model.encoder.forward(&img).unwrap();
        let b = model.encoder.forward(&img).unwrap();
        assert_eq!(a.tokens.to_vec(), b.tokens.to_vec());
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let err = model.encoder.forward(&image(30, 32, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("multiple"), "{msg}");
    }

    #[test]
    fn lora_zero_init_model_matches_base_bitwise() {
        // before any update the adapted encoder equals the frozen one
        let model = Model::new(ModelConfig::default(), 9).unwrap();
        let img = image(32, 32, 4);
        let adapted = model.encoder.forward(&img).unwrap();
        let base = model.encoder.forward_frozen(&img).unwrap();
        assert_eq!(adapted.tokens.to_vec(), base.tokens.to_vec());
    }

    #[test]
    fn encoder_output_moves_only_through_adapters() {
        let model = Model::new(ModelConfig::default(), 11).unwrap();
        let img = image(32, 32, 6);
        let before = model.encoder.forward(&img).unwrap().tokens.to_vec();
        // simulate a training step on the adapters
        for (name, t) in model.params.all() {
            if name.ends_with(".b") && name.starts_with("enc.blk") && t.requires_grad() {
                t.update_data(|i, v| *v += 0.01 * (i % 7) as f32);
            }
        }
        let after = model.encoder.forward(&img).unwrap().tokens.to_vec();
        assert_ne!(before, after);
        // zeroing the adapters restores the base output exactly
        for (name, t) in model.params.all() {
            if name.ends_with(".b") && name.starts_with("enc.blk") && t.requires_grad() {
                t.update_data(|_, v| *v = 0.0);
            }
        }
        let restored = model.encoder.forward(&img).unwrap().tokens.to_vec();
        let base = model.encoder.forward_frozen(&img).unwrap().tokens.to_vec();
        assert_eq!(restored, base);
    }
}
