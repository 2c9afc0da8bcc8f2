//! Pseudo-mask attention: derive a box prompt from the pseudo-mask, gate
//! self-attended query features by the resized probability map, and
//! decode the final prediction through the prompt-conditioned decoder.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{BBox, FeatureMap};
use crate::tensor::{
    concat_rows, matmul, matmul_nt, mul_scalar, resize_bilinear, scale_rows_add, sigmoid,
    slice_rows, softmax_rows, Tensor,
};

pub const BOX_MARGIN: usize = 2;

/// Tightest box over pixels with probability >= tau, expanded by `margin`
/// and clamped. An empty thresholded mask falls back to the full-image
/// box and reports it.
pub fn bbox_from_mask_margin(
    mask: &Tensor,
    tau: f32,
    margin: usize,
) -> Result<(BBox, bool)> {
    let dims = mask.dims().to_vec();
    let (h, w) = match dims.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape(format!(
                "bbox_from_mask: expected a single [H, W] channel, got {other:?}"
            )))
        }
    };
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Param(format!("bbox threshold must be in (0,1), got {tau}")));
    }
    let d = mask.data();
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if d[r * w + c] >= tau {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if !any {
        return Ok((BBox::full(h, w), true));
    }
    Ok((
        BBox {
            r0: r0.saturating_sub(margin),
            c0: c0.saturating_sub(margin),
            r1: (r1 + margin).min(h - 1),
            c1: (c1 + margin).min(w - 1),
        },
        false,
    ))
}

pub fn bbox_from_mask(mask: &Tensor, tau: f32) -> Result<(BBox, bool)> {
    bbox_from_mask_margin(mask, tau, BOX_MARGIN)
}

/// Gated self-attention on the conditioned features:
/// out = gate ⊙ softmax(QKᵀ/√d)·V + input, gate = resized pseudo-mask.
/// A zero gate therefore passes the input through bit-for-bit.
pub fn mask_attention(model: &Model, f_tilde: &FeatureMap, pm: &Tensor) -> Result<FeatureMap> {
    let dims = pm.dims().to_vec();
    let ok = matches!(dims.as_slice(), [h, w] if (*h, *w) == f_tilde.image)
        || matches!(dims.as_slice(), [1, h, w] if (*h, *w) == f_tilde.image);
    if !ok {
        return Err(Error::Shape(format!(
            "mask_attention: pseudo-mask {dims:?} does not match image {:?}",
            f_tilde.image
        )));
    }
    {
        let d = pm.data();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("pseudo-mask contains non-finite values".into()));
        }
        if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param("pseudo-mask values must lie in [0, 1]".into()));
        }
    }
    let (h, w) = f_tilde.image;
    let (gh, gw) = f_tilde.grid;
    let pm3 = pm.reshape(vec![1, h, w])?;
    let gate = resize_bilinear(&pm3, gh, gw)?.reshape(vec![gh * gw])?;

    let x = &f_tilde.tokens;
    let d = model.cfg.dim;
    let q = matmul(x, &model.pma_q)?;
    let k = matmul(x, &model.pma_k)?;
    let v = matmul(x, &model.pma_v)?;
    let attn = softmax_rows(&mul_scalar(&matmul_nt(&q, &k)?, 1.0 / (d as f32).sqrt()))?;
    let ctx = matmul(&attn, &v)?;
    let out = scale_rows_add(&ctx, &gate, x)?;
    Ok(f_tilde.with_tokens(out))
}

/// Box-prompted decode of the gated features into one class channel.
pub fn predict_final(model: &Model, f_hat: &FeatureMap, bbox: &BBox) -> Result<Tensor> {
    let prompt = model.prompt.encode_box(bbox, f_hat.image)?;
    let logits = model.dec_final.decode(f_hat, &prompt)?;
    Ok(sigmoid(&logits))
}

/// Per-class pipeline: each class channel of the pseudo-mask yields its
/// own gate and box; outputs stack to [K, H, W].
pub fn predict_all(
    model: &Model,
    f_tilde: &FeatureMap,
    pseudo: &Tensor,
) -> Result<(Tensor, Vec<(BBox, bool)>)> {
    let flat = flat_pseudo(f_tilde, pseudo)?;
    let (h, w) = f_tilde.image;
    let k_cls = flat.dims()[0];
    let mut boxes = Vec::with_capacity(k_cls);
    for c in 0..k_cls {
        let pm_c = slice_rows(&flat, c, 1)?.reshape(vec![h, w])?;
        // box derivation is discrete: it reads values, gradients stop here
        boxes.push(bbox_from_mask(&pm_c.detach(), 0.5)?);
    }
    let only_boxes: Vec<BBox> = boxes.iter().map(|(b, _)| *b).collect();
    let stacked = predict_all_with_boxes(model, f_tilde, pseudo, &only_boxes)?;
    Ok((stacked, boxes))
}

/// Gated decode with externally supplied boxes (boxes are constants on
/// the tape either way; this entry point lets verification hold them
/// fixed while everything differentiable moves).
pub fn predict_all_with_boxes(
    model: &Model,
    f_tilde: &FeatureMap,
    pseudo: &Tensor,
    boxes: &[BBox],
) -> Result<Tensor> {
    let flat = flat_pseudo(f_tilde, pseudo)?;
    let (h, w) = f_tilde.image;
    let k_cls = flat.dims()[0];
    if boxes.len() != k_cls {
        return Err(Error::Contract(format!(
            "predict_all_with_boxes: {} boxes for {k_cls} classes",
            boxes.len()
        )));
    }
    let mut channels = Vec::with_capacity(k_cls);
    for (c, bbox) in boxes.iter().enumerate() {
        let pm_c = slice_rows(&flat, c, 1)?.reshape(vec![h, w])?;
        let f_hat = mask_attention(model, f_tilde, &pm_c)?;
        let probs = predict_final(model, &f_hat, bbox)?; // [1, H, W]
        channels.push(probs.reshape(vec![1, h * w])?);
    }
    concat_rows(&channels)?.reshape(vec![k_cls, h, w])
}

fn flat_pseudo(f_tilde: &FeatureMap, pseudo: &Tensor) -> Result<Tensor> {
    let dims = pseudo.dims().to_vec();
    let (k_cls, h, w) = match dims.as_slice() {
        [k, h, w] => (*k, *h, *w),
        other => {
            return Err(Error::Shape(format!(
                "predict_all: pseudo-mask must be [K, H, W], got {other:?}"
            )))
        }
    };
    if (h, w) != f_tilde.image {
        return Err(Error::Shape(format!(
            "predict_all: pseudo-mask {dims:?} does not match image {:?}",
            f_tilde.image
        )));
    }
    pseudo.reshape(vec![k_cls, h * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::rng::Rng;

    fn small_model(seed: u64) -> Model {
        Model::new(
            ModelConfig { dim: 8, blocks: 1, patch: 2, ..ModelConfig::default() },
            seed,
        )
        .unwrap()
    }

    fn feature_map(model: &Model, seed: u64) -> FeatureMap {
        let mut rng = Rng::new(seed);
        let img = Tensor::constant(vec![1, 8, 8], (0..64).map(|_| rng.uniform() as f32).collect());
        model.encoder.forward(&img).unwrap()
    }

    fn rect_mask(h: usize, w: usize, r: std::ops::RangeInclusive<usize>, c: std::ops::RangeInclusive<usize>) -> Tensor {
        let mut d = vec![0.0f32; h * w];
        for ri in r.clone() {
            for ci in c.clone() {
                d[ri * w + ci] = 1.0;
            }
        }
        Tensor::constant(vec![h, w], d)
    }

    #[test]
    fn bbox_tight_box_no_margin() {
        let m = rect_mask(10, 12, 2..=5, 3..=7);
        let (b, fallback) = bbox_from_mask_margin(&m, 0.5, 0).unwrap();
        assert!(!fallback);
        assert_eq!(b, BBox { r0: 2, c0: 3, r1: 5, c1: 7 });
    }

    #[test]
    fn bbox_empty_mask_falls_back_to_full_image() {
        let m = Tensor::zeros(vec![6, 9]);
        let (b, fallback) = bbox_from_mask(&m, 0.5).unwrap();
        assert!(fallback);
        assert_eq!(b, BBox::full(6, 9));
    }

    #[test]
    fn bbox_translation_equivariance() {
        // interior translations move the box by the same offset
        let base = rect_mask(16, 16, 4..=6, 5..=8);
        let (b0, _) = bbox_from_mask(&base, 0.5).unwrap();
        for (dr, dc) in [(1usize, 0usize), (0, 2), (2, 3)] {
            let shifted = rect_mask(16, 16, 4 + dr..=6 + dr, 5 + dc..=8 + dc);
            let (b, _) = bbox_from_mask(&shifted, 0.5).unwrap();
            assert_eq!(b.r0, b0.r0 + dr);
            assert_eq!(b.r1, b0.r1 + dr);
            assert_eq!(b.c0, b0.c0 + dc);
            assert_eq!(b.c1, b0.c1 + dc);
        }
    }

    #[test]
    fn bbox_matches_pixel_scan_oracle_on_random_masks() {
        let mut rng = Rng::new(40);
        for trial in 0..200 {
            let (h, w) = (6 + rng.below(10), 6 + rng.below(10));
            let data: Vec<f32> = (0..h * w).map(|_| rng.uniform() as f32).collect();
            let tau = 0.5f32;
            let m = Tensor::constant(vec![h, w], data.clone());
            let (b, fallback) = bbox_from_mask_margin(&m, tau, 0).unwrap();
            // oracle: exhaustive scan
            let mut acc: Option<(usize, usize, usize, usize)> = None;
            for r in 0..h {
                for c in 0..w {
                    if data[r * w + c] >= tau {
                        acc = Some(match acc {
                            None => (r, c, r, c),
                            Some((r0, c0, r1, c1)) => {
                                (r0.min(r), c0.min(c), r1.max(r), c1.max(c))
                            }
                        });
                    }
                }
            }
            match acc {
                None => assert!(fallback, "trial {trial}"),
                Some((r0, c0, r1, c1)) => {
                    assert!(!fallback);
                    assert_eq!((b.r0, b.c0, b.r1, b.c1), (r0, c0, r1, c1), "trial {trial}");
                }
            }
        }
    }

    #[test]
    fn zero_gate_passes_features_bitwise() {
        let model = small_model(50);
        let fm = feature_map(&model, 1);
        let pm = Tensor::zeros(vec![8, 8]);
        let out = mask_attention(&model, &fm, &pm).unwrap();
        assert_eq!(out.tokens.to_vec(), fm.tokens.to_vec());
    }

    #[test]
    fn unit_gate_adds_full_attention_term() {
        let model = small_model(51);
        let fm = feature_map(&model, 2);
        let pm = Tensor::full(vec![8, 8], 1.0);
        let out = mask_attention(&model, &fm, &pm).unwrap();
        // recompute the ungated attention term
        let q = matmul(&fm.tokens, &model.pma_q).unwrap();
        let k = matmul(&fm.tokens, &model.pma_k).unwrap();
        let v = matmul(&fm.tokens, &model.pma_v).unwrap();
        let attn =
            softmax_rows(&mul_scalar(&matmul_nt(&q, &k).unwrap(), 1.0 / (8f32).sqrt())).unwrap();
        let ctx = matmul(&attn, &v).unwrap();
        let (od, cd, xd) = (out.tokens.to_vec(), ctx.to_vec(), fm.tokens.to_vec());
        for i in 0..od.len() {
            assert!((od[i] - (cd[i] + xd[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn gated_attention_matches_bruteforce_expansion() {
        let model = small_model(52);
        let fm = feature_map(&model, 3);
        let mut rng = Rng::new(53);
        let pm = Tensor::constant(vec![8, 8], (0..64).map(|_| rng.uniform() as f32).collect());
        let out = mask_attention(&model, &fm, &pm).unwrap().tokens.to_vec();

        // token-level expansion in f64
        let d = 8usize;
        let n = 16usize; // 4x4 grid of tokens
        let x = fm.tokens.to_vec();
        let (wq, wk, wv) = (model.pma_q.to_vec(), model.pma_k.to_vec(), model.pma_v.to_vec());
        let proj = |w: &Vec<f32>| -> Vec<f64> {
            let mut o = vec![0.0f64; n * d];
            for i in 0..n {
                for j in 0..d {
                    for t in 0..d {
                        o[i * d + j] += x[i * d + t] as f64 * w[t * d + j] as f64;
                    }
                }
            }
            o
        };
        let (q, k, v) = (proj(&wq), proj(&wk), proj(&wv));
        let gate3 = pm.reshape(vec![1, 8, 8]).unwrap();
        let gate = resize_bilinear(&gate3, 4, 4).unwrap().to_vec();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() * scale
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for jdim in 0..d {
                let ctx: f64 = (0..n).map(|j| exps[j] / sum * v[j * d + jdim]).sum();
                let expect = gate[i] as f64 * ctx + x[i * d + jdim] as f64;
                assert!(
                    (out[i * d + jdim] as f64 - expect).abs() < 1e-5,
                    "token {i} dim {jdim}"
                );
            }
        }
    }

    #[test]
    fn final_prediction_contract_dims_and_prompt_sensitivity() {
        let model = small_model(54);
        let fm = feature_map(&model, 4);
        let b1 = BBox { r0: 1, c0: 1, r1: 3, c1: 3 };
        let b2 = BBox { r0: 2, c0: 4, r1: 6, c1: 7 };
        let p1 = predict_final(&model, &fm, &b1).unwrap();
        let p2 = predict_final(&model, &fm, &b2).unwrap();
        assert_eq!(p1.dims(), &[1, 8, 8]);
        assert_ne!(p1.to_vec(), p2.to_vec());
        for v in p1.to_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zeroed_final_head_gives_uniform_half() {
        let model = small_model(55);
        for (name, t) in model.params.all() {
            if name.starts_with("dec.fi.head") {
                t.update_data(|_, v| *v = 0.0);
            }
        }
        let fm = feature_map(&model, 5);
        let p = predict_final(&model, &fm, &BBox::full(8, 8)).unwrap();
        for v in p.to_vec() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn predict_all_stacks_one_channel_per_class() {
        let model = Model::new(
            ModelConfig { dim: 8, blocks: 1, patch: 2, classes: 3, ..ModelConfig::default() },
            56,
        )
        .unwrap();
        let fm = feature_map(&model, 6);
        let mut rng = Rng::new(57);
        let pseudo = Tensor::constant(
            vec![3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform() as f32).collect(),
        );
        let (probs, boxes) = predict_all(&model, &fm, &pseudo).unwrap();
        assert_eq!(probs.dims(), &[3, 8, 8]);
        assert_eq!(boxes.len(), 3);
    }
}
