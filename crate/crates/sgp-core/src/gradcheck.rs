//! Central-finite-difference verification of the reverse-mode gradients.
//!
//! The quotient uses the effective perturbation (the f32-rounded plus and
//! minus points subtracted in f64) and the f64 values scalar reductions
//! record, so the oracle's own noise stays well below the 1e-3 gate.

use crate::data::{SupportItem, SupportPool};
use crate::error::{Error, Result};
use crate::model::{forward_slice, ComponentMode, Model, ModelConfig};
use crate::nn::{AttentionBlock, LayerNorm, Proj, ResidualKind};
use crate::pma;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::train::{self, LossConfig};

pub const DEFAULT_H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare the analytic gradient of `f` at `x` against central
/// differences over every coordinate; returns the maximum relative error.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Param(format!("gradcheck: h={h} outside [1e-6, 1e-3]")));
    }
    let base = x.to_vec();
    let leaf = Tensor::param(x.dims().to_vec(), base.clone());
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("gradcheck: f must be scalar-valued".into()));
    }
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] = (base[i] as f64 + h) as f32;
        minus[i] = (base[i] as f64 - h) as f32;
        let eff = plus[i] as f64 - minus[i] as f64;
        let fp = f(&Tensor::constant(x.dims().to_vec(), plus))?.item_f64();
        let fm = f(&Tensor::constant(x.dims().to_vec(), minus))?.item_f64();
        let fd = (fp - fm) / eff;
        max_rel = max_rel.max(rel_err(fd, analytic[i] as f64));
    }
    Ok(max_rel)
}

/// Finite differences over a sampled subset of many parameters' coords;
/// the full forward re-runs per probe, so sampling keeps composed-path
/// checks tractable. Every parameter tensor gets at least one probe.
///
/// A probe whose one-sided differences disagree has a kink (ReLU,
/// clamp) inside the ±h interval; the quotient is meaningless there and
/// the probe is skipped. A wrong backward still fails: it produces
/// locally consistent one-sided differences that disagree with the
/// analytic value.
pub fn gradcheck_params<F>(
    f: F,
    params: &[Tensor],
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }
    let f0 = f()?.item_f64();

    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut rng = Rng::new(seed).split("gradcheck");
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let share = ((probes * n) as f64 / total as f64).ceil() as usize;
        for _ in 0..share.clamp(1, n) {
            let i = rng.below(n);
            let orig = p.data()[i];
            let plus = (orig as f64 + h) as f32;
            let minus = (orig as f64 - h) as f32;
            p.update_data(|j, v| {
                if j == i {
                    *v = plus;
                }
            });
            let fp = f()?.item_f64();
            p.update_data(|j, v| {
                if j == i {
                    *v = minus;
                }
            });
            let fm = f()?.item_f64();
            p.update_data(|j, v| {
                if j == i {
                    *v = orig;
                }
            });
            let fd = (fp - fm) / (plus as f64 - minus as f64);
            let d_plus = (fp - f0) / (plus as f64 - orig as f64);
            let d_minus = (f0 - fm) / (orig as f64 - minus as f64);
            if (d_plus - d_minus).abs() > 0.1 * d_plus.abs().max(d_minus.abs()).max(1e-3) {
                continue; // non-smooth interval
            }
            max_rel = max_rel.max(rel_err(fd, analytic[pi][i] as f64));
        }
    }
    Ok(max_rel)
}

pub struct OpReport {
    pub name: &'static str,
    pub max_rel: f64,
}

fn randn(dims: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::constant(dims, (0..n).map(|_| rng.normal() as f32).collect())
}

/// Weight-like operand at the scale real initializers use; keeps
/// activations O(1) so f32 forward rounding stays far below the FD gate.
fn randn_scaled(dims: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::constant(dims, (0..n).map(|_| (rng.normal() * s) as f32).collect())
}

/// Linear functional of the output: untouched outputs cancel bitwise in
/// the f64 difference, so the probe adds no quadratic noise.
fn probe_loss(out: &Tensor, probe: &Tensor) -> Result<Tensor> {
    let flat = out.reshape(vec![1, out.numel()])?;
    Ok(tensor::sum_all(&tensor::mul(&flat, probe)?))
}

fn probe_for(numel: usize, rng: &mut Rng) -> Tensor {
    Tensor::constant(vec![1, numel], (0..numel).map(|_| rng.normal() as f32).collect())
}

/// Random values kept away from the kink at zero.
fn randn_off_zero(dims: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal() as f32;
            if v.abs() < 0.05 {
                v + 0.1f32.copysign(v + f32::MIN_POSITIVE)
            } else {
                v
            }
        })
        .collect();
    Tensor::constant(dims, data)
}

fn unit_interval(dims: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::constant(dims, (0..n).map(|_| rng.range(0.05, 0.95) as f32).collect())
}

fn binary(dims: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::constant(
        dims,
        (0..n).map(|_| if rng.chance(0.4) { 1.0 } else { 0.0 }).collect(),
    )
}

/// Per-operation finite-difference suite: every differentiable op at 10
/// random points under a fixed seed.
pub fn op_suite() -> Result<Vec<OpReport>> {
    let mut reports: Vec<OpReport> = Vec::new();
    let mut push = |name: &'static str, rel: f64| {
        reports.push(OpReport { name, max_rel: rel });
    };
    let trials = 10;

    let worst = |name: &'static str,
                 f: &mut dyn FnMut(&mut Rng) -> Result<f64>|
     -> Result<f64> {
        let mut mx = 0.0f64;
        for t in 0..trials {
            let mut rng = Rng::new(0xC0FFEE + t).split(name);
            mx = mx.max(f(&mut rng)?);
        }
        Ok(mx)
    };

    let r = worst("matmul", &mut |rng| {
        let b = randn_scaled(vec![3, 2], 3, rng);
        let x = randn(vec![4, 3], rng);
        let p = probe_for(8, rng);
        let lhs = gradcheck(|x| probe_loss(&tensor::matmul(x, &b)?, &p), &x, DEFAULT_H)?;
        let a = randn(vec![4, 3], rng);
        let y = randn_scaled(vec![3, 2], 3, rng);
        let rhs = gradcheck(|y| probe_loss(&tensor::matmul(&a, y)?, &p), &y, DEFAULT_H)?;
        Ok(lhs.max(rhs))
    })?;
    push("matmul", r);

    let r = worst("matmul_nt", &mut |rng| {
        let b = randn_scaled(vec![5, 3], 3, rng);
        let x = randn(vec![4, 3], rng);
        let p = probe_for(20, rng);
        gradcheck(|x| probe_loss(&tensor::matmul_nt(x, &b)?, &p), &x, DEFAULT_H)
    })?;
    push("matmul_nt", r);

    let r = worst("transpose", &mut |rng| {
        let x = randn(vec![3, 5], rng);
        let w = randn_scaled(vec![3, 2], 3, rng);
        let p = probe_for(10, rng);
        gradcheck(
            |x| probe_loss(&tensor::matmul(&tensor::transpose(x)?, &w)?, &p),
            &x,
            DEFAULT_H,
        )
    })?;
    push("transpose", r);

    let r = worst("add_mul", &mut |rng| {
        let b = randn(vec![4, 4], rng);
        let x = randn(vec![4, 4], rng);
        gradcheck(
            |x| {
                let s = tensor::add(x, &b)?;
                let m = tensor::mul(&s, &b)?;
                Ok(tensor::sum_all(&tensor::mul_scalar(&m, 1.7)))
            },
            &x,
            DEFAULT_H,
        )
    })?;
    push("add/mul/mul_scalar", r);

    let r = worst("relu", &mut |rng| {
        let x = randn_off_zero(vec![4, 4], rng);
        gradcheck(|x| Ok(tensor::sum_squares(&tensor::relu(x))), &x, DEFAULT_H)
    })?;
    push("relu", r);

    let r = worst("sigmoid", &mut |rng| {
        let x = randn(vec![3, 4], rng);
        gradcheck(|x| Ok(tensor::sum_squares(&tensor::sigmoid(x))), &x, DEFAULT_H)
    })?;
    push("sigmoid", r);

    let r = worst("softmax_rows", &mut |rng| {
        let w = randn(vec![5, 3], rng);
        let x = randn(vec![4, 5], rng);
        gradcheck(
            |x| Ok(tensor::sum_squares(&tensor::matmul(&tensor::softmax_rows(x)?, &w)?)),
            &x,
            DEFAULT_H,
        )
    })?;
    push("softmax_rows", r);

    let r = worst("layer_norm", &mut |rng| {
        let g = randn(vec![6], rng);
        let b = randn(vec![6], rng);
        let x = randn(vec![3, 6], rng);
        let rx = gradcheck(
            |x| Ok(tensor::sum_squares(&tensor::layer_norm(x, &g, &b, 1e-5)?)),
            &x,
            DEFAULT_H,
        )?;
        let x2 = randn(vec![3, 6], rng);
        let g2 = randn(vec![6], rng);
        let rg = gradcheck(
            |g| Ok(tensor::sum_squares(&tensor::layer_norm(&x2, g, &b, 1e-5)?)),
            &g2,
            DEFAULT_H,
        )?;
        Ok(rx.max(rg))
    })?;
    push("layer_norm", r);

    let r = worst("bias", &mut |rng| {
        let x = randn(vec![3, 4], rng);
        let br = randn(vec![3], rng);
        let bc = randn(vec![4], rng);
        let r1 = gradcheck(
            |b| Ok(tensor::sum_squares(&tensor::add_bias_rows(&x, b)?)),
            &br,
            DEFAULT_H,
        )?;
        let r2 = gradcheck(
            |b| Ok(tensor::sum_squares(&tensor::add_bias_cols(&x, b)?)),
            &bc,
            DEFAULT_H,
        )?;
        Ok(r1.max(r2))
    })?;
    push("add_bias_rows/cols", r);

    let r = worst("concat_slice", &mut |rng| {
        let other = randn(vec![2, 3], rng);
        let x = randn(vec![3, 3], rng);
        gradcheck(
            |x| {
                let cat = tensor::concat_rows(&[x.clone(), other.clone()])?;
                let sl = tensor::slice_rows(&cat, 1, 3)?;
                Ok(tensor::sum_squares(&sl))
            },
            &x,
            DEFAULT_H,
        )
    })?;
    push("concat_rows/slice_rows", r);

    let r = worst("scale_rows_add", &mut |rng| {
        let attn = randn(vec![4, 3], rng);
        let res = randn(vec![4, 3], rng);
        let gate = unit_interval(vec![4], rng);
        let ra = gradcheck(
            |a| Ok(tensor::sum_squares(&tensor::scale_rows_add(a, &gate, &res)?)),
            &attn,
            DEFAULT_H,
        )?;
        let rg = gradcheck(
            |g| Ok(tensor::sum_squares(&tensor::scale_rows_add(&attn, g, &res)?)),
            &gate,
            DEFAULT_H,
        )?;
        Ok(ra.max(rg))
    })?;
    push("scale_rows_add", r);

    let r = worst("conv2d", &mut |rng| {
        let k = randn_scaled(vec![2, 2 * 9], 18, rng);
        let b = randn_scaled(vec![2], 4, rng);
        let x = randn(vec![2, 6, 6], rng);
        let p2 = probe_for(2 * 3 * 3, rng);
        let rx = gradcheck(
            |x| probe_loss(&tensor::conv2d(x, &k, Some(&b), 3, 2)?, &p2),
            &x,
            DEFAULT_H,
        )?;
        let k2 = randn_scaled(vec![2, 2 * 9], 18, rng);
        let p1 = probe_for(2 * 6 * 6, rng);
        let rk = gradcheck(
            |k| probe_loss(&tensor::conv2d(&x, k, Some(&b), 3, 1)?, &p1),
            &k2,
            DEFAULT_H,
        )?;
        Ok(rx.max(rk))
    })?;
    push("conv2d", r);

    let r = worst("patchify", &mut |rng| {
        let w = randn_scaled(vec![4, 2], 4, rng);
        let x = randn(vec![1, 4, 4], rng);
        let p = probe_for(8, rng);
        gradcheck(
            |x| probe_loss(&tensor::matmul(&tensor::patchify(x, 2)?, &w)?, &p),
            &x,
            DEFAULT_H,
        )
    })?;
    push("patchify", r);

    let r = worst("resize_bilinear", &mut |rng| {
        let x = randn(vec![2, 4, 4], rng);
        let up = gradcheck(
            |x| Ok(tensor::sum_squares(&tensor::resize_bilinear(x, 7, 6)?)),
            &x,
            DEFAULT_H,
        )?;
        let x2 = randn(vec![2, 5, 5], rng);
        let down = gradcheck(
            |x| Ok(tensor::sum_squares(&tensor::resize_bilinear(x, 3, 2)?)),
            &x2,
            DEFAULT_H,
        )?;
        Ok(up.max(down))
    })?;
    push("resize_bilinear", r);

    let r = worst("reductions", &mut |rng| {
        let x = randn(vec![3, 3], rng);
        let r1 = gradcheck(|x| Ok(tensor::sum_squares(x)), &x, DEFAULT_H)?;
        let r2 = gradcheck(|x| Ok(tensor::mean_all(&tensor::mul(x, x)?)), &x, DEFAULT_H)?;
        let r3 = gradcheck(|x| Ok(tensor::sum_all(&tensor::sigmoid(x))), &x, DEFAULT_H)?;
        Ok(r1.max(r2).max(r3))
    })?;
    push("sum/mean/sum_squares", r);

    let r = worst("dice_loss", &mut |rng| {
        let t = binary(vec![2, 9], rng);
        let p = unit_interval(vec![2, 9], rng);
        gradcheck(|p| train::dice_loss(p, &t), &p, DEFAULT_H)
    })?;
    push("dice_loss", r);

    let r = worst("bce_loss", &mut |rng| {
        let t = binary(vec![2, 9], rng);
        let p = unit_interval(vec![2, 9], rng);
        gradcheck(|p| train::bce_loss(p, &t), &p, DEFAULT_H)
    })?;
    push("bce_loss", r);

    let r = worst("kl_loss", &mut |rng| {
        let f = unit_interval(vec![2, 9], rng);
        let p = unit_interval(vec![2, 9], rng);
        gradcheck(|p| train::kl_loss(p, &f), &p, DEFAULT_H)
    })?;
    push("kl_loss", r);

    let r = worst("mse_loss", &mut |rng| {
        let t = randn(vec![3, 4], rng);
        let p = randn(vec![3, 4], rng);
        gradcheck(|p| train::mse_loss(p, &t), &p, DEFAULT_H)
    })?;
    push("mse_loss", r);

    let r = worst("total_loss", &mut |rng| {
        let t = binary(vec![1, 16], rng);
        let ps = unit_interval(vec![1, 16], rng);
        let p = unit_interval(vec![1, 16], rng);
        let cfg = LossConfig::default();
        // wrt the prediction the KL term's target is a stop-gradient, so
        // the differentiable surface is dice+ce
        let rp = gradcheck(
            |p| Ok(train::total_loss(p, None, &t, &cfg)?.0),
            &p,
            DEFAULT_H,
        )?;
        let rps = gradcheck(
            |ps| Ok(train::total_loss(&p, Some(ps), &t, &cfg)?.0),
            &ps,
            DEFAULT_H,
        )?;
        Ok(rp.max(rps))
    })?;
    push("total_loss", r);

    // attention blocks on 4-token inputs
    let dense_block = |rng: &mut Rng, d: usize, residual: ResidualKind, norm: bool| AttentionBlock {
        ln: norm.then(|| LayerNorm {
            gain: Tensor::constant(
                vec![d],
                (0..d).map(|_| 1.0 + 0.2 * rng.normal() as f32).collect(),
            ),
            bias: randn_scaled(vec![d], d, rng),
        }),
        wq: Proj::Dense(randn_scaled(vec![d, d], d, rng)),
        wk: Proj::Dense(randn_scaled(vec![d, d], d, rng)),
        wv: Proj::Dense(randn_scaled(vec![d, d], d, rng)),
        wo: Proj::Dense(randn_scaled(vec![d, d], d, rng)),
        d,
        residual,
    };

    let r = worst("self_attention", &mut |rng| {
        let mut mx = 0.0f64;
        for residual in [ResidualKind::Input, ResidualKind::Value] {
            for norm in [false, true] {
                let blk = dense_block(rng, 4, residual, norm);
                let x = randn(vec![4, 4], rng);
                let p = probe_for(16, rng);
                mx = mx.max(gradcheck(
                    |x| probe_loss(&blk.self_attention(x)?, &p),
                    &x,
                    DEFAULT_H,
                )?);
            }
        }
        Ok(mx)
    })?;
    push("self_attention", r);

    let r = worst("cross_attention", &mut |rng| {
        let blk = dense_block(rng, 4, ResidualKind::Input, true);
        let mem = randn(vec![3, 4], rng);
        let q = randn(vec![4, 4], rng);
        let p = probe_for(16, rng);
        let rq = gradcheck(
            |q| probe_loss(&blk.cross_attention(q, &mem)?, &p),
            &q,
            DEFAULT_H,
        )?;
        let mem2 = randn(vec![3, 4], rng);
        let rm = gradcheck(
            |m| probe_loss(&blk.cross_attention(&q, m)?, &p),
            &mem2,
            DEFAULT_H,
        )?;
        Ok(rq.max(rm))
    })?;
    push("cross_attention", r);

    Ok(reports)
}

pub struct PathReport {
    pub name: &'static str,
    pub max_rel: f64,
    pub probes: usize,
}

fn disk_mask(hw: usize, cy: f64, cx: f64, r: f64) -> Tensor {
    let mut d = vec![0.0f32; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                d[y * hw + x] = 1.0;
            }
        }
    }
    Tensor::constant(vec![1, hw, hw], d)
}

fn fixture_pool(rng: &mut Rng) -> SupportPool {
    let items = (0..2)
        .map(|i| SupportItem {
            sample_idx: i,
            slice: 0,
            image: unit_interval(vec![1, 8, 8], rng),
            mask: disk_mask(8, 3.0 + i as f64, 4.0, 2.2),
        })
        .collect();
    SupportPool { items, duplicated: false }
}

/// Composed-path checks on 8×8 fixtures: the pseudo-mask branch plus the
/// full loss, and the gated-attention branch plus the full loss, probed
/// across every parameter tensor.
pub fn path_suite() -> Result<Vec<PathReport>> {
    let mut frng = Rng::new(77).split("path-fixture");
    let cfg = ModelConfig {
        dim: 8,
        blocks: 1,
        patch: 2,
        classes: 1,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 7)?;
    let pool = fixture_pool(&mut frng);
    let image = unit_interval(vec![1, 8, 8], &mut frng);
    let mask = disk_mask(8, 4.0, 3.5, 2.4);
    let loss_cfg = LossConfig::default();

    let params: Vec<Tensor> = model.params.trainable().map(|(_, t)| t.clone()).collect();
    let probes = 160;

    // end-to-end: encoder -> support memory -> memory attention ->
    // pseudo decode -> gated attention -> final decode -> dice+ce. The
    // box is frozen at its unperturbed value (its derivation is a
    // declared stop-gradient: thresholded pixel scans jump discretely);
    // the consistency term's target is likewise checked separately with
    // a frozen target.
    let full = {
        let model = &model;
        let pool = &pool;
        let image = &image;
        let mask = &mask;
        let boxes0: Vec<crate::nn::BBox> = {
            let support = train::encode_support_set(model, pool, &[0])?;
            let feats = model.encoder.forward(image)?;
            let out = forward_slice(model, &feats, &support, ComponentMode::Full)?;
            out.boxes.iter().map(|(b, _)| *b).collect()
        };
        let f = move || {
            let support = train::encode_support_set(model, pool, &[0])?;
            let feats = model.encoder.forward(image)?;
            let f_tilde = crate::pmg::memory_attend(model, &support, &feats)?;
            let pseudo = crate::pmg::generate_pseudo_mask(model, &f_tilde)?;
            let probs = pma::predict_all_with_boxes(model, &f_tilde, &pseudo, &boxes0)?;
            Ok(train::total_loss(&probs, None, mask, &loss_cfg)?.0)
        };
        gradcheck_params(f, &params, probes, DEFAULT_H, 101)?
    };

    // consistency term through the pseudo branch, target held fixed
    let kl_path = {
        let model = &model;
        let pool = &pool;
        let image = &image;
        let final0 = {
            let support = train::encode_support_set(model, pool, &[0])?;
            let feats = model.encoder.forward(image)?;
            let out = forward_slice(model, &feats, &support, ComponentMode::Full)?;
            out.final_probs.detach()
        };
        let f = move || {
            let support = train::encode_support_set(model, pool, &[0])?;
            let feats = model.encoder.forward(image)?;
            let f_tilde = crate::pmg::memory_attend(model, &support, &feats)?;
            let pseudo = crate::pmg::generate_pseudo_mask(model, &f_tilde)?;
            train::kl_loss(&pseudo, &final0)
        };
        gradcheck_params(f, &params, probes, DEFAULT_H, 104)?
    };

    // pseudo branch alone: its output scored directly against the target
    let pmg_path = {
        let model = &model;
        let pool = &pool;
        let image = &image;
        let mask = &mask;
        let f = move || {
            let support = train::encode_support_set(model, pool, &[0, 1])?;
            let feats = model.encoder.forward(image)?;
            let f_tilde = crate::pmg::memory_attend(model, &support, &feats)?;
            let pseudo = crate::pmg::generate_pseudo_mask(model, &f_tilde)?;
            Ok(train::total_loss(&pseudo, None, mask, &loss_cfg)?.0)
        };
        gradcheck_params(f, &params, probes, DEFAULT_H, 102)?
    };

    // gated-attention branch with a fixed external gate and box
    let pma_path = {
        let model = &model;
        let image = &image;
        let mask = &mask;
        let mut rng = Rng::new(55).split("pma-gate");
        let gate = unit_interval(vec![8, 8], &mut rng);
        let bbox = crate::nn::BBox { r0: 1, c0: 1, r1: 6, c1: 6 };
        let f = move || {
            let feats = model.encoder.forward(image)?;
            let f_hat = pma::mask_attention(model, &feats, &gate)?;
            let probs = pma::predict_final(model, &f_hat, &bbox)?;
            Ok(train::total_loss(&probs, None, mask, &loss_cfg)?.0)
        };
        gradcheck_params(f, &params, probes, DEFAULT_H, 103)?
    };

    // gradient through the gate itself
    let gate_path = {
        let model = &model;
        let image = &image;
        let feats = model.encoder.forward(&image)?;
        let mut rng = Rng::new(56).split("gate");
        let gate0 = unit_interval(vec![8, 8], &mut rng);
        gradcheck(
            |g| {
                let f_hat = pma::mask_attention(model, &feats, g)?;
                Ok(tensor::sum_squares(&f_hat.tokens))
            },
            &gate0,
            DEFAULT_H,
        )?
    };

    Ok(vec![
        PathReport { name: "pmg+total_loss", max_rel: pmg_path, probes },
        PathReport { name: "pmg+kl_loss (frozen target)", max_rel: kl_path, probes },
        PathReport { name: "pma+total_loss", max_rel: pma_path, probes },
        PathReport { name: "full pipeline+total_loss", max_rel: full, probes },
        PathReport { name: "mask_attention gate input", max_rel: gate_path, probes: 64 },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_essentially_exact() {
        let mut rng = Rng::new(1);
        let x = randn(vec![2, 4], &mut rng);
        let rel = gradcheck(|x| Ok(tensor::sum_squares(x)), &x, DEFAULT_H).unwrap();
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn constant_function_has_zero_gradient_both_ways() {
        let mut rng = Rng::new(2);
        let x = randn(vec![3, 3], &mut rng);
        let c = Tensor::constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let rel = gradcheck(|_x| Ok(tensor::sum_squares(&c)), &x, DEFAULT_H).unwrap();
        assert_eq!(rel, 0.0);
    }

    #[test]
    fn rejects_out_of_range_h() {
        let x = Tensor::constant(vec![1], vec![1.0]);
        assert!(gradcheck(|x| Ok(tensor::sum_squares(x)), &x, 1e-2).is_err());
        assert!(gradcheck(|x| Ok(tensor::sum_squares(x)), &x, 1e-7).is_err());
    }

    #[test]
    fn op_suite_stays_under_tolerance() {
        for r in op_suite().unwrap() {
            assert!(
                r.max_rel < TOLERANCE,
                "op {} exceeded tolerance: {}",
                r.name,
                r.max_rel
            );
        }
    }
}
