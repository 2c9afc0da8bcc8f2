//! Synthetic corpora and the on-disk dataset layout.
//!
//! Two generators: `gen_shapes2d` draws anti-aliased ellipses and
//! rectangles over textured noise; `gen_tubes3d` draws volumes holding a
//! drifting target tube plus an opposite-polarity decoy blob, so the
//! image alone is ambiguous about which structure is wanted — the
//! support set (and, mid-volume, the slice memory) carries that
//! information. Masks are exact foreground indicators at pixel centers;
//! anti-aliasing only softens the rendered image.
//!
//! Dataset directory layout:
//!   images/NNNN.sgt   masks/NNNN.sgt
//!   manifest.txt      lines "<idx> <sup|qry|test> <image> <mask>"
//!   meta.txt          key=value: classes, hw, depth, seed

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sgt;
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Support,
    Query,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Support => "sup",
            Split::Query => "qry",
            Split::Test => "test",
        }
    }

    pub fn from_tag(s: &str) -> Result<Split> {
        match s {
            "sup" => Ok(Split::Support),
            "qry" => Ok(Split::Query),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("manifest: unknown split tag {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub classes: usize,
    pub hw: usize,
    pub depth: usize, // 1 for 2D corpora
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SampleEntry {
    pub idx: usize,
    pub split: Split,
    pub image: String,
    pub mask: String,
}

pub struct Dataset {
    pub root: PathBuf,
    pub meta: Meta,
    pub entries: Vec<SampleEntry>,
}

// ── manifest / meta parsing (total over arbitrary text) ─────────────────

fn sane_rel_path(p: &str) -> bool {
    !p.is_empty()
        && !p.starts_with('/')
        && !p.contains("..")
        && p.chars().all(|c| c.is_ascii_alphanumeric() || "/._-".contains(c))
}

pub fn parse_manifest(text: &str) -> Result<Vec<SampleEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad index", lineno + 1)))?;
        let split = Split::from_tag(fields[1])?;
        if !sane_rel_path(fields[2]) || !sane_rel_path(fields[3]) {
            return Err(Error::Format(format!(
                "manifest line {}: paths must be plain relative paths",
                lineno + 1
            )));
        }
        if idx != entries.len() {
            return Err(Error::Format(format!(
                "manifest line {}: indices must be dense and ordered",
                lineno + 1
            )));
        }
        entries.push(SampleEntry {
            idx,
            split,
            image: fields[2].to_string(),
            mask: fields[3].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(Error::Format("manifest: no samples".into()));
    }
    Ok(entries)
}

pub fn parse_meta(text: &str) -> Result<Meta> {
    let (mut classes, mut hw, mut depth, mut seed) = (None, None, None, None);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("meta line {}: expected key=value", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Format(format!("meta: bad value for {k}")))
        };
        match k {
            "classes" => classes = Some(parse_usize(v)?),
            "hw" => hw = Some(parse_usize(v)?),
            "depth" => depth = Some(parse_usize(v)?),
            "seed" => {
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| Error::Format("meta: bad value for seed".into()))?,
                )
            }
            other => return Err(Error::Format(format!("meta: unknown key {other:?}"))),
        }
    }
    match (classes, hw, depth, seed) {
        (Some(classes), Some(hw), Some(depth), Some(seed))
            if classes > 0 && hw > 0 && depth > 0 =>
        {
            Ok(Meta { classes, hw, depth, seed })
        }
        _ => Err(Error::Format("meta: requires positive classes, hw, depth and a seed".into())),
    }
}

impl Dataset {
    pub fn load(root: impl Into<PathBuf>) -> Result<Dataset> {
        let root = root.into();
        let read = |name: &str| -> Result<String> {
            let p = root.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let meta = parse_meta(&read("meta.txt")?)?;
        let entries = parse_manifest(&read("manifest.txt")?)?;
        Ok(Dataset { root, meta, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_volumetric(&self) -> bool {
        self.meta.depth > 1
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.idx).collect()
    }

    pub fn image(&self, idx: usize) -> Result<Tensor> {
        self.read_tensor(&self.entries[idx].image)
    }

    pub fn mask(&self, idx: usize) -> Result<Tensor> {
        self.read_tensor(&self.entries[idx].mask)
    }

    fn read_tensor(&self, rel: &str) -> Result<Tensor> {
        let (dims, data) = sgt::read_file(&self.root.join(rel))?;
        Ok(Tensor::constant(dims, data))
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {} {} {}\n", e.idx, e.split.tag(), e.image, e.mask));
        }
        sgt::write_bytes_atomic(&self.root.join("manifest.txt"), out.as_bytes())?;
        let meta = format!(
            "classes={}\nhw={}\ndepth={}\nseed={}\n",
            self.meta.classes, self.meta.hw, self.meta.depth, self.meta.seed
        );
        sgt::write_bytes_atomic(&self.root.join("meta.txt"), meta.as_bytes())
    }
}

/// Reassign splits: shuffled by seed into test (round(n·test_frac)),
/// support (support_size), query (rest). The query set must stay strictly
/// larger than the support set.
pub fn split_dataset(
    ds: &mut Dataset,
    support_size: usize,
    test_frac: f64,
    seed: u64,
) -> Result<()> {
    let n = ds.len();
    if support_size == 0 {
        return Err(Error::Config("split: support_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::Config(format!("split: test_frac {test_frac} not in [0,1)")));
    }
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_qry = n.saturating_sub(n_test + support_size);
    if n_qry <= support_size {
        return Err(Error::Config(format!(
            "split: infeasible sizes for n={n}: support={support_size}, test={n_test} \
             leave {n_qry} queries (need more than support)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).split("split").shuffle(&mut order);
    for (pos, &idx) in order.iter().enumerate() {
        ds.entries[idx].split = if pos < n_test {
            Split::Test
        } else if pos < n_test + support_size {
            Split::Support
        } else {
            Split::Query
        };
    }
    ds.write_manifest()
}

// ── drawing helpers ─────────────────────────────────────────────────────

struct Shape {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rect: bool,
}

impl Shape {
    /// Rendering alpha in [0,1]: 1 deep inside, 0 outside, ~linear ramp
    /// across one pixel at the boundary.
    fn alpha(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        if self.rect {
            let ay = self.ry - dy.abs();
            let ax = self.rx - dx.abs();
            (ay.min(ax) + 0.5).clamp(0.0, 1.0)
        } else {
            let q = (dy / self.ry).powi(2) + (dx / self.rx).powi(2);
            let sd = (q.sqrt() - 1.0) * self.ry.min(self.rx);
            (0.5 - sd).clamp(0.0, 1.0)
        }
    }

    /// Exact membership at a pixel center.
    fn inside(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        if self.rect {
            dy.abs() <= self.ry && dx.abs() <= self.rx
        } else {
            (dy / self.ry).powi(2) + (dx / self.rx).powi(2) <= 1.0
        }
    }
}

/// Smooth value-noise field in [lo, hi]: coarse uniform grid, bilinearly
/// upsampled, plus fine grain.
fn noise_field(hw: usize, lo: f32, hi: f32, grain: f64, rng: &mut Rng) -> Vec<f32> {
    let g = (hw / 8).max(2) + 1;
    let coarse: Vec<f32> = (0..g * g).map(|_| rng.uniform() as f32).collect();
    let coarse_t = Tensor::constant(vec![1, g, g], coarse);
    let up = resize_bilinear(&coarse_t, hw, hw).expect("noise upsample");
    up.to_vec()
        .iter()
        .map(|&v| {
            let base = lo + (hi - lo) * v;
            (base + (rng.normal() * grain) as f32).clamp(0.0, 1.0)
        })
        .collect()
}

fn draw_shape(img: &mut [f32], mask: &mut [f32], hw: usize, s: &Shape, value: f64, rng: &mut Rng) {
    let y0 = ((s.cy - s.ry - 1.0).floor().max(0.0)) as usize;
    let y1 = ((s.cy + s.ry + 1.0).ceil().min(hw as f64 - 1.0)) as usize;
    let x0 = ((s.cx - s.rx - 1.0).floor().max(0.0)) as usize;
    let x1 = ((s.cx + s.rx + 1.0).ceil().min(hw as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (yf, xf) = (y as f64, x as f64);
            let a = s.alpha(yf, xf);
            if a > 0.0 {
                let tex = value + rng.normal() * 0.02;
                let i = y * hw + x;
                img[i] = ((1.0 - a) * img[i] as f64 + a * tex).clamp(0.0, 1.0) as f32;
            }
            if s.inside(yf, xf) {
                mask[y * hw + x] = 1.0;
            }
        }
    }
}

fn random_shape(hw: usize, rng: &mut Rng) -> Shape {
    let rmin = hw as f64 / 10.0;
    let rmax = hw as f64 / 5.5;
    let ry = rng.range(rmin, rmax);
    let rx = rng.range(rmin, rmax);
    let margin = ry.max(rx) + 1.0;
    Shape {
        cy: rng.range(margin, hw as f64 - 1.0 - margin),
        cx: rng.range(margin, hw as f64 - 1.0 - margin),
        ry,
        rx,
        rect: rng.chance(0.5),
    }
}

// ── 2D shapes corpus ────────────────────────────────────────────────────

pub fn gen_shapes2d(
    n: usize,
    hw: usize,
    classes: usize,
    seed: u64,
    out: impl Into<PathBuf>,
) -> Result<Dataset> {
    if classes == 0 || n == 0 {
        return Err(Error::Config("gen_shapes2d: n and classes must be >= 1".into()));
    }
    if hw < 16 {
        return Err(Error::Config("gen_shapes2d: hw must be >= 16".into()));
    }
    let root: PathBuf = out.into();
    let rng = Rng::new(seed).split("shapes2d");
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.split_index("sample", i as u64);
        let mut img = noise_field(hw, 0.08, 0.42, 0.02, &mut r);
        let mut mask = vec![0.0f32; classes * hw * hw];
        for c in 0..classes {
            // per-class intensity band keeps classes separable
            let base = 0.60 + 0.32 * (c + 1) as f64 / classes as f64;
            let count = 1 + r.below(3);
            for _ in 0..count {
                let s = random_shape(hw, &mut r);
                let value = base + r.range(-0.04, 0.04);
                draw_shape(&mut img, &mut mask[c * hw * hw..(c + 1) * hw * hw], hw, &s, value, &mut r);
            }
            debug_assert!(
                mask[c * hw * hw..(c + 1) * hw * hw].iter().any(|&v| v == 1.0),
                "class without foreground"
            );
        }
        let image_rel = format!("images/{i:04}.sgt");
        let mask_rel = format!("masks/{i:04}.sgt");
        sgt::write_file(&root.join(&image_rel), &[1, hw, hw], &img)?;
        sgt::write_file(&root.join(&mask_rel), &[classes, hw, hw], &mask)?;
        entries.push(SampleEntry { idx: i, split: Split::Query, image: image_rel, mask: mask_rel });
    }
    let mut ds = Dataset {
        root,
        meta: Meta { classes, hw, depth: 1, seed },
        entries,
    };
    default_split(&mut ds, seed)?;
    Ok(ds)
}

fn default_split(ds: &mut Dataset, seed: u64) -> Result<()> {
    let n = ds.len();
    // fall back to writing the manifest unsplit when the corpus is too
    // small to carve out the default support/test sets
    let support = 4usize;
    let n_test = (n as f64 * 0.2).round() as usize;
    if n > support * 2 + n_test && n_test > 0 {
        split_dataset(ds, support, 0.2, seed)
    } else {
        ds.write_manifest()
    }
}

// ── 3D tubes corpus ─────────────────────────────────────────────────────

struct Track {
    cy: f64,
    cx: f64,
    r: f64,
    vy: f64,
    vx: f64,
}

impl Track {
    fn step(&mut self, hw: usize, max_step: f64, rng: &mut Rng) {
        self.vy = (self.vy + rng.normal() * 0.4 * max_step).clamp(-max_step, max_step);
        self.vx = (self.vx + rng.normal() * 0.4 * max_step).clamp(-max_step, max_step);
        let lo = self.r + 1.0;
        let hi = hw as f64 - 2.0 - self.r;
        self.cy = (self.cy + self.vy).clamp(lo, hi);
        self.cx = (self.cx + self.vx).clamp(lo, hi);
    }
}

pub fn gen_tubes3d(
    n: usize,
    depth: usize,
    hw: usize,
    seed: u64,
    out: impl Into<PathBuf>,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("gen_tubes3d: n must be >= 1".into()));
    }
    if depth < 4 {
        return Err(Error::Config("gen_tubes3d: depth must be >= 4".into()));
    }
    if hw < 16 {
        return Err(Error::Config("gen_tubes3d: hw must be >= 16".into()));
    }
    let root: PathBuf = out.into();
    let rng = Rng::new(seed).split("tubes3d");
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.split_index("sample", i as u64);
        let h = hw as f64;
        // target tube: larger, polarity chosen per volume
        let bright_target = r.chance(0.5);
        let r_t = r.range(h / 7.0, h / 5.0);
        let mut target = Track {
            cy: r.range(r_t + 2.0, h - 3.0 - r_t),
            cx: r.range(r_t + 2.0, h * 0.5 - r_t),
            r: r_t,
            vy: 0.0,
            vx: 0.0,
        };
        // decoy blob: smaller, opposite polarity, starts on the other side
        let r_d = r.range(h / 10.0, h / 7.5);
        let mut decoy = Track {
            cy: r.range(r_d + 2.0, h - 3.0 - r_d),
            cx: r.range(h * 0.5 + r_d, h - 3.0 - r_d),
            r: r_d,
            vy: 0.0,
            vx: 0.0,
        };
        let contrast_t = r.range(0.24, 0.30);
        let contrast_d = r.range(0.24, 0.30);
        // one short window where the target's contrast dips: static
        // support alone localizes these slices poorly
        let fade_at = r.below(depth);
        let fade_len = r.below(3); // 0..=2 slices
        let max_step = 0.28 * r_t;

        let mut img = vec![0.0f32; depth * hw * hw];
        let mut mask = vec![0.0f32; depth * hw * hw];
        for s in 0..depth {
            let bg = noise_field(hw, 0.44, 0.56, 0.015, &mut r);
            let plane = &mut img[s * hw * hw..(s + 1) * hw * hw];
            plane.copy_from_slice(&bg);
            let fading = s >= fade_at && s < fade_at + fade_len;
            let ct = if fading { contrast_t * 0.35 } else { contrast_t };
            let tv = if bright_target { 0.5 + ct } else { 0.5 - ct };
            let dv = if bright_target { 0.5 - contrast_d } else { 0.5 + contrast_d };
            let tshape = Shape { cy: target.cy, cx: target.cx, ry: target.r, rx: target.r, rect: false };
            let dshape = Shape { cy: decoy.cy, cx: decoy.cx, ry: decoy.r, rx: decoy.r, rect: false };
            draw_shape(plane, &mut mask[s * hw * hw..(s + 1) * hw * hw], hw, &tshape, tv, &mut r);
            let mut scratch = vec![0.0f32; hw * hw];
            draw_shape(plane, &mut scratch, hw, &dshape, dv, &mut r);
            target.step(hw, max_step, &mut r);
            decoy.step(hw, max_step * 1.2, &mut r);
        }
        let image_rel = format!("images/{i:04}.sgt");
        let mask_rel = format!("masks/{i:04}.sgt");
        sgt::write_file(&root.join(&image_rel), &[depth, 1, hw, hw], &img)?;
        sgt::write_file(&root.join(&mask_rel), &[depth, 1, hw, hw], &mask)?;
        entries.push(SampleEntry { idx: i, split: Split::Query, image: image_rel, mask: mask_rel });
    }
    let mut ds = Dataset {
        root,
        meta: Meta { classes: 1, hw, depth, seed },
        entries,
    };
    default_split(&mut ds, seed)?;
    Ok(ds)
}

// ── support pools and episodes ──────────────────────────────────────────

/// One conditioning pair: a 2D slice image with its mask. For volumetric
/// datasets each support volume contributes every slice.
pub struct SupportItem {
    pub sample_idx: usize,
    pub slice: usize,
    pub image: Tensor, // [C, H, W]
    pub mask: Tensor,  // [K, H, W]
}

/// The support pool plus the episode policy. In the duplicated-support
/// regime the pool is a copy of training samples and an episode may
/// legitimately retrieve its own query.
pub struct SupportPool {
    pub items: Vec<SupportItem>,
    pub duplicated: bool,
}

pub fn slice_image(vol: &Tensor, s: usize) -> Result<Tensor> {
    let dims = vol.dims().to_vec();
    match dims.as_slice() {
        [c, h, w] => {
            if s != 0 {
                return Err(Error::Shape("slice_image: 2D sample has one slice".into()));
            }
            Ok(Tensor::constant(vec![*c, *h, *w], vol.to_vec()))
        }
        [d, c, h, w] => {
            if s >= *d {
                return Err(Error::Shape(format!("slice_image: slice {s} of {d}")));
            }
            let plane = c * h * w;
            Ok(Tensor::constant(
                vec![*c, *h, *w],
                vol.data()[s * plane..(s + 1) * plane].to_vec(),
            ))
        }
        other => Err(Error::Shape(format!("slice_image: bad dims {other:?}"))),
    }
}

impl SupportPool {
    /// Normal regime: every slice of every support-split sample.
    pub fn from_dataset(ds: &Dataset) -> Result<SupportPool> {
        let sup = ds.indices(Split::Support);
        if sup.is_empty() {
            return Err(Error::Config(
                "dataset has no support split; run split first".into(),
            ));
        }
        Self::from_indices(ds, &sup, false)
    }

    /// Duplicated-support regime: the pool is a copy of `size` training
    /// samples chosen deterministically; queries stay in training.
    pub fn duplicated(ds: &Dataset, size: usize, seed: u64) -> Result<SupportPool> {
        let mut train: Vec<usize> = ds
            .entries
            .iter()
            .filter(|e| e.split != Split::Test)
            .map(|e| e.idx)
            .collect();
        if train.is_empty() {
            return Err(Error::Config("duplicated pool: no training samples".into()));
        }
        Rng::new(seed).split("dup-support").shuffle(&mut train);
        let chosen: Vec<usize> = train.iter().cloned().cycle().take(size).collect();
        Self::from_indices(ds, &chosen, true)
    }

    fn from_indices(ds: &Dataset, indices: &[usize], duplicated: bool) -> Result<SupportPool> {
        let mut items = Vec::new();
        for &idx in indices {
            let img = ds.image(idx)?;
            let mask = ds.mask(idx)?;
            let depth = if img.dims().len() == 4 { img.dims()[0] } else { 1 };
            for s in 0..depth {
                items.push(SupportItem {
                    sample_idx: idx,
                    slice: s,
                    image: slice_image(&img, s)?,
                    mask: slice_image(&mask, s)?,
                });
            }
        }
        Ok(SupportPool { items, duplicated })
    }
}

/// One query with its retrieved support pairs.
pub struct Episode {
    pub query_idx: usize,
    pub query_image: Tensor,
    pub query_mask: Tensor,
    /// Positions into the pool, most similar first.
    pub support: Vec<usize>,
}

// ── PGM export ──────────────────────────────────────────────────────────

/// Binary 8-bit PGM preview of a probability map.
pub fn write_pgm(path: &Path, h: usize, w: usize, probs: &[f32]) -> Result<()> {
    assert_eq!(probs.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(probs.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    sgt::write_bytes_atomic(path, &out)
}
