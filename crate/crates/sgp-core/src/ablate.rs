//! The two ablation studies: component on/off and support-set size.
//! Each configuration trains under several seeds; the CSV carries one
//! row per (configuration, seed) plus mean/std summary rows, and the
//! component study appends margin and verdict lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::data::{gen_shapes2d, gen_tubes3d, split_dataset, Dataset};
use crate::error::Result;
use crate::model::ComponentMode;
use crate::sgt;
use crate::train::{train, TrainConfig};

pub const STUDY_CSV_HEADER: &str = "study,config,seed,dice,iou";

/// Margin both comparisons must clear for a conclusive component verdict.
pub const COMPONENT_MARGIN: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct StudyRow {
    pub config: String,
    pub seed: u64,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug)]
pub struct StudySummary {
    pub config: String,
    pub mean_dice: f64,
    pub std_dice: f64,
}

#[derive(Debug)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub summaries: Vec<StudySummary>,
    /// Component study only: (comparison label, margin, conclusive).
    pub margins: Vec<(String, f64, bool)>,
    pub conclusive: Option<bool>,
    pub csv: PathBuf,
}

/// Corpus and schedule knobs for a study run; defaults are sized for a
/// two-core desk machine.
#[derive(Clone, Debug)]
pub struct StudySpec {
    pub n: usize,
    pub size: usize,
    pub depth: usize,
    pub steps: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            n: 16,
            size: 32,
            depth: 6,
            steps: 240,
            seed: 42,
            seeds: vec![1, 2, 3],
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(rows: &[StudyRow], configs: &[String]) -> Vec<StudySummary> {
    configs
        .iter()
        .map(|c| {
            let ds: Vec<f64> =
                rows.iter().filter(|r| &r.config == c).map(|r| r.dice).collect();
            let (mean_dice, std_dice) = mean_std(&ds);
            StudySummary { config: c.clone(), mean_dice, std_dice }
        })
        .collect()
}

fn train_once(
    ds: &Dataset,
    cfg: &Config,
    spec: &StudySpec,
    mode: ComponentMode,
    duplicated: Option<usize>,
    support_k: usize,
    seed: u64,
    out: &Path,
) -> Result<StudyRow> {
    let mc = cfg.model_config(1, ds.meta.classes);
    let tc = TrainConfig {
        steps: spec.steps,
        lr: cfg.train_lr,
        support_k,
        bank_capacity: support_k.max(1),
        loss: cfg.train_config().loss,
        seed,
        mode,
        duplicated_support: duplicated,
        eval_every: 4,
    };
    let report = train(ds, &mc, &tc, out)?;
    Ok(StudyRow {
        config: String::new(),
        seed,
        dice: report.best_dice,
        iou: report.final_eval.mean_iou,
    })
}

fn write_csv(report: &StudyReport, study: &str) -> Result<()> {
    let mut out = String::from(STUDY_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(out, "{study},{},{},{:.6},{:.6}", r.config, r.seed, r.dice, r.iou);
    }
    for s in &report.summaries {
        let _ = writeln!(out, "{study},{},mean,{:.6},", s.config, s.mean_dice);
        let _ = writeln!(out, "{study},{},std,{:.6},", s.config, s.std_dice);
    }
    for (label, margin, ok) in &report.margins {
        let _ = writeln!(out, "{study},margin:{label},,{margin:.6},");
        let _ = writeln!(
            out,
            "{study},verdict:{label},,{},",
            if *ok { "conclusive" } else { "inconclusive" }
        );
    }
    sgt::write_bytes_atomic(&report.csv, out.as_bytes())
}

/// Component on/off on a volumetric corpus: the gated-attention-only
/// baseline, the pseudo-mask path without slice memory, and the full
/// model (the three rows of the component table).
pub fn components_study(cfg: &Config, spec: &StudySpec, out: &Path) -> Result<StudyReport> {
    let data_dir = out.join("data");
    let mut ds = gen_tubes3d(spec.n, spec.depth, spec.size, spec.seed, &data_dir)?;
    split_dataset(&mut ds, 4, 0.25, spec.seed)?;
    let modes = [
        ("pmg_off", ComponentMode::PmgOff),
        ("mem3d_off", ComponentMode::Mem3dOff),
        ("full", ComponentMode::Full),
    ];
    let mut rows = Vec::new();
    for (label, mode) in modes {
        for &seed in &spec.seeds {
            let run = out.join(format!("run-{label}-s{seed}"));
            let mut row =
                train_once(&ds, cfg, spec, mode, None, cfg.support_k, seed, &run)?;
            row.config = label.to_string();
            rows.push(row);
        }
    }
    let configs: Vec<String> = modes.iter().map(|(l, _)| l.to_string()).collect();
    let summaries = summarize(&rows, &configs);
    let get = |c: &str| summaries.iter().find(|s| s.config == c).unwrap().mean_dice;
    let full = get("full");
    let margins = vec![
        ("full_vs_pmg_off".to_string(), full - get("pmg_off"), full - get("pmg_off") >= COMPONENT_MARGIN),
        ("full_vs_mem3d_off".to_string(), full - get("mem3d_off"), full - get("mem3d_off") >= COMPONENT_MARGIN),
    ];
    let conclusive = Some(margins.iter().all(|(_, _, ok)| *ok));
    let report = StudyReport {
        rows,
        summaries,
        margins,
        conclusive,
        csv: out.join("components.csv"),
    };
    write_csv(&report, "components")?;
    Ok(report)
}

/// Support-set size sweep in the duplicated-support regime: the pool is
/// a copy of training samples of the requested size, so queries may
/// retrieve themselves and the training distribution stays unchanged.
pub fn support_size_study(
    cfg: &Config,
    spec: &StudySpec,
    sizes: &[usize],
    out: &Path,
) -> Result<StudyReport> {
    let data_dir = out.join("data");
    let mut ds = gen_shapes2d(spec.n, spec.size, 1, spec.seed, &data_dir)?;
    split_dataset(&mut ds, 4, 0.25, spec.seed)?;
    let mut rows = Vec::new();
    for &k in sizes {
        for &seed in &spec.seeds {
            let run = out.join(format!("run-k{k}-s{seed}"));
            let mut row = train_once(&ds, cfg, spec, ComponentMode::Full, Some(k), k, seed, &run)?;
            row.config = format!("k{k}");
            rows.push(row);
        }
    }
    let configs: Vec<String> = sizes.iter().map(|k| format!("k{k}")).collect();
    let summaries = summarize(&rows, &configs);
    let report = StudyReport {
        rows,
        summaries,
        margins: Vec::new(),
        conclusive: None,
        csv: out.join("support-size.csv"),
    };
    write_csv(&report, "support-size")?;
    Ok(report)
}
