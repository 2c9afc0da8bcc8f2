//! `sgp`: data generation, training, evaluation, prediction, gradient
//! checking, and the two ablation studies.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O or file
//! format, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sgp_core::ablate::{components_study, support_size_study, StudySpec};
use sgp_core::checkpoint;
use sgp_core::config::Config;
use sgp_core::data::{gen_shapes2d, gen_tubes3d, write_pgm, Dataset, Split, SupportPool};
use sgp_core::error::{Error, Result};
use sgp_core::gradcheck::{op_suite, path_suite, TOLERANCE};
use sgp_core::mem3d::propagate_volume;
use sgp_core::model::{forward_slice, ComponentMode, Model};
use sgp_core::pmg::rank_support;
use sgp_core::sgt;
use sgp_core::train::{evaluate, train, RetrievalIndex};

#[derive(Parser)]
#[command(name = "sgp", version, about = "support-guided prompting segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Shapes2d,
    Tubes3d,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Sup,
    Qry,
    Test,
}

impl SplitArg {
    fn to_split(self) -> Split {
        match self {
            SplitArg::Sup => Split::Support,
            SplitArg::Qry => Split::Query,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StudyArg {
    Components,
    #[value(name = "support-size")]
    SupportSize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Number of samples (volumes for tubes3d).
    #[arg(long)]
    n: usize,
    /// Square spatial extent.
    #[arg(long)]
    size: usize,
    /// Slices per volume (tubes3d only).
    #[arg(long, default_value_t = 8)]
    depth: usize,
    /// Foreground classes (shapes2d only).
    #[arg(long, default_value_t = 1)]
    classes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset index of the sample to predict.
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    study: StudyArg,
    /// Support sizes for the support-size study.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    sizes: Vec<usize>,
    /// Training seeds, one run per seed per configuration.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3])]
    seeds: Vec<u64>,
    /// Corpus samples.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Corpus spatial extent.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Corpus depth (components study).
    #[arg(long, default_value_t = 6)]
    depth: usize,
    /// Training steps per run.
    #[arg(long, default_value_t = 240)]
    steps: usize,
    /// Corpus seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/support/test splits.
    GenData(GenDataArgs),
    /// Train on a dataset; writes metrics.csv, config.txt and best.ckpt.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict one sample: probabilities (SGT), per-class PGM previews,
    /// and the derived box prompts.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck,
    /// Run an ablation study and write its CSV report.
    Ablate(AblateArgs),
}

fn load_config(explicit: Option<&Path>, ckpt: Option<&Path>) -> Result<Config> {
    if let Some(p) = explicit {
        return Config::load(p);
    }
    if let Some(c) = ckpt {
        let embedded = c.join("config.txt");
        if embedded.is_file() {
            return Config::load(&embedded);
        }
    }
    Ok(Config::default())
}

fn build_model(cfg: &Config, ds: &Dataset, ckpt: Option<&Path>) -> Result<Model> {
    let mc = cfg.model_config(1, ds.meta.classes);
    let model = Model::new(mc, cfg.seed)?;
    if let Some(dir) = ckpt {
        if !dir.join("manifest.txt").is_file() {
            return Err(Error::io(
                dir.join("manifest.txt"),
                std::io::Error::new(std::io::ErrorKind::NotFound, "unreadable checkpoint"),
            ));
        }
        checkpoint::load(dir, &model.params)?;
    }
    Ok(model)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let ds = match a.kind {
        DataKind::Shapes2d => gen_shapes2d(a.n, a.size, a.classes, a.seed, &a.out)?,
        DataKind::Tubes3d => gen_tubes3d(a.n, a.depth, a.size, a.seed, &a.out)?,
    };
    println!(
        "wrote {} samples ({} sup / {} qry / {} test) to {}",
        ds.len(),
        ds.indices(Split::Support).len(),
        ds.indices(Split::Query).len(),
        ds.indices(Split::Test).len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let ds = Dataset::load(&a.data)?;
    let mc = cfg.model_config(1, ds.meta.classes);
    let tc = cfg.train_config();
    sgt::write_bytes_atomic(&a.out.join("config.txt"), cfg.render().as_bytes())?;
    let report = train(&ds, &mc, &tc, &a.out)?;
    sgt::write_bytes_atomic(
        &report.checkpoint.join("config.txt"),
        cfg.render().as_bytes(),
    )?;
    println!(
        "trained {} steps; best test dice {:.4} at step {}; fallback boxes {}",
        tc.steps, report.best_dice, report.best_step, report.fallback_total
    );
    println!("checkpoint: {}", report.checkpoint.display());
    println!("metrics: {}", report.metrics.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Some(&a.ckpt))?;
    let ds = Dataset::load(&a.data)?;
    let model = build_model(&cfg, &ds, Some(&a.ckpt))?;
    let pool = SupportPool::from_dataset(&ds)?;
    let index = RetrievalIndex::build(&model, &pool)?;
    let report = evaluate(
        &model,
        &ds,
        a.split.to_split(),
        &pool,
        &index,
        cfg.support_k,
        cfg.resolved_capacity(),
        ComponentMode::Full,
    )?;
    for (c, (d, i)) in report.per_class.iter().enumerate() {
        println!("class {c} dice {d:.4} iou {i:.4}");
    }
    println!("mean dice {:.4}", report.mean_dice);
    println!("mean iou {:.4}", report.mean_iou);
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), Some(&a.ckpt))?;
    let ds = Dataset::load(&a.data)?;
    if a.index >= ds.len() {
        return Err(Error::Config(format!(
            "--index {} out of range for {} samples",
            a.index,
            ds.len()
        )));
    }
    let model = build_model(&cfg, &ds, Some(&a.ckpt))?;
    let pool = SupportPool::from_dataset(&ds)?;
    let index = RetrievalIndex::build(&model, &pool)?;
    let image = ds.image(a.index)?;
    let qe = index.query_embed(&model, &image)?;
    let picks = rank_support(&qe, &index.pool_embeds, cfg.support_k)?;
    let support = sgp_core::train::encode_support_set(&model, &pool, &picks)?;

    let classes = ds.meta.classes;
    let (probs, boxes, hw) = if ds.is_volumetric() {
        let vout = propagate_volume(
            &model,
            &image,
            &support,
            cfg.resolved_capacity(),
            ComponentMode::Full,
        )?;
        let d = vout.slices.len();
        let (h, w) = (ds.meta.hw, ds.meta.hw);
        let mut data = Vec::with_capacity(d * classes * h * w);
        for s in &vout.slices {
            data.extend_from_slice(&s.final_probs.data());
        }
        // previews and boxes come from the middle slice
        let mid = d / 2;
        (
            (vec![d, classes, h, w], data),
            vout.slices[mid].boxes.clone(),
            (h, w),
        )
    } else {
        let feats = model.encoder.forward(&image)?;
        let out = forward_slice(&model, &feats, &support, ComponentMode::Full)?;
        let (h, w) = (ds.meta.hw, ds.meta.hw);
        ((vec![classes, h, w], out.final_probs.to_vec()), out.boxes, (h, w))
    };

    sgt::write_file(&a.out.join("pred.sgt"), &probs.0, &probs.1)?;
    let (h, w) = hw;
    let plane = h * w;
    let preview_base = if ds.is_volumetric() {
        // middle slice of each class channel
        let d = probs.0[0];
        let mid = d / 2;
        mid * classes * plane
    } else {
        0
    };
    for c in 0..classes {
        let start = preview_base + c * plane;
        write_pgm(
            &a.out.join(format!("class_{c}.pgm")),
            h,
            w,
            &probs.1[start..start + plane],
        )?;
    }
    let mut box_text = String::new();
    for (c, (b, fallback)) in boxes.iter().enumerate() {
        box_text.push_str(&format!(
            "{c} {} {} {} {} {}\n",
            b.r0, b.c0, b.r1, b.c1, if *fallback { "fallback" } else { "ok" }
        ));
    }
    sgt::write_bytes_atomic(&a.out.join("boxes.txt"), box_text.as_bytes())?;
    println!(
        "wrote pred.sgt, {} PGM previews and boxes.txt to {}",
        classes,
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let mut failed = false;
    println!("finite-difference suite (tolerance {TOLERANCE:.0e})");
    for r in op_suite()? {
        let ok = r.max_rel < TOLERANCE;
        failed |= !ok;
        println!(
            "op   {:<32} max rel {:9.3e}  {}",
            r.name,
            r.max_rel,
            if ok { "ok" } else { "FAIL" }
        );
    }
    for r in path_suite()? {
        let ok = r.max_rel < TOLERANCE;
        failed |= !ok;
        println!(
            "path {:<32} max rel {:9.3e}  {}",
            r.name,
            r.max_rel,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Numerical("gradient check exceeded tolerance".into()));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = Config::default();
    let spec = StudySpec {
        n: a.n,
        size: a.size,
        depth: a.depth,
        steps: a.steps,
        seed: a.seed,
        seeds: a.seeds.clone(),
    };
    let report = match a.study {
        StudyArg::Components => components_study(&cfg, &spec, &a.out)?,
        StudyArg::SupportSize => support_size_study(&cfg, &spec, &a.sizes, &a.out)?,
    };
    for s in &report.summaries {
        println!("{:<12} mean dice {:.4} (std {:.4})", s.config, s.mean_dice, s.std_dice);
    }
    for (label, margin, ok) in &report.margins {
        println!(
            "{label}: margin {margin:+.4} ({})",
            if *ok { "conclusive" } else { "inconclusive" }
        );
    }
    println!("report: {}", report.csv.display());
    Ok(())
}

fn run() -> Result<()> {
    if let Ok(v) = std::env::var("SGP_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    match Cli::parse().command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
