//! Command-line acceptance: reproducibility of every artifact under
//! identical flags and seeds (criterion 9), exit-code contract, and the
//! documented output formats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgp_core::checkpoint;
use sgp_core::model::{Model, ModelConfig};
use sgp_core::sgt;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sgp")
}

fn tmpdir(tag: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("sgp-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&p);
    fs::create_dir_all(&p).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn sgp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under a directory, keyed by relative path.
fn dir_snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn assert_identical_trees(a: &Path, b: &Path, what: &str) {
    let (sa, sb) = (dir_snapshot(a), dir_snapshot(b));
    assert_eq!(
        sa.keys().collect::<Vec<_>>(),
        sb.keys().collect::<Vec<_>>(),
        "{what}: file sets differ"
    );
    for (k, va) in &sa {
        assert_eq!(va, &sb[k], "{what}: {k} differs between reruns");
    }
}

const SMALL_CFG: &str = "model.dim=16\nmodel.blocks=1\nmodel.patch=4\nsupport.k=2\n\
                         train.steps=12\ntrain.lr=0.001\nseed=5\n";

#[test]
fn criterion_9_reproducibility() {
    let root = tmpdir("c9");
    let cfg = root.join("cfg.txt");
    fs::write(&cfg, SMALL_CFG).unwrap();

    // gen-data twice: byte-identical trees
    let (d1, d2) = (root.join("d1"), root.join("d2"));
    for d in [&d1, &d2] {
        let o = run(&[
            "gen-data", "--kind", "shapes2d", "--n", "30", "--size", "32", "--seed", "9",
            "--out", d.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    assert_identical_trees(&d1, &d2, "gen-data rerun");

    // train twice on the same corpus: metrics, config and checkpoint match
    let (r1, r2) = (root.join("r1"), root.join("r2"));
    for r in [&r1, &r2] {
        let o = run(&[
            "train", "--data", d1.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
            "--out", r.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_identical_trees(&r1, &r2, "train rerun");

    // eval twice: identical stdout
    let ev = |r: &Path| {
        stdout(&run(&[
            "eval", "--data", d1.to_str().unwrap(), "--ckpt",
            r.join("best.ckpt").to_str().unwrap(), "--split", "test",
        ]))
    };
    assert_eq!(ev(&r1), ev(&r1));

    // predict twice: byte-identical artifacts
    let (p1, p2) = (root.join("p1"), root.join("p2"));
    for p in [&p1, &p2] {
        let o = run(&[
            "predict", "--data", d1.to_str().unwrap(), "--ckpt",
            r1.join("best.ckpt").to_str().unwrap(), "--index", "0",
            "--out", p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_identical_trees(&p1, &p2, "predict rerun");
    println!("[acceptance] criterion 9 (reproducibility): PASS (gen/train/eval/predict byte-identical)");
    let _ = fs::remove_dir_all(&root);
}

#[test]
fn exit_codes_follow_contract() {
    // 2: usage error (missing required flag)
    let o = run(&["gen-data", "--kind", "shapes2d", "--n", "4", "--size", "32"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    // 2: unknown config key
    let root = tmpdir("exit2");
    let bad = root.join("bad.txt");
    fs::write(&bad, "model.width=3\n").unwrap();
    let o = run(&[
        "train", "--data", root.to_str().unwrap(), "--config", bad.to_str().unwrap(),
        "--out", root.join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    // 2: unknown study name is rejected at parse time
    let o = run(&["ablate", "--study", "bogus", "--out", root.join("a").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    // 3: unreadable checkpoint, message names the file
    let d = root.join("d");
    let o = run(&[
        "gen-data", "--kind", "shapes2d", "--n", "30", "--size", "32", "--seed", "3",
        "--out", d.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = run(&[
        "eval", "--data", d.to_str().unwrap(), "--ckpt", root.join("nope").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("nope"),
        "error should name the missing checkpoint"
    );
    let _ = fs::remove_dir_all(&root);
}

#[test]
fn gen_data_manifest_has_one_line_per_sample() {
    let root = tmpdir("manifest");
    let d = root.join("d");
    let o = run(&[
        "gen-data", "--kind", "shapes2d", "--n", "104", "--size", "64", "--classes", "1",
        "--seed", "7", "--out", d.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 104);
    let _ = fs::remove_dir_all(&root);
}

/// A dataset whose masks are all empty plus a zeroed decoder head: every
/// prediction and every target threshold to the empty set, so dice is
/// exactly 1 and the eval command prints it.
#[test]
fn eval_on_perfect_fixture_prints_mean_dice_one() {
    let root = tmpdir("perfect");
    let d = root.join("d");
    let hw = 16usize;
    for i in 0..6 {
        let img: Vec<f32> = (0..hw * hw).map(|p| ((p * 31 + i * 7) % 97) as f32 / 97.0).collect();
        sgt::write_file(&d.join(format!("images/{i:04}.sgt")), &[1, hw, hw], &img).unwrap();
        sgt::write_file(
            &d.join(format!("masks/{i:04}.sgt")),
            &[1, hw, hw],
            &vec![0.0; hw * hw],
        )
        .unwrap();
    }
    let manifest = "0 sup images/0000.sgt masks/0000.sgt\n\
                    1 sup images/0001.sgt masks/0001.sgt\n\
                    2 qry images/0002.sgt masks/0002.sgt\n\
                    3 qry images/0003.sgt masks/0003.sgt\n\
                    4 qry images/0004.sgt masks/0004.sgt\n\
                    5 test images/0005.sgt masks/0005.sgt\n";
    fs::write(d.join("manifest.txt"), manifest).unwrap();
    fs::write(d.join("meta.txt"), "classes=1\nhw=16\ndepth=1\nseed=0\n").unwrap();

    // checkpoint with a zeroed final head: logits 0 -> probs 0.5 -> empty
    let cfg_text = "model.dim=16\nmodel.blocks=1\nmodel.patch=4\nsupport.k=2\nseed=5\n";
    let cfg = sgp_core::config::Config::parse(cfg_text).unwrap();
    let model = Model::new(
        ModelConfig { classes: 1, ..cfg.model_config(1, 1) },
        cfg.seed,
    )
    .unwrap();
    for (name, t) in model.params.all() {
        if name.starts_with("dec.fi.head") {
            t.update_data(|_, v| *v = 0.0);
        }
    }
    let ckpt = root.join("zero.ckpt");
    checkpoint::save(&ckpt, &model.params).unwrap();
    fs::write(ckpt.join("config.txt"), cfg_text).unwrap();

    let o = run(&[
        "eval", "--data", d.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(),
        "--split", "test",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("mean dice 1.0000"), "got: {out}");
    let _ = fs::remove_dir_all(&root);
}

#[test]
fn predict_writes_one_pgm_per_class_and_boxes() {
    let root = tmpdir("predict");
    let d = root.join("d");
    let o = run(&[
        "gen-data", "--kind", "shapes2d", "--n", "30", "--size", "32", "--classes", "2",
        "--seed", "13", "--out", d.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let cfg = root.join("cfg.txt");
    fs::write(&cfg, SMALL_CFG).unwrap();
    let r = root.join("r");
    let o = run(&[
        "train", "--data", d.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", r.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let p = root.join("p");
    let o = run(&[
        "predict", "--data", d.to_str().unwrap(), "--ckpt",
        r.join("best.ckpt").to_str().unwrap(), "--index", "3", "--out", p.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgms: Vec<_> = fs::read_dir(&p)
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().to_string_lossy().into_owned();
            n.ends_with(".pgm").then_some(n)
        })
        .collect();
    assert_eq!(pgms.len(), 2, "one PGM per class: {pgms:?}");
    let (dims, probs) = sgt::read_file(&p.join("pred.sgt")).unwrap();
    assert_eq!(dims, vec![2, 32, 32]);
    assert!(probs.iter().all(|v| (0.0..=1.0).contains(v)));
    let boxes = fs::read_to_string(p.join("boxes.txt")).unwrap();
    assert_eq!(boxes.lines().count(), 2);
    let _ = fs::remove_dir_all(&root);
}

#[test]
fn train_then_eval_reproduces_logged_best_dice() {
    let root = tmpdir("traineval");
    let d = root.join("d");
    run(&[
        "gen-data", "--kind", "shapes2d", "--n", "30", "--size", "32", "--seed", "17",
        "--out", d.to_str().unwrap(),
    ]);
    let cfg = root.join("cfg.txt");
    fs::write(&cfg, SMALL_CFG).unwrap();
    let r = root.join("r");
    let o = run(&[
        "train", "--data", d.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", r.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let train_out = stdout(&o);
    let logged: f64 = train_out
        .lines()
        .find(|l| l.contains("best test dice"))
        .and_then(|l| l.split("best test dice ").nth(1))
        .and_then(|s| s.split(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    let o = run(&[
        "eval", "--data", d.to_str().unwrap(), "--ckpt",
        r.join("best.ckpt").to_str().unwrap(), "--split", "test",
    ]);
    let eval_out = stdout(&o);
    let evaluated: f64 = eval_out
        .lines()
        .find(|l| l.starts_with("mean dice"))
        .and_then(|l| l.split(' ').nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        (logged - evaluated).abs() < 1e-6,
        "logged {logged} vs evaluated {evaluated}"
    );
    let _ = fs::remove_dir_all(&root);
}

#[test]
fn gradcheck_command_passes_and_reports() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("all gradient checks passed"));
    assert!(out.lines().filter(|l| l.starts_with("op ")).count() >= 20);
    assert!(out.lines().filter(|l| l.starts_with("path ")).count() >= 4);
}

#[test]
fn ablate_csv_row_contract() {
    // smallest meaningful study: 2 seeds, 2 sizes, very short runs
    let root = tmpdir("ablate");
    let o = run(&[
        "ablate", "--study", "support-size", "--sizes", "1,2", "--seeds", "1,2",
        "--n", "12", "--size", "16", "--steps", "6", "--seed", "5",
        "--out", root.join("s").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(root.join("s/support-size.csv")).unwrap();
    let data_rows = csv
        .lines()
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f.len() == 5 && f[2].parse::<u64>().is_ok()
        })
        .count();
    assert_eq!(data_rows, 4, "one row per size per seed:\n{csv}");
    assert!(csv.lines().filter(|l| l.contains(",mean,")).count() == 2);
    assert!(csv.lines().filter(|l| l.contains(",std,")).count() == 2);
    let _ = fs::remove_dir_all(&root);
}
