use sgp_core::ablate::*;
use sgp_core::config::Config;
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("sgp-c6-probe");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let report = components_study(&Config::default(), &StudySpec::default(), &dir).unwrap();
    println!("elapsed {:.0}s", t0.elapsed().as_secs_f64());
    for s in &report.summaries {
        println!("{:<10} mean {:.4} std {:.4}", s.config, s.mean_dice, s.std_dice);
    }
    for (l, m, ok) in &report.margins {
        println!("{l}: {m:+.4} conclusive={ok}");
    }
    for r in &report.rows {
        println!("  {} seed {} dice {:.4}", r.config, r.seed, r.dice);
    }
    let _ = std::fs::remove_dir_all(&dir);
}
