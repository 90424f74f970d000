//! Desk-scale ablations. Trains each arm for several seeds and prints test
//! top-1 per length, then per-arm means.
//!
//! cargo run --release --example ablation -- tlsd configs/desk_synth.json 3 token
//! cargo run --release --example ablation -- shared configs/desk_synth.json 3 off
//!
//! `tlsd`: self-distillation off versus on at tau 0.5 and 0.9 (`token` or
//! `class` selects the student head). `shared`: per-length patch and
//! positional banks versus one shared pair, with distillation as configured
//! or `off`.

use std::path::Path;

use revit::experiments::{embedding_arms, mean_top1, run_ablation, tlsd_arms};
use revit::io::RunConfig;
use revit::training::DistillHead;

fn main() -> revit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map_or("tlsd", String::as_str);
    let config = args.get(1).map_or("configs/desk_synth.json", String::as_str);
    let seeds: u64 = args.get(2).map_or(3, |s| s.parse().expect("seed count"));
    let cfg = RunConfig::load(Path::new(config))?;
    let arms = match kind {
        "tlsd" => {
            let head = match args.get(3).map(String::as_str) {
                Some("class") => DistillHead::Class,
                _ => DistillHead::Token,
            };
            let lambda = cfg.distill.as_ref().map_or(0.5, |d| d.lambda);
            tlsd_arms(&[0.5, 0.9], lambda, head)?
        }
        "shared" => match args.get(3).map(String::as_str) {
            Some("off") => embedding_arms(None),
            _ => embedding_arms(cfg.effective_plan().distill),
        },
        other => {
            eprintln!("unknown ablation `{other}`; expected tlsd or shared");
            std::process::exit(1);
        }
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let k = cfg.model.grids.len();
    let runs = run_ablation(&cfg, &arms, &seeds, k)?;
    println!(
        "arm,seed,{}",
        (0..k).map(|i| format!("top1_len{i}")).collect::<Vec<_>>().join(",")
    );
    for r in &runs {
        let cells: Vec<String> = r.top1.iter().map(|v| format!("{v:.4}")).collect();
        println!("{},{},{}", r.arm, r.seed, cells.join(","));
    }
    for arm in &arms {
        let means: Vec<String> = (0..k)
            .map(|i| format!("{:.4}", mean_top1(&runs, &arm.name, i).unwrap_or(f64::NAN)))
            .collect();
        println!("mean {},{}", arm.name, means.join(","));
    }
    Ok(())
}
