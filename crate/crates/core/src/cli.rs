//! Command-line pipeline: each subcommand is one stage that reads and writes
//! fixed artifact files in the output directory.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adaptive::{
    benchmark_throughput, evaluate, export_tradeoff, format_g6, BenchConfig, ModelRef, Policy, TlaRef, TradeoffReport,
};
use crate::assigner::{train_tla, Tla};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, RunConfig};
use crate::labeling::{extract_labels, LabelSet};
use crate::model::ReViT;
use crate::numerics::ParamStore;
use crate::training::train;

pub const THREADS_ENV: &str = "REVIT_THREADS";

pub const REVIT_CKPT: &str = "revit.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LABELS: &str = "labels.csv";
pub const TLA_CKPT: &str = "tla.ckpt";
pub const TLA_REPORT: &str = "tla_report.txt";
pub const EVAL_CSV: &str = "eval.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";

const BENCH_HEADER: &str = "policy,ips";

#[derive(Parser, Debug)]
#[command(
    name = "revit",
    version,
    about = "Resizable ViT training and adaptive inference pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the resizable ViT; writes revit.ckpt and train_log.csv.
    TrainRevit(Flags),
    /// Label training samples with their minimum sufficient length; writes labels.csv.
    ExtractLabels(Flags),
    /// Train the token-length assigner on labels.csv; writes tla.ckpt.
    TrainTla(Flags),
    /// Accuracy and FLOPs per policy on the test split; writes eval.csv.
    Eval(Flags),
    /// Throughput per policy on the test split; writes bench.csv.
    Bench(Flags),
    /// Join eval.csv and bench.csv into tradeoff.csv.
    ExportCurve(Flags),
}

#[derive(Args, Debug, Clone)]
struct Flags {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Overrides the CIFAR-10 directory.
    #[arg(long, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    /// Overrides the output directory.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Replica-parallel training steps.
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    parallel: Option<bool>,
    /// Restrict eval/bench to one policy: fixed<i>, adaptive or oracle.
    #[arg(long, value_name = "NAME")]
    policy: Option<String>,
}

/// Maximum worker threads from `REVIT_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Validation(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Validation(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// Parses `argv`, runs the stage and returns the process exit code:
/// 0 success, 1 invalid input, 2 filesystem failure.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let cap = thread_cap()?;
    if let Some(n) = cap {
        // Fails only if the pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match command {
        Command::TrainRevit(f) => train_revit(&Stage::new(&f)?, f.parallel, cap),
        Command::ExtractLabels(f) => extract(&Stage::new(&f)?),
        Command::TrainTla(f) => tla_stage(&Stage::new(&f)?),
        Command::Eval(f) => eval_stage(&Stage::new(&f)?, f.policy.as_deref()),
        Command::Bench(f) => bench_stage(&Stage::new(&f)?, f.policy.as_deref()),
        Command::ExportCurve(f) => export_curve(&output_dir(&f)?),
    }
}

struct Stage {
    cfg: RunConfig,
    out: PathBuf,
}

impl Stage {
    fn new(f: &Flags) -> Result<Self> {
        let path = f
            .config
            .as_ref()
            .ok_or_else(|| Error::Usage("--config is required for this stage".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = f.seed {
            cfg.seed = s;
        }
        if let Some(d) = &f.data_dir {
            cfg.data.dir = Some(d.clone());
        }
        if let Some(o) = &f.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn model(&self) -> Result<ReViT> {
        ReViT::new(self.cfg.model.clone())
    }

    fn load_model(&self) -> Result<(ReViT, ParamStore<f32>)> {
        let model = self.model()?;
        let path = self.path(REVIT_CKPT);
        let (store, meta) = load_checkpoint::<f32>(&path)?;
        check_meta(&path, meta, &self.cfg.model)?;
        model.check_store(&store)?;
        Ok((model, store))
    }

    fn load_tla(&self) -> Result<(Tla, ParamStore<f32>)> {
        let tla = Tla::new(self.cfg.tla_config())?;
        let path = self.path(TLA_CKPT);
        let (store, meta) = load_checkpoint::<f32>(&path)?;
        check_meta(&path, meta, tla.config())?;
        tla.check_store(&store)?;
        Ok((tla, store))
    }
}

fn output_dir(f: &Flags) -> Result<PathBuf> {
    match (&f.out, &f.config) {
        (Some(o), _) => Ok(o.clone()),
        (None, Some(c)) => Ok(RunConfig::load(c)?.output_dir),
        (None, None) => Err(Error::Usage("export-curve needs --out or --config".into())),
    }
}

fn check_meta<C: serde::Serialize>(path: &Path, meta: Option<serde_json::Value>, want: &C) -> Result<()> {
    let want = serde_json::to_value(want).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    match meta {
        Some(m) if m == want => Ok(()),
        _ => Err(Error::Validation(format!(
            "{} was written for a different architecture than the config describes",
            path.display()
        ))),
    }
}

fn meta_of<C: serde::Serialize>(c: &C) -> Option<serde_json::Value> {
    serde_json::to_value(c).ok()
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_revit(stage: &Stage, parallel: Option<bool>, cap: Option<usize>) -> Result<()> {
    let cfg = &stage.cfg;
    let mut plan = cfg.effective_plan();
    if let Some(p) = parallel {
        plan.parallel = p;
    }
    let model = stage.model()?;
    let data = cfg.load_data(Split::Train)?;
    create_out(&stage.out)?;
    let k = model.num_lengths();
    let workers = cap.map_or(k, |c| c.min(k));
    let store = model.init_params::<f32>(cfg.seed);
    let (store, log) = train(&model, store, &data, &plan, workers)?;
    save_checkpoint(&store, &stage.path(REVIT_CKPT), meta_of(&cfg.model))?;
    log.write_csv(&stage.path(TRAIN_LOG))?;
    for r in log.final_rows() {
        println!(
            "epoch {} length {} loss {:.4} acc {:.4}",
            r.epoch, r.length_idx, r.loss, r.acc
        );
    }
    println!(
        "wrote {} and {}",
        stage.path(REVIT_CKPT).display(),
        stage.path(TRAIN_LOG).display()
    );
    Ok(())
}

fn extract(stage: &Stage) -> Result<()> {
    let (model, store) = stage.load_model()?;
    let data = stage.cfg.load_data(Split::Train)?;
    let labels = extract_labels(&model, &store, &data)?;
    create_out(&stage.out)?;
    labels.write_csv(&stage.path(LABELS))?;
    println!("label histogram {:?}", labels.histogram());
    println!("wrote {}", stage.path(LABELS).display());
    Ok(())
}

fn tla_stage(stage: &Stage) -> Result<()> {
    let cfg = &stage.cfg;
    let labels = LabelSet::read_csv(&stage.path(LABELS))?;
    let data = cfg.load_data(Split::Train)?;
    let tla = Tla::new(cfg.tla_config())?;
    let plan = cfg.tla_plan();
    let store = tla.init_params::<f32>(plan.seed);
    let (store, report) = train_tla(&tla, store, &labels, &data, &plan)?;
    save_checkpoint(&store, &stage.path(TLA_CKPT), meta_of(tla.config()))?;
    report.write_text(&stage.path(TLA_REPORT))?;
    print!("{}", report.to_text());
    println!("wrote {}", stage.path(TLA_CKPT).display());
    Ok(())
}

fn policies(model: &ReViT, only: Option<&str>) -> Result<Vec<Policy>> {
    match only {
        Some(name) => {
            let p: Policy = name.parse()?;
            if let Policy::Fixed(i) = p {
                model.schedule().check_index(i)?;
            }
            Ok(vec![p])
        }
        None => Ok(Policy::all(model.num_lengths())),
    }
}

fn eval_stage(stage: &Stage, only: Option<&str>) -> Result<()> {
    let (model, store) = stage.load_model()?;
    let list = policies(&model, only)?;
    let tla = if list.contains(&Policy::Adaptive) {
        Some(stage.load_tla()?)
    } else {
        None
    };
    let data = stage.cfg.load_data(Split::Test)?;
    let vit = ModelRef {
        model: &model,
        store: &store,
    };
    let tla_ref = tla.as_ref().map(|(t, s)| TlaRef { tla: t, store: s });
    let labels = if list.contains(&Policy::Oracle) {
        Some(extract_labels(&model, &store, &data)?)
    } else {
        None
    };
    let mut report = TradeoffReport::default();
    for p in list {
        let row = evaluate(p, vit, tla_ref, labels.as_ref(), &data)?;
        println!(
            "{:<9} top1 {:.4} mean_flops {} hist {:?}",
            row.policy,
            row.top1,
            format_g6(row.mean_flops),
            row.hist
        );
        report.rows.push(row);
    }
    create_out(&stage.out)?;
    export_tradeoff(&report, &stage.path(EVAL_CSV))?;
    println!("wrote {}", stage.path(EVAL_CSV).display());
    Ok(())
}

fn bench_stage(stage: &Stage, only: Option<&str>) -> Result<()> {
    let (model, store) = stage.load_model()?;
    let list = policies(&model, only)?;
    let tla = if list.contains(&Policy::Adaptive) {
        Some(stage.load_tla()?)
    } else {
        None
    };
    let data = stage.cfg.load_data(Split::Test)?;
    let vit = ModelRef {
        model: &model,
        store: &store,
    };
    let tla_ref = tla.as_ref().map(|(t, s)| TlaRef { tla: t, store: s });
    let labels = if list.contains(&Policy::Oracle) {
        Some(extract_labels(&model, &store, &data)?)
    } else {
        None
    };
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for p in list {
        let ips = benchmark_throughput(p, vit, tla_ref, labels.as_ref(), &data, BenchConfig::default())?;
        println!("{:<9} {} images/s", p.to_string(), format_g6(ips));
        out.push_str(&format!("{p},{}\n", format_g6(ips)));
    }
    create_out(&stage.out)?;
    let path = stage.path(BENCH_CSV);
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_bench(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines();
    if lines.next() != Some(BENCH_HEADER) {
        return Err(bad(format!("expected header `{BENCH_HEADER}`")));
    }
    lines
        .map(|l| {
            let (p, v) = l.split_once(',').ok_or_else(|| bad(format!("bad row `{l}`")))?;
            let v = v.parse().map_err(|_| bad(format!("bad rate `{v}`")))?;
            Ok((p.to_string(), v))
        })
        .collect()
}

fn export_curve(out: &Path) -> Result<()> {
    let mut report = TradeoffReport::read_csv(&out.join(EVAL_CSV))?;
    let bench = read_bench(&out.join(BENCH_CSV))?;
    for row in &mut report.rows {
        row.ips = bench.get(&row.policy).copied().unwrap_or(0.0);
    }
    let path = out.join(TRADEOFF_CSV);
    export_tradeoff(&report, &path)?;
    print!("{}", report.to_csv());
    println!("wrote {}", path.display());
    Ok(())
}
