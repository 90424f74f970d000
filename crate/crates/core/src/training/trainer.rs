use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::parallel::{parallel_train_step, Replicas};
use super::plan::TrainPlan;
use super::step::{mixed_token_train_step, StepStats};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ReViT;
use crate::numerics::{MissingGrad, OptimizerState, ParamStore, Scalar};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// One row per epoch and token length.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub length_idx: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Training-batch accuracy of the class head.
    pub acc: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Per-step loss of every length, in step order.
    pub step_losses: Vec<Vec<f64>>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,step,length_idx,loss,acc,wall_ms";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.step, r.length_idx, r.loss, r.acc, r.wall_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Rows of the last epoch, indexed by length.
    pub fn final_rows(&self) -> Vec<&LogRow> {
        let last = self.rows.iter().map(|r| r.epoch).max();
        self.rows.iter().filter(|r| Some(r.epoch) == last).collect()
    }
}

/// Optimizer used by the trainer: per-length banks and the distillation
/// path legitimately have no gradient in some configurations.
pub fn trainer_optimizer<T: Scalar>(plan: &TrainPlan, store: &ParamStore<T>) -> Result<OptimizerState<T>> {
    Ok(OptimizerState::new(plan.optimizer.clone(), store)?.with_missing_grad(MissingGrad::Skip))
}

/// Sample order of `epoch`, a pure function of the plan seed.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

enum Engine<T: Scalar> {
    Sequential(ParamStore<T>),
    Parallel(Replicas<T>, usize),
}

/// Trains `store` on `data` for the plan's epochs. Steps are sequential or
/// replica-parallel (with up to `workers` threads) per `plan.parallel`;
/// both produce the same parameters.
pub fn train<T: Scalar>(
    model: &ReViT,
    store: ParamStore<T>,
    data: &Dataset,
    plan: &TrainPlan,
    workers: usize,
) -> Result<(ParamStore<T>, TrainLog)> {
    plan.validate()?;
    model.check_store(&store)?;
    if data.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let k = model.num_lengths();
    let mut optimizer = trainer_optimizer(plan, &store)?;
    let base_lr = plan.optimizer.lr;
    let steps_per_epoch = data.len().div_ceil(plan.batch_size);
    let total_steps = steps_per_epoch * plan.epochs;
    let mut engine = if plan.parallel {
        Engine::Parallel(Replicas::new(store, k)?, workers)
    } else {
        Engine::Sequential(store)
    };

    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    for epoch in 0..plan.epochs {
        let started = Instant::now();
        let order = epoch_order(plan.seed, epoch, data.len());
        let mut loss_sum = vec![0.0; k];
        let mut correct = vec![0usize; k];
        for chunk in order.chunks(plan.batch_size) {
            let (images, targets) = data.batch::<T>(chunk)?;
            optimizer.set_lr(base_lr * plan.lr_schedule.factor(step as usize, total_steps));
            let stats: StepStats = match &mut engine {
                Engine::Sequential(s) => {
                    mixed_token_train_step(model, s, &mut optimizer, &images, &targets, plan, step)?
                }
                Engine::Parallel(r, w) => {
                    parallel_train_step(model, r, &mut optimizer, &images, &targets, plan, step, *w)?
                }
            };
            for i in 0..k {
                loss_sum[i] += stats.losses[i] * chunk.len() as f64;
                correct[i] += stats.correct[i];
            }
            log.step_losses.push(stats.losses);
            step += 1;
        }
        let wall_ms = started.elapsed().as_millis() as u64;
        for i in 0..k {
            log.rows.push(LogRow {
                epoch,
                step,
                length_idx: i,
                loss: loss_sum[i] / data.len() as f64,
                acc: correct[i] as f64 / data.len() as f64,
                wall_ms,
            });
        }
    }
    let store = match engine {
        Engine::Sequential(s) => s,
        Engine::Parallel(r, _) => r.into_main(),
    };
    Ok((store, log))
}
