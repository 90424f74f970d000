//! Replica-parallel training step: one parameter replica per token length,
//! concurrent passes, gradients reduced onto the length-0 replica in
//! ascending length order, then the updated values copied back out.

use std::sync::mpsc;
use std::thread;

use super::plan::TrainPlan;
use super::step::{PendingPass, StepStats};
use crate::error::{Error, Result};
use crate::model::ReViT;
use crate::numerics::{OptimizerState, ParamStore, Scalar, Tensor};

/// `k` parameter stores, one per token length. Replica 0 is the main copy
/// the optimizer updates.
#[derive(Clone, Debug)]
pub struct Replicas<T: Scalar> {
    stores: Vec<ParamStore<T>>,
}

impl<T: Scalar> Replicas<T> {
    pub fn new(main: ParamStore<T>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Usage("need at least one replica".into()));
        }
        let mut main = main;
        main.zero_grad();
        let mut stores = vec![main];
        for _ in 1..k {
            stores.push(stores[0].clone());
        }
        Ok(Self { stores })
    }

    pub fn len(&self) -> usize {
        self.stores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
    }

    pub fn main(&self) -> &ParamStore<T> {
        &self.stores[0]
    }

    pub fn get(&self, i: usize) -> &ParamStore<T> {
        &self.stores[i]
    }

    /// Mutable access for tests that need to break the entry invariant.
    pub fn get_mut(&mut self, i: usize) -> &mut ParamStore<T> {
        &mut self.stores[i]
    }

    pub fn into_main(self) -> ParamStore<T> {
        self.stores.into_iter().next().expect("non-empty")
    }

    /// Errors unless every replica's values equal replica 0 bitwise.
    pub fn check_identical(&self) -> Result<()> {
        for (i, s) in self.stores.iter().enumerate().skip(1) {
            if !s.values_bitwise_eq(&self.stores[0]) {
                return Err(Error::Consistency(format!(
                    "replica {i} diverges from the main replica (max abs diff {:e})",
                    s.max_abs_value_diff(&self.stores[0])
                )));
            }
        }
        Ok(())
    }
}

struct GradMessage<T> {
    length_idx: usize,
    grads: Vec<Option<Vec<T>>>,
    loss: f64,
    correct: usize,
}

/// One replica-parallel step with at most `workers` threads. Length `i` is
/// handled by worker `i % workers`, which exclusively owns replica `i`.
#[allow(clippy::too_many_arguments)]
pub fn parallel_train_step<T: Scalar>(
    model: &ReViT,
    replicas: &mut Replicas<T>,
    optimizer: &mut OptimizerState<T>,
    images: &Tensor<T>,
    targets: &[usize],
    plan: &TrainPlan,
    step: u64,
    workers: usize,
) -> Result<StepStats> {
    let k = model.num_lengths();
    if replicas.len() != k {
        return Err(Error::Usage(format!(
            "{} replicas for {k} token lengths",
            replicas.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    replicas.check_identical()?;
    let workers = workers.clamp(1, k);

    let mut owned: Vec<Vec<(usize, &mut ParamStore<T>)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, store) in replicas.stores.iter_mut().enumerate() {
        store.zero_grad();
        owned[i % workers].push((i, store));
    }

    let (grad_tx, grad_rx) = mpsc::channel::<GradMessage<T>>();
    let mut teacher_txs = Vec::new();
    let mut teacher_rxs = vec![None];
    for _ in 1..workers {
        let (tx, rx) = mpsc::channel::<Tensor<T>>();
        teacher_txs.push(tx);
        teacher_rxs.push(Some(rx));
    }

    let results: Vec<Result<()>> = thread::scope(|scope| {
        let handles: Vec<_> = owned
            .into_iter()
            .zip(teacher_rxs)
            .enumerate()
            .map(|(w, (mine, teacher_rx))| {
                let grad_tx = grad_tx.clone();
                let teacher_txs = if w == 0 {
                    std::mem::take(&mut teacher_txs)
                } else {
                    Vec::new()
                };
                scope.spawn(move || -> Result<()> {
                    let mut teacher: Option<Tensor<T>> = None;
                    for (i, store) in mine {
                        let pass = PendingPass::forward(model, store, images, i, plan, step)?;
                        if i == 0 {
                            let t = pass.class_logits().clone();
                            for tx in &teacher_txs {
                                // a receiver that already failed is not our error
                                let _ = tx.send(t.clone());
                            }
                            teacher = Some(t);
                        } else if teacher.is_none() {
                            let rx = teacher_rx.as_ref().expect("worker 0 owns length 0");
                            teacher = Some(
                                rx.recv()
                                    .map_err(|_| Error::Consistency("teacher pass did not complete".into()))?,
                            );
                        }
                        let (loss, correct) = pass.finish(store, targets, teacher.as_ref(), plan)?;
                        let grads = store.take_grads();
                        grad_tx
                            .send(GradMessage {
                                length_idx: i,
                                grads,
                                loss,
                                correct,
                            })
                            .map_err(|_| Error::Consistency("gradient channel closed".into()))?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    drop(grad_tx);
    // Worker 0's failure explains the others, so report the first error in order.
    for r in results {
        r?;
    }

    let mut messages: Vec<Option<GradMessage<T>>> = (0..k).map(|_| None).collect();
    for msg in grad_rx {
        let i = msg.length_idx;
        messages[i] = Some(msg);
    }
    let mut stats = StepStats::new(k, targets.len());
    let main = &mut replicas.stores[0];
    main.zero_grad();
    for (i, msg) in messages.into_iter().enumerate() {
        let msg = msg.ok_or_else(|| Error::Consistency(format!("no gradient for length {i}")))?;
        main.accumulate_grads(&msg.grads)?;
        stats.losses[i] = msg.loss;
        stats.correct[i] = msg.correct;
    }
    optimizer.step(main)?;

    let (main, rest) = replicas.stores.split_first_mut().expect("non-empty");
    for r in rest {
        r.copy_values_from(main)?;
        r.zero_grad();
    }
    Ok(stats)
}
