//! One optimisation step over every token length of a batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::distillation_loss;
use super::plan::{DistillHead, TrainPlan};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, ReViT};
use crate::numerics::{argmax, Graph, OptimizerState, ParamStore, Scalar, Tensor};

/// Loss and training-batch accuracy of each length for one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub losses: Vec<f64>,
    pub correct: Vec<usize>,
    pub batch_size: usize,
}

impl StepStats {
    pub(crate) fn new(k: usize, batch_size: usize) -> Self {
        Self {
            losses: vec![0.0; k],
            correct: vec![0; k],
            batch_size,
        }
    }
}

/// Dropout stream for `(seed, step, length)`; identical in the sequential
/// and replica-parallel paths.
pub fn dropout_rng(seed: u64, step: u64, length_idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 16) | length_idx as u64);
    rng
}

/// Forward half of one length's pass, kept open until the teacher logits
/// are available.
pub(crate) struct PendingPass<T: Scalar> {
    graph: Graph<T>,
    out: ForwardOutput,
    length_idx: usize,
}

impl<T: Scalar> PendingPass<T> {
    pub(crate) fn forward(
        model: &ReViT,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        length_idx: usize,
        plan: &TrainPlan,
        step: u64,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        let with_distill = length_idx > 0 && plan.student_token();
        let mut rng = dropout_rng(plan.seed, step, length_idx);
        let out = model.forward(&mut graph, store, images, length_idx, with_distill, Some(&mut rng))?;
        Ok(Self { graph, out, length_idx })
    }

    /// Class logits of this pass, detached.
    pub(crate) fn class_logits(&self) -> &Tensor<T> {
        self.graph.value(self.out.class_logits)
    }

    /// Attaches the loss for this length and accumulates its gradients into
    /// `store`. Returns `(loss, correct predictions)`.
    pub(crate) fn finish(
        mut self,
        store: &mut ParamStore<T>,
        targets: &[usize],
        teacher: Option<&Tensor<T>>,
        plan: &TrainPlan,
    ) -> Result<(f64, usize)> {
        let g = &mut self.graph;
        let class = self.out.class_logits;
        let loss = match (self.length_idx, &plan.distill) {
            (0, _) | (_, None) => g.cross_entropy(class, targets)?,
            (_, Some(cfg)) => {
                let teacher = teacher.ok_or_else(|| Error::Usage("student pass needs the teacher logits".into()))?;
                let teacher = g.constant(teacher.clone());
                let student = match cfg.head {
                    DistillHead::Token => self
                        .out
                        .distill_logits
                        .ok_or_else(|| Error::Usage("distillation head missing from student forward".into()))?,
                    DistillHead::Class => class,
                };
                distillation_loss(g, class, student, teacher, targets, cfg)?
            }
        };
        g.backward(loss, store)?;
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        let c = g.shape(class)[1];
        let correct = g
            .value(class)
            .data()
            .chunks(c)
            .zip(targets)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        Ok((value, correct))
    }
}

fn check_batch<T: Scalar>(images: &Tensor<T>, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if images.shape().first() != Some(&targets.len()) {
        return Err(Error::dim("train batch", images.shape(), &[targets.len()]));
    }
    Ok(())
}

/// Runs the teacher pass (length 0, cross-entropy) and then every student
/// pass, adding each pass's gradients into `store`. Gradients already held
/// by `store` are kept; no optimizer step is taken.
pub fn accumulate_gradients<T: Scalar>(
    model: &ReViT,
    store: &mut ParamStore<T>,
    images: &Tensor<T>,
    targets: &[usize],
    plan: &TrainPlan,
    step: u64,
) -> Result<StepStats> {
    check_batch(images, targets)?;
    let k = model.num_lengths();
    let mut stats = StepStats::new(k, targets.len());
    let mut teacher: Option<Tensor<T>> = None;
    for i in 0..k {
        let pass = PendingPass::forward(model, store, images, i, plan, step)?;
        if i == 0 {
            teacher = Some(pass.class_logits().clone());
        }
        let (loss, correct) = pass.finish(store, targets, teacher.as_ref(), plan)?;
        stats.losses[i] = loss;
        stats.correct[i] = correct;
    }
    Ok(stats)
}

/// Zero gradients, accumulate over all lengths, then one optimizer step.
pub fn mixed_token_train_step<T: Scalar>(
    model: &ReViT,
    store: &mut ParamStore<T>,
    optimizer: &mut OptimizerState<T>,
    images: &Tensor<T>,
    targets: &[usize],
    plan: &TrainPlan,
    step: u64,
) -> Result<StepStats> {
    store.zero_grad();
    let stats = accumulate_gradients(model, store, images, targets, plan, step)?;
    optimizer.step(store)?;
    Ok(stats)
}
