use super::plan::DistillConfig;
use crate::error::Result;
use crate::numerics::{Graph, Scalar, Var};

/// `(1−λ)·CE(class, y) + λ·τ²·KL(softmax(teacher/τ) ‖ softmax(distill/τ))`.
///
/// The teacher logits are detached, so no gradient flows back through them.
/// With `λ = 0` the KL branch is not built at all.
pub fn distillation_loss<T: Scalar>(
    g: &mut Graph<T>,
    class_logits: Var,
    distill_logits: Var,
    teacher_logits: Var,
    targets: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = g.cross_entropy(class_logits, targets)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let teacher = g.detach(teacher_logits);
    let p = g.softmax(teacher, cfg.tau)?;
    let q = g.softmax(distill_logits, cfg.tau)?;
    let kl = g.kl_divergence(p, q)?;
    let kl = g.scale(kl, cfg.lambda * cfg.tau * cfg.tau);
    if cfg.lambda == 1.0 {
        return Ok(kl);
    }
    let ce = g.scale(ce, 1.0 - cfg.lambda);
    g.add(ce, kl)
}
