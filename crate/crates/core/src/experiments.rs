//! Desk-scale experiment harnesses built from the pipeline stages.

use crate::adaptive::{evaluate, ModelRef, Policy};
use crate::data::Split;
use crate::error::Result;
use crate::io::RunConfig;
use crate::model::{ReViT, ReViTConfig};
use crate::training::{train, DistillConfig, DistillHead};

/// One training variant of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub distill: Option<DistillConfig>,
    /// One patch projection and positional table for every length.
    pub shared_embed: bool,
}

/// Self-distillation off, then on at each temperature.
pub fn tlsd_arms(taus: &[f64], lambda: f64, head: DistillHead) -> Result<Vec<AblationArm>> {
    let mut arms = vec![AblationArm {
        name: "off".into(),
        distill: None,
        shared_embed: false,
    }];
    for &tau in taus {
        let mut d = DistillConfig::new(tau, lambda)?;
        d.head = head;
        arms.push(AblationArm {
            name: format!("tau{tau}"),
            distill: Some(d),
            shared_embed: false,
        });
    }
    Ok(arms)
}

/// Per-length patch and positional banks versus one shared pair, both
/// trained with `distill`.
pub fn embedding_arms(distill: Option<DistillConfig>) -> Vec<AblationArm> {
    [("per_length", false), ("shared", true)]
        .into_iter()
        .map(|(name, shared_embed)| AblationArm {
            name: name.into(),
            distill: distill.clone(),
            shared_embed,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub arm: String,
    pub seed: u64,
    /// Test top-1 at each fixed length, largest first.
    pub top1: Vec<f64>,
}

/// Trains every arm under every seed with `base`'s model, data and plan,
/// and scores each fixed length on the test split.
pub fn run_ablation(base: &RunConfig, arms: &[AblationArm], seeds: &[u64], workers: usize) -> Result<Vec<AblationRun>> {
    let models = arms
        .iter()
        .map(|arm| {
            ReViT::new(ReViTConfig {
                shared_embed: arm.shared_embed,
                ..base.model.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train_data = base.load_data(Split::Train)?;
    let test_data = base.load_data(Split::Test)?;
    let mut runs = Vec::with_capacity(arms.len() * seeds.len());
    for &seed in seeds {
        for (arm, model) in arms.iter().zip(&models) {
            let mut plan = base.plan.clone();
            plan.seed = seed;
            plan.distill = arm.distill.clone();
            let store = model.init_params::<f32>(seed);
            let (store, _) = train(model, store, &train_data, &plan, workers)?;
            let vit = ModelRef { model, store: &store };
            let top1 = (0..model.num_lengths())
                .map(|i| Ok(evaluate(Policy::Fixed(i), vit, None, None, &test_data)?.top1))
                .collect::<Result<Vec<f64>>>()?;
            runs.push(AblationRun {
                arm: arm.name.clone(),
                seed,
                top1,
            });
        }
    }
    Ok(runs)
}

/// Mean of `runs[arm].top1[length]` over seeds.
pub fn mean_top1(runs: &[AblationRun], arm: &str, length_idx: usize) -> Option<f64> {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.arm == arm)
        .map(|r| r.top1[length_idx])
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
