//! Analytic multiply-add cost of one image forward (2 FLOPs per MAC).

use super::config::ReViTConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FlopsBreakdown {
    /// Sequence length including special tokens.
    pub seq_len: u64,
    pub patch_embed: u64,
    /// q/k/v and output projections, all blocks: `depth · 8·n·d²`.
    pub attention_proj: u64,
    /// Score and context products, all blocks: `depth · 4·n²·d`.
    pub attention_scores: u64,
    pub mlp: u64,
    pub heads: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.attention_proj + self.attention_scores + self.mlp + self.heads
    }
}

pub fn flops_breakdown(config: &ReViTConfig, length_idx: usize, with_distill: bool) -> Result<FlopsBreakdown> {
    let schedule = config.schedule()?;
    schedule.check_index(length_idx)?;
    let n_patch = schedule.tokens(length_idx) as u64;
    // A shared projection always sees finest-width (pooled) patches.
    let p = if config.shared_embed {
        schedule.patch_size(0)
    } else {
        schedule.patch_size(length_idx)
    } as u64;
    let c = config.channels as u64;
    let d = config.embed_dim as u64;
    let depth = config.depth as u64;
    let heads_present = 1 + u64::from(with_distill);
    let n = n_patch + heads_present;
    Ok(FlopsBreakdown {
        seq_len: n,
        patch_embed: 2 * n_patch * (p * p * c) * d,
        attention_proj: depth * 8 * n * d * d,
        attention_scores: depth * 4 * n * n * d,
        mlp: depth * 4 * n * d * d * config.mlp_ratio as u64,
        heads: heads_present * 2 * d * config.num_classes as u64,
    })
}

/// Total FLOPs for one image at length `i`.
pub fn count_flops(config: &ReViTConfig, length_idx: usize, with_distill: bool) -> Result<u64> {
    Ok(flops_breakdown(config, length_idx, with_distill)?.total())
}
