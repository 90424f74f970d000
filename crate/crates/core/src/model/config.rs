use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token grids a single model accepts, largest first. Index 0 is the
/// teacher length. All grids tile the same input resolution; the patch edge
/// differs per grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSchedule {
    grids: Vec<(usize, usize)>,
    patch_sizes: Vec<usize>,
}

impl TokenSchedule {
    pub fn new(grids: Vec<(usize, usize)>, image_height: usize, image_width: usize) -> Result<Self> {
        if grids.len() < 2 {
            return Err(Error::Validation(format!(
                "token schedule needs at least 2 lengths, got {}",
                grids.len()
            )));
        }
        let mut patch_sizes = Vec::with_capacity(grids.len());
        for (i, &(rows, cols)) in grids.iter().enumerate() {
            if rows == 0 || cols == 0 || !image_height.is_multiple_of(rows) || !image_width.is_multiple_of(cols) {
                return Err(Error::Validation(format!(
                    "grid {i} ({rows}x{cols}) does not tile a {image_height}x{image_width} image"
                )));
            }
            let p = image_height / rows;
            if image_width / cols != p {
                return Err(Error::Validation(format!(
                    "grid {i} ({rows}x{cols}) needs non-square patches on {image_height}x{image_width}"
                )));
            }
            if i > 0 {
                let (pr, pc) = grids[i - 1];
                if rows * cols >= pr * pc {
                    return Err(Error::Validation(format!(
                        "token counts must strictly decrease: grid {} has {} tokens, grid {i} has {}",
                        i - 1,
                        pr * pc,
                        rows * cols
                    )));
                }
            }
            patch_sizes.push(p);
        }
        Ok(Self { grids, patch_sizes })
    }

    /// Number of lengths `k`.
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn grid(&self, i: usize) -> (usize, usize) {
        self.grids[i]
    }

    pub fn grids(&self) -> &[(usize, usize)] {
        &self.grids
    }

    pub fn patch_size(&self, i: usize) -> usize {
        self.patch_sizes[i]
    }

    /// Patch tokens at length `i` (special tokens excluded).
    pub fn tokens(&self, i: usize) -> usize {
        let (r, c) = self.grids[i];
        r * c
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Index {
                what: "token length",
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }
}

/// Architecture hyperparameters of the resizable ViT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// `(rows, cols)` per length, strictly decreasing token count.
    pub grids: Vec<(usize, usize)>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Ablation: every length reuses one patch projection and one positional
    /// table, both sized for the finest grid, instead of per-length banks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shared_embed: bool,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ReViTConfig {
    /// d=64, depth 4, 4 heads, 32px input with grids 8x8 / 4x4 / 2x2.
    pub fn desk_default(num_classes: usize) -> Self {
        Self {
            image_size: 32,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes,
            grids: vec![(8, 8), (4, 4), (2, 2)],
            dropout: 0.0,
            ln_eps: default_ln_eps(),
            shared_embed: false,
        }
    }

    pub fn validate(&self) -> Result<TokenSchedule> {
        let extents = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Validation("ln_eps must be > 0".into()));
        }
        let schedule = TokenSchedule::new(self.grids.clone(), self.image_size, self.image_size)?;
        if self.shared_embed {
            let p0 = schedule.patch_size(0);
            if let Some(i) = (1..schedule.len()).find(|&i| schedule.patch_size(i) % p0 != 0) {
                return Err(Error::Validation(format!(
                    "shared_embed needs every patch edge to be a multiple of {p0}; grid {i} has {}",
                    schedule.patch_size(i)
                )));
            }
        }
        Ok(schedule)
    }

    pub fn schedule(&self) -> Result<TokenSchedule> {
        self.validate()
    }
}
