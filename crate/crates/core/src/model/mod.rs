//! Resizable ViT: architecture, token schedule and cost model.

pub mod config;
pub mod flops;
pub mod revit;

pub use crate::numerics::ParamStore;
pub use config::{ReViTConfig, TokenSchedule};
pub use flops::{count_flops, flops_breakdown, FlopsBreakdown};
pub use revit::{ForwardOutput, LengthBank, ReViT, POS_SPECIAL_SLOTS};
