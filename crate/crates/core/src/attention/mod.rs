//! Pixel-wise contextual attention: context grids, attention heads and
//! the attending operators.

pub mod dump;
pub mod grid;
pub mod head;
pub mod ops;

pub use dump::AttentionDump;
pub use grid::{ContextGrid, GridMode};
pub use head::{attention_head, HeadVars};
pub use ops::{
    attend_conv, attend_pool, attend_pool_reference, grid_pool, AttentionField, AttentionKind,
};
