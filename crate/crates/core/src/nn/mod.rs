//! Differentiable layers on NHWC tensors.

pub mod activation;
pub mod conv;
pub mod init;
pub mod norm;
pub mod pool;
pub mod renet;
pub mod resize;
pub mod shape;

pub use activation::softmax;
pub use conv::{conv2d, ConvKernel, ConvSpec, Padding};
pub use norm::{batch_norm, BatchStats, BnMode, RunningStats};
pub use pool::{global_pool, max_pool2d, PoolKind};
pub use renet::{lstm_scan, renet, CellVars, Direction, RecurrentCell, RenetParams};
pub use resize::{bilinear_resize, bilinear_upsample};
pub use shape::{concat_channels, transpose_hw};
