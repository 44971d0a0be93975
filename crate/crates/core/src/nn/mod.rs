//! A small f64 tensor-layer engine with hand-written backward passes.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod optim;
mod param;

pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{
    l2_normalize_rows, l2_normalize_rows_backward, BasicBlock, BatchNorm2d, Ctx, Layer, Linear, ResBlock, SeqCache,
    Sequential,
};
pub use optim::{Adam, Optimizer, Sgd};
pub use param::{combined_digest, join, ContentDigest, FrozenDigest, Module, Param, ParamKind};
