//! Task-specific tailoring of a frozen residual backbone: gated proxy
//! layers, an expected-complexity penalty, activation distillation from a
//! teacher, and discrete pruning to the leanest accurate architecture.

pub mod backbone;
pub mod blocks;
pub mod complexity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod params;
pub mod pruner;
pub mod student;
pub mod trainer;
pub mod verify;

pub use backbone::{build_backbone, Backbone, BackbonePlan};
pub use blocks::{BlockKind, BlockSpec, PathId};
pub use error::{Error, Result};
pub use student::{attach_proxies, SkipWindow, StudentGraph};
