//! Tensor building blocks shared by both side-networks.

pub mod conv;
pub mod fusion;
pub mod input_layer;
pub mod norm;
pub mod param;
pub mod stage;
pub mod tensor;

pub use conv::Conv2d;
pub use fusion::{blend, sigmoid, FusionMode, SideAda, SideFusion};
pub use input_layer::InputLayer;
pub use norm::GroupNorm;
pub use param::{Param, Parameterized};
pub use stage::{Stage, StageSpec};
pub use tensor::FeatureMap;
