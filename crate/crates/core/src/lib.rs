pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod networks;
pub mod pipeline;
pub mod svdd;

pub use autodiff::{DType, Element, Graph, Tensor, Var};
pub use data::{Dataset, Image, OneClassSplit};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use pipeline::{Arm, TrainConfig, TrainedModel};
pub use svdd::{Kernel, SvddModel};
