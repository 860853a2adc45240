pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Role};
pub use tensor::{Real, Shape, Tensor};
