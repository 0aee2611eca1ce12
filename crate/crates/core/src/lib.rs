pub mod attention;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
