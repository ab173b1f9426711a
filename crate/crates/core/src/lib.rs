pub mod bench;
pub mod cli;
pub mod error;
pub mod exact;
pub mod filter;
pub mod fitc;
pub mod kernel;
mod linalg;
pub mod narx;
pub mod optim;
pub mod persist;
pub mod simulate;
pub mod train;
pub mod types;

pub use error::{Error, Result};
