pub mod basis;
pub mod error;
pub mod fpca;
pub mod grid;
pub mod io;
pub mod model;
pub mod selection;
pub mod sim;
pub mod smoothing;

pub use error::{Error, Result};
