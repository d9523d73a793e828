pub mod attribution;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod pipeline;
pub mod report;
pub mod tuning;

pub use error::{Error, Result};
