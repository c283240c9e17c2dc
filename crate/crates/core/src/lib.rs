pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod gradcheck;
pub(crate) mod io;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod volgrid;

pub use error::{Error, Result};
