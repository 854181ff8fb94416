pub mod error;
pub mod special;
pub mod volume;

pub use error::{Error, Result};
pub mod distributions;
pub mod optim;
pub mod par;
pub mod atlas;
pub mod gem;
pub mod synth;
pub mod dti;
pub mod affine;
pub mod io;
