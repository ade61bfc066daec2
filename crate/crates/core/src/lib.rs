pub mod error;
pub mod motion;
pub mod numeric;
pub mod prompting;
pub mod xfusion;

pub use error::{HicError, Result};
pub mod synth;
pub mod training;
pub mod io;
