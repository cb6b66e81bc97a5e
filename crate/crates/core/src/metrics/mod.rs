//! Overlap and distance measures on bivariate samples.

mod measures;
mod overlap;

pub use measures::*;
pub use overlap::*;
