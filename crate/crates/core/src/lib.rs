pub mod covering;
pub mod effnum;
pub mod error;
pub mod harness;
pub mod longtail;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
