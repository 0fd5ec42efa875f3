pub mod allocator;
pub mod attacks;
pub mod defense;
pub mod envlab;
pub mod error;
pub mod harness;
pub mod victims;
pub mod numfmt;
pub mod par;
pub mod sensitivity;

pub use error::{LabError, Result};
