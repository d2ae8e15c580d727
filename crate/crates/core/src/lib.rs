pub mod cli;
pub mod cocycle;
pub mod error;
pub mod flowint;
pub mod measures;
pub mod regularity;
pub mod smallmat;
pub mod systems;

pub use error::{Error, Result};
