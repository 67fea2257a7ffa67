pub mod costmodel;
pub mod error;
pub mod generator;
pub mod layout;
pub mod membank;
pub mod numerics;
pub mod planner;
pub mod rng;
pub mod storyworld;
pub mod trainer;

pub use error::{Error, Result};
