pub mod diffmath;
pub mod encoder;
mod error;
pub mod evalkit;
pub mod formats;
pub mod gradsuite;
pub mod imageops;
pub mod objective;
pub mod params;
pub mod renderer;
pub mod scenegen;
pub mod seeding;
pub mod trainer;
pub mod triplane;

pub use error::{Error, Result};
