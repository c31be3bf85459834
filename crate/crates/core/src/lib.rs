pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod episodic;
pub mod error;
pub mod icfil;
pub mod inversion;
pub mod nets;
pub mod optim;
pub mod plot;
pub mod runner;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
