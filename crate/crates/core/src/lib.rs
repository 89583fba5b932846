//! Psychoacoustically masked, room-robust adversarial perturbations
//! against a differentiable speech recognizer.

pub mod attack;
pub mod audio;
pub mod config;
pub mod error;
pub mod eval;
pub mod psycho;
pub mod recognizer;
pub mod room;

pub use error::{Error, Result};
