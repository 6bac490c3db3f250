//! Generative image-based rendering: IB-planes scenes, a volumetric
//! renderer, a multi-view diffusion model over them, and the tooling to
//! train and evaluate it on procedurally generated scenes.

pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod ibplanes;
pub mod io;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod scenegen;
pub mod training;

pub use error::{Error, Result};
