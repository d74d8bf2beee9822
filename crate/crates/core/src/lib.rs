//! Lesion-aware post-training for conditional latent diffusion
//! image-to-image translation, at desk scale on synthetic phantoms.

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use grid::{Grid, ImageSlice, LatentGrid, LesionMask};
