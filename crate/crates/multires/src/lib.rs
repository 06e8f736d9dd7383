//! A desk-scale text-conditional denoising diffusion model with
//! time-bucketed concept embeddings.
//!
//! The crate pretrains a tiny pixel-space denoiser on a synthetic captioned
//! corpus, learns concept embeddings against the frozen model (a single
//! embedding or one per resolution bucket), and samples under
//! resolution-dependent conditioning schedules driven by an annotated prompt
//! micro-language.

pub mod conditioning;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod inversion;
pub mod model;
pub mod network;
pub mod optim;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod util;

pub use error::{Error, Result};
