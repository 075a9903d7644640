//! Inversion-based semantic editing for diffusion models at desk scale.
//!
//! An input field is inverted into an edit-friendly noise sequence under a
//! second-order multistep SDE solver, then regenerated with per-concept
//! guidance terms that are grounded spatially by attention and noise-estimate
//! masks. With all guidance switched off the input is reproduced exactly.

pub mod binio;
pub mod error;
pub mod field;
pub mod guidance;
pub mod inversion;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use field::{rmse, Field, Shape};
pub use model::{AttentionStash, Conditioning, Denoiser, DenoiserOutput};
pub use schedule::{NoiseSchedule, ScheduleKind, TimestepGrid};
