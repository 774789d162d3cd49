//! Core algorithms for learning disentangled dynamics/content latent models
//! of a planar navigation system and planning in the learned latent space.
//!
//! The crate is organized around the pipeline:
//!
//! * [`env`] — ground-truth planar simulator with obstacle avoidance and
//!   top-down 40×40 rendering in two agent-shape styles,
//! * [`data`] — generation of the action-labeled triple set X and the
//!   state-aligned observation set Y,
//! * [`autodiff`] — a small reverse-mode tape used to train the model,
//! * [`model`] — encoders, decoder, backward encoder, and the locally-linear
//!   transition network,
//! * [`objective`] — the variational lower bound and its per-term breakdown,
//! * [`train`] — deterministic seeded optimization loop,
//! * [`planner`] — iLQR trajectory optimization under the learned transitions,
//! * [`eval`] — reconstruction/prediction/planning metrics, latent maps, and
//!   prediction filmstrips.
//!
//! Everything here is `no_std` + `alloc`: all float math goes through `libm`,
//! all randomness through explicit [`rng`] streams, so results are
//! bit-reproducible across platforms and thread counts. IO, file formats, and
//! the CLI live in the companion `ddc-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod env;
pub mod eval;
pub mod math;
pub mod model;
pub mod objective;
pub mod planner;
pub mod rng;
pub mod train;

pub use data::{PairedRecord, TripleRecord};
pub use env::{ActionInput, AgentShape, EnvConfig, Image, PlanarState};
pub use model::{GaussianLatent, HyperConfig, ModelParams, TransitionParams};
pub use objective::ElboBreakdown;
pub use planner::{CostWeights, Plan};
