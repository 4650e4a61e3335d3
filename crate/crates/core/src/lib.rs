//! Transferable latent-space feature inversion on a synthetic toy world.
//!
//! A differentiable generator maps latents to "images"; an ensemble of
//! correlated encoders maps images to unit-norm features. The attacker sees
//! one encoder's target feature and searches the generator's latent space so
//! the reconstruction also verifies on encoders it never touched:
//!
//! 1. many latents are optimized independently with Adam ([`alsuv::optimize_latents`]),
//! 2. each trajectory tail is averaged ([`alsuv::average_trajectory`]),
//! 3. the winner is chosen against a pseudo target built in a surrogate
//!    validation encoder's feature space ([`alsuv::pseudo_target`], [`alsuv::select_latent`]).
//!
//! [`eval`] scores reconstructions with verification/identification metrics,
//! [`diagnostics`] measures curvature at the solutions and [`harness`] runs
//! whole experiments and writes JSON/CSV reports.

pub mod alsuv;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod harness;
pub mod numerics;
pub mod optimize;
pub mod rng;
pub mod worldgen;

pub use error::{Error, Result};
