//! Variational source separation for spatio-temporal matrix data.
//!
//! A data matrix (subjects x features) is factorized into monotonic temporal
//! sources, modeled as random cosine-feature expansions of a Gaussian
//! process, and spatially smooth maps with a shared structured covariance.
//! Each subject carries a latent time shift placing it on the common time
//! axis. All posteriors are fitted jointly by stochastic gradient ascent on
//! an evidence lower bound with hand-derived reparameterization gradients.

pub mod elbo;
pub mod error;
pub mod eval;
pub mod ica;
pub mod io;
pub mod model;
pub mod optim;
pub mod rff;
pub mod spatial;
pub mod synth;

pub use elbo::{elbo, log_likelihood, DEFAULT_JITTER};
pub use error::{Error, Result};
pub use model::{
    init_model, squash, squash_inv, Checkpoint, DataMatrix, ElboBreakdown, GridGeometry,
    Hyperparams, ModelState, NoiseDraws, SpatialPosterior, TemporalPosterior, TimeShifts,
};
pub use optim::{fit, grad_elbo, gradient_check, FitConfig, FitTrace};
