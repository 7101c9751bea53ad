//! Back-calculation of fatal infection trajectories from daily death counts.
//!
//! The crate reconstructs the daily number of eventually fatal infections
//! from a death series and an uncertain infection-to-death duration
//! distribution, by penalized spline deconvolution with empirical Bayes
//! smoothing selection, and derives reproduction number estimates and a set
//! of model checks from the result.

pub mod checks;
pub mod durations;
pub mod epi_r;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod models;
mod optim;
pub mod pcr;
pub mod splines;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
