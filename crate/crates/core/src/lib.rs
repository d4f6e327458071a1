//! Seedable discrete-event simulator for a multi-cell downlink mm-Wave NOMA
//! network.
//!
//! Four association / beam-count policies are implemented and compared:
//! transfer Q-learning (TQL), plain Q-learning, best-SINR association with
//! DBSCAN beam grouping (BSDC), and a fixed three-sector heuristic.
//!
//! Module map:
//!
//! - [`geometry`]: PCP deployment and random waypoint mobility.
//! - [`channel`]: single-path LoS channel, ULA steering, matched beams.
//! - [`clustering`]: correlation k-medoids, DBSCAN, angular sectors.
//! - [`phy`]: FTPA NOMA factors, SIC order, SINR decomposition, sum rate.
//! - [`rl`]: tabular Q-learning core and action encoding.
//! - [`transfer`]: inter-task mapping from expert to learner Q-tables.
//! - [`macsim`]: TTI loop with Poisson traffic and asynchronous HARQ.
//! - [`harness`]: expert training, multi-seed sweeps, aggregation.

pub mod channel;
pub mod clustering;
pub mod config;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod macsim;
pub mod phy;
pub mod rl;
pub mod transfer;
pub mod units;

pub use error::{Error, Result};

/// Random number generator used for every stochastic component.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Build a generator for one independent stream of a run.
///
/// Streams keep deployment, fading, traffic and exploration decoupled so
/// that toggling one component never perturbs the draws of another.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    use rand::SeedableRng;
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
