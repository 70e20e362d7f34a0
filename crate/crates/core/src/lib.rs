//! Two-time-scale stochastic approximation under Markovian noise.
//!
//! - [`markov_noise`]: finite chains and AR sources, stationary laws, TV distance, mixing times
//! - [`problems`]: operator pairs `F`, `G` with their solution map and constants
//! - [`engine`]: step sizes, `K*`, the coupled update, seeded trajectories
//! - [`analysis`]: residuals, Lyapunov function, theorem constants and bound, lemma checks, rate fits
//! - [`harness`]: experiment configs, ensembles, and the command implementations behind the CLI

pub mod analysis;
pub mod engine;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod markov_noise;
pub mod problems;

pub use engine::{run_trajectory, seed_for_trial, Checkpoint, IterateState, StepSchedule, Trajectory};
pub use error::{Error, Result};
pub use markov_noise::{FiniteChain, MarkovSource, NoiseState};
pub use problems::{ProblemConfig, ProblemSpec};
