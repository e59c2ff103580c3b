pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion_schedule;
pub mod error;
pub mod market_paths;
pub mod model;
pub mod objectives;
pub mod path_stats;
pub mod payoffs;
pub mod pq_game;
pub mod q_pricer;
pub mod sampler;

pub use error::{Error, Result};
