pub mod asian_oracle;
pub mod cli;
pub mod cashflow;
pub mod error;
pub mod functional_calculus;
pub mod market;
mod par;
pub mod payoffs;
pub mod policy_chain;
pub mod reserve_engine;
pub mod rng;
pub mod stats;
pub mod stopped_paths;

pub use error::{Error, PaymentKind, Result};
