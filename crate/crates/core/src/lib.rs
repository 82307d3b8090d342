pub mod cli;
pub mod error;
pub mod experiments;
pub mod inventory;
pub mod lqr;
pub mod mdp;
pub mod optimize;
pub mod reinforce;
pub mod stopping;
pub mod tabular;
pub mod verify;

pub use error::{Error, Result};
