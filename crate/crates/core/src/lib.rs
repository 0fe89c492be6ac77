pub mod autodiff;
pub mod cli;
pub mod config;
pub mod eval;
pub mod features;
pub mod frames;
pub mod mask;
pub mod model;
pub mod sim;
pub mod train;

#[cfg(test)]
mod testutil;
