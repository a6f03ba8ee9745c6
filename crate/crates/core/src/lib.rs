pub mod attention;
pub mod bench;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod conformer;
pub mod costmodel;
pub mod error;
pub mod numerics;
pub mod streaming;
pub mod verify;
pub mod weights_io;

pub use error::{Error, Result};
pub use numerics::{Matrix, Precision, Real, Rng};
