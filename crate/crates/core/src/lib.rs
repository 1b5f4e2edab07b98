pub mod config;
pub mod error;
pub mod experiment;
pub mod hmm;
pub mod io;
pub mod penalty;
pub mod rde;
pub mod robust;
pub mod rough_path;
pub mod value;
pub mod verify;

pub use error::{Error, Result};

/// Version of this library.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
