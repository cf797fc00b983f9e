pub mod error;
pub mod growprune;
pub mod hlstm;
pub mod latlab;
pub mod numkit;
pub mod synthflow;

pub use error::{Error, Result};
