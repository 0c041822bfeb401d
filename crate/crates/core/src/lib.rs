pub mod error;
pub mod harness;
pub mod lstm;
pub mod mpc;
pub mod numerics;
pub mod observer;
pub mod plant;
pub mod refcalc;
pub mod sysid;

pub use error::{Error, Result};
