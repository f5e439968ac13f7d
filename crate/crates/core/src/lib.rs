//! Scheduling and simulation of synchronous federated learning over LEO
//! satellite clusters connected by intra-orbit links.

pub mod cu;
pub mod des;
pub mod error;
pub mod fl;
pub mod gu;
pub mod linkmodel;
pub mod orbital;
pub mod ring;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
