pub mod backstepping;
pub mod error;
pub mod flatness;
pub mod gevrey;
pub mod io;
pub mod numerics;
pub mod observer;
mod optimize;
pub mod scenario;
pub mod steady_state;
pub mod swarm;
pub mod target;

pub use error::{Error, Result};
