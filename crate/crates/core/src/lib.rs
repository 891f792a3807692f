pub mod error;
pub mod geom3d;
pub mod harness;
pub mod invariants;
pub mod layers;
pub mod model;
pub mod autodiff;
pub mod pointcloud;
pub mod tasks;

pub use error::{Error, Result};
