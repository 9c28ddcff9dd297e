pub mod autodiff;
pub mod composite;
pub mod dataset;
pub mod dgp;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod fit;
pub mod gprn;
pub mod kernels;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod svgp;
pub mod trainer;

pub use error::{Error, Result};
pub use nalgebra;
