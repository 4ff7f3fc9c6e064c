//! Calibration of a dense, noisy sensor network against sparse reference
//! stations with a spatially varying-coefficient model.

pub mod basis;
pub mod calibration;
pub mod error;
pub mod eval;
pub mod fieldfit;
pub mod geom;
pub mod ingest;
pub mod linalg;
pub mod noise_model;
pub mod optim;
pub mod predict;
pub mod robust;
pub mod sim;
pub mod spatial_cov;
pub mod svg;

pub use error::{Error, Result};
pub use geom::{pairwise_distances, DistanceMatrix, HourlyPanel, Location, Projection};
