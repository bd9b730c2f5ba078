//! Dense correspondence between non-rigidly deformed point clouds.

pub mod config;
pub mod error;
pub mod deformation;
pub mod eval;
pub mod geodesics;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod projection;
pub mod solver;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use deformation::{DeformationGraph, GraphParams, MatchMode, TransformSet};
pub use eval::GroundTruth;
pub use geodesics::GeodesicMatrix;
pub use geometry::{Point3, PointCloud};
pub use matching::{DenseMap, LossBreakdown, LossWeights, SoftCorrespondence};
pub use projection::{FeatureImage, FeatureMatrix};
pub use solver::{match_pair, register, MatchOptions, MatchResult, SolveReport, SolverConfig};
