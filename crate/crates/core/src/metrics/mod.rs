//! Sample-quality metrics.

mod fid;
mod inception;

pub use fid::{fid_from_features, fit_gaussian, frechet_distance, stats_from_parts, FeatureStats, NEG_EIG_TOL};
pub use inception::inception_score;
