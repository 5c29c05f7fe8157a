//! Self-annotation: turning unlabeled images into guidance signals.

mod corrupt;
mod features;
mod kmeans;
mod mask;
mod nmi;
mod proposals;

pub use corrupt::{corrupt_assignments, corrupt_assignments_with, CorruptionMode};
pub use features::{FeatureExtractor, FeatureMatrix, PatchFeatureExtractor, PatchGrid, RawPatchExtractor, ToyExtractor};
pub use kmeans::{assign_all, assign_cluster, kmeans_fit, kmeans_fit_best, kmeans_objective, ClusterModel, KMeansFit};
pub use mask::{mask_to_multihot, Mask, Rect};
pub use nmi::nmi;
pub use proposals::{collect_patch_features, propose_box, propose_segmentation, BOX_THRESHOLD};
