//! Rigid 2D/3D registration of a CT volume to an X-ray image using
//! digitally reconstructed radiographs and learning-rate-adapted CMA-ES.

pub mod cmaes;
pub mod drr;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod lra;
pub mod optimizer;
pub mod registration;
pub mod similarity;
pub mod volume;

pub use drr::{normalize_image, project, DetectorImage};
pub use error::{Error, Result};
pub use evaluation::{
    default_landmarks, difference_map, mtre, pose_error, run_benchmark, BenchmarkConfig,
    BenchmarkReport, LandmarkSet,
};
pub use geometry::{make_camera, pose_to_transform, CameraGeometry, Pose6, RigidTransform};
pub use optimizer::{minimize, Optimizer, OptimizerKind};
pub use registration::{register, RegistrationConfig, RegistrationResult};
pub use similarity::{MetricKind, SimilarityConfig};
pub use volume::{load_volume, make_phantom, save_volume, PhantomKind, Volume};
