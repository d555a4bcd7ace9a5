//! Mushroom cap detection, 3D localization and pose estimation from RGB-D frames.
//!
//! Every algorithm is generic over a [`scalar::Real`] scalar; the aliases below fix it to `f64`.

pub mod detection;
pub mod evaluation;
pub mod imgcore;
pub mod io;
pub mod linalg;
pub mod localization;
pub mod pipeline;
pub mod registration;
pub mod scalar;
pub mod segmentation;
pub mod synthetic;

pub use scalar::Real;

pub type Point3D = linalg::Point3<f64>;
pub type Mat3 = linalg::Mat3<f64>;
pub type ImageGray = imgcore::ImageGray<f64>;
pub type LevelSetField = segmentation::LevelSetField<f64>;
pub type ChanVeseParams = segmentation::ChanVeseParams<f64>;
pub type RadiusRange = detection::RadiusRange<f64>;
pub type CircleDetection = detection::CircleDetection<f64>;
pub type DetectParams = detection::DetectParams<f64>;
pub type DepthFrame = localization::DepthFrame<f64>;
pub type CameraIntrinsics = localization::CameraIntrinsics<f64>;
pub type MushroomLocation = localization::MushroomLocation<f64>;
pub type PointCloud = registration::PointCloud<f64>;
pub type RigidTransform = registration::RigidTransform<f64>;
pub type Quaternion = registration::Quaternion<f64>;
pub type RegistrationResult = registration::RegistrationResult<f64>;
pub type PoseParams = registration::PoseParams<f64>;
pub type PoseEstimate = registration::PoseEstimate<f64>;
pub type GroundTruthCircle = evaluation::GroundTruthCircle<f64>;
pub type DepthAccuracyStats = evaluation::DepthAccuracyStats<f64>;
pub type SceneSpec = synthetic::SceneSpec<f64>;
pub type CapSpec = synthetic::CapSpec<f64>;
pub type SyntheticScene = synthetic::SyntheticScene<f64>;
pub type PipelineConfig = pipeline::PipelineConfig<f64>;
pub type MushroomReport = pipeline::MushroomReport<f64>;
pub type PipelineOutput = pipeline::PipelineOutput<f64>;
