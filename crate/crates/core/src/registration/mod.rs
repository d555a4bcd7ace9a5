//! Model-to-sample point-cloud registration and cap orientation.

pub mod align;
pub mod cloud;
pub mod fpfh;
pub mod global;
pub mod icp;
pub mod kdtree;
pub mod pose;
pub mod rotation;

use thiserror::Error;

pub use cloud::{estimate_normals, voxel_downsample, PointCloud};
pub use fpfh::{compute_fpfh, Fpfh33, FpfhFeatures};
pub use global::{global_register, GlobalParams};
pub use icp::{icp_point_to_plane, icp_point_to_point, IcpMethod, RegistrationResult};
pub use kdtree::KdTree;
pub use pose::{estimate_pose, InitialAlignment, PoseError, PoseEstimate, PoseParams, PoseStage};
pub use rotation::{angle_between, cap_normal, rotation_to_quaternion, Quaternion, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("{points} points but {normals} normals")]
    NormalsLength { points: usize, normals: usize },
    #[error("point cloud has no normals")]
    MissingNormals,
    #[error("neighborhood of point {0} is degenerate")]
    DegenerateNeighborhood(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("only {0} correspondences survived filtering, need at least 3")]
    InsufficientCorrespondences(usize),
    #[error("no correspondences within range at iteration {iteration}")]
    NoCorrespondences { iteration: usize },
    #[error("matrix is not a rotation")]
    NotARotation,
    #[error("zero-length vector")]
    ZeroVector,
}
