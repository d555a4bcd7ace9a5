//! Cap orientation: register an upright model cloud (source) onto a sample cloud (target).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use super::align::principal_hypotheses;
use super::cloud::{estimate_normals_unoriented, voxel_downsample, PointCloud};
use super::fpfh::{compute_fpfh, FpfhFeatures};
use super::global::{global_register, GlobalParams};
use super::icp::{icp, IcpMethod, RegistrationResult};
use super::rotation::{cap_normal, rotation_to_quaternion, Quaternion, RigidTransform};
use super::RegistrationError;
use crate::linalg::Point3;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseParams<T: Real> {
    /// Downsampling voxel edge in meters.
    pub voxel: T,
    pub normal_knn: usize,
    /// FPFH radius as a multiple of `voxel`.
    pub feature_radius_factor: T,
    /// ICP correspondence cutoff as a multiple of `voxel`.
    pub icp_max_corr_factor: T,
    pub icp_max_iter: usize,
    pub icp_method: IcpMethod,
    pub tuple_scale: T,
    pub max_tuples: usize,
    pub gnc_iterations: usize,
    pub seed: u64,
}

impl<T: Real> Default for PoseParams<T> {
    fn default() -> Self {
        let g = GlobalParams::<T>::default();
        Self {
            voxel: T::lit(0.002),
            normal_knn: 30,
            feature_radius_factor: T::lit(5.0),
            icp_max_corr_factor: T::lit(1.5),
            icp_max_iter: 30,
            icp_method: IcpMethod::PointToPoint,
            tuple_scale: g.tuple_scale,
            max_tuples: g.max_tuples,
            gnc_iterations: g.iterations,
            seed: 0,
        }
    }
}

impl<T: Real> PoseParams<T> {
    pub fn global(&self) -> GlobalParams<T> {
        GlobalParams {
            voxel: self.voxel,
            tuple_scale: self.tuple_scale,
            max_tuples: self.max_tuples,
            iterations: self.gnc_iterations,
            stage_length: GlobalParams::<T>::default().stage_length,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseStage {
    Downsample,
    Normals,
    Features,
    Global,
    Refine,
    Quaternion,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage:?} stage failed: {error}")]
pub struct PoseError {
    pub stage: PoseStage,
    #[source]
    pub error: RegistrationError,
}

trait Stage<V> {
    fn at(self, stage: PoseStage) -> Result<V, PoseError>;
}

impl<V> Stage<V> for Result<V, RegistrationError> {
    fn at(self, stage: PoseStage) -> Result<V, PoseError> {
        self.map_err(|error| PoseError { stage, error })
    }
}

/// Where the winning ICP run started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialAlignment {
    Global,
    /// Index into the principal-axis hypotheses.
    Principal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate<T: Real> {
    pub result: RegistrationResult<T>,
    /// Feature-based global estimate, or why it could not be formed.
    pub global: Result<RigidTransform<T>, RegistrationError>,
    pub initial: InitialAlignment,
    pub quaternion: Quaternion<T>,
    pub cap_normal: Point3<T>,
}

/// Downsampled cloud with normals pointing away from its centroid, plus its descriptors.
pub fn prepare_features<T: Real>(
    cloud: &PointCloud<T>,
    params: &PoseParams<T>,
) -> Result<(PointCloud<T>, FpfhFeatures<T>), PoseError> {
    let down = voxel_downsample(cloud, params.voxel).at(PoseStage::Downsample)?;
    let knn = params.normal_knn.min(down.len());
    let mut down = estimate_normals_unoriented(&down, knn).at(PoseStage::Normals)?;
    let center = down.centroid().ok_or(RegistrationError::EmptyCloud).at(PoseStage::Normals)?;
    down.orient_normals_away_from(&center);
    let feats = compute_fpfh(&down, params.voxel * params.feature_radius_factor).at(PoseStage::Features)?;
    Ok((down, feats))
}

/// Registers `model` onto `sample` and reports the cap normal.
///
/// Descriptors on a smooth dome are nearly uniform, so the feature-based estimate can be
/// ambiguous or absent. ICP is therefore started from it and from every principal-axis
/// hypothesis; the run with the lowest truncated objective wins (earliest on ties).
pub fn estimate_pose<T: Real>(
    model: &PointCloud<T>,
    sample: &PointCloud<T>,
    model_up: &Point3<T>,
    params: &PoseParams<T>,
) -> Result<PoseEstimate<T>, PoseError> {
    if model.is_empty() || sample.is_empty() {
        return Err(PoseError { stage: PoseStage::Downsample, error: RegistrationError::EmptyCloud });
    }
    let up = model_up.normalized().ok_or(RegistrationError::ZeroVector).at(PoseStage::Quaternion)?;
    let (dm, fm) = prepare_features(model, params)?;
    let (ds, fs) = prepare_features(sample, params)?;
    let global = global_register(&dm, &ds, &fm, &fs, &params.global());
    let mut starts = Vec::new();
    if let Ok(g) = &global {
        starts.push((InitialAlignment::Global, *g));
    }
    let principal = principal_hypotheses(&dm, &ds).at(PoseStage::Global)?;
    starts.extend(principal.into_iter().enumerate().map(|(k, h)| (InitialAlignment::Principal(k), h)));

    let (src, tgt) = match params.icp_method {
        IcpMethod::PointToPoint => (model.clone(), sample.clone()),
        IcpMethod::PointToPlane => {
            let knn = params.normal_knn.min(sample.len());
            (model.clone(), estimate_normals_unoriented(sample, knn).at(PoseStage::Normals)?)
        }
    };
    let max_corr = params.voxel * params.icp_max_corr_factor;
    let runs: Vec<_> = starts
        .par_iter()
        .map(|(_, init)| icp(&src, &tgt, init, max_corr, params.icp_max_iter, params.icp_method))
        .collect();
    let mut best: Option<(InitialAlignment, RegistrationResult<T>)> = None;
    let mut first_err = None;
    for ((tag, _), run) in starts.iter().zip(runs) {
        match run {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => final_objective(&r) < final_objective(b),
                };
                if better {
                    best = Some((*tag, r));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let (initial, result) = match best {
        Some(b) => b,
        None => return Err(first_err.unwrap_or(RegistrationError::EmptyCloud)).at(PoseStage::Refine),
    };
    let quaternion = rotation_to_quaternion(&result.transform.rotation).at(PoseStage::Quaternion)?;
    let cap_normal = cap_normal(&result.transform.rotation, &up);
    Ok(PoseEstimate { result, global, initial, quaternion, cap_normal })
}

fn final_objective<T: Real>(r: &RegistrationResult<T>) -> T {
    r.objective_history.last().copied().unwrap_or_else(T::infinity)
}
