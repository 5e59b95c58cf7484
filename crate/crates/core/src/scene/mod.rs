//! Gaussian clouds, cameras and ground-truth labels, plus their file formats.

mod camera;
mod ply;
mod synth;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument_error, data_error, Error, Result};

pub use camera::{load_cameras, parse_cameras, save_cameras, Camera, CAMERA_SCHEMA_VERSION};
pub use ply::{load_ply, load_ply_with, read_ply, save_ply, save_segmentation, write_ply};
pub use synth::{synth_scene, SceneSpec, SynthScene};

/// Default per-Gaussian feature width.
pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Half-width of the uniform interval new feature vectors are drawn from.
pub const FEATURE_INIT_RANGE: f64 = 1e-4;

/// Dense row-major `N x C` per-Gaussian feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn zeros(count: usize, dim: usize) -> Self {
        Features {
            dim,
            data: vec![0.0; count * dim],
        }
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(argument_error!(
                "feature payload of {} values is not a multiple of dim {}",
                data.len(),
                dim
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(data_error!("non-finite feature value for Gaussian {}", i / dim));
        }
        Ok(Features { dim, data })
    }

    /// Uniform random in `[-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE]`.
    pub fn init_uniform(count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..count * dim)
            .map(|_| rng.random_range(-FEATURE_INIT_RANGE..=FEATURE_INIT_RANGE))
            .collect();
        Features { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// A frozen 3DGS scene with a trainable feature vector per Gaussian.
///
/// Rotations are unit quaternions stored `[w, x, y, z]`. Opacities and scales
/// are kept in their constrained (post-activation) form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub features: Features,
}

impl GaussianCloud {
    /// Isotropic gray Gaussians at `positions` with zero features.
    pub fn from_positions(positions: Vec<Vector3<f64>>, scale: f64, opacity: f64, feature_dim: usize) -> Self {
        let n = positions.len();
        GaussianCloud {
            positions,
            scales: vec![Vector3::repeat(scale); n],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
            opacities: vec![opacity; n],
            colors: vec![[0.5; 3]; n],
            features: Features::zeros(n, feature_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    /// Checks every documented invariant, reporting the first offending Gaussian.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.scales.len() != n
            || self.rotations.len() != n
            || self.opacities.len() != n
            || self.colors.len() != n
            || self.features.count() != n
        {
            return Err(data_error!("attribute arrays disagree on Gaussian count {}", n));
        }
        for i in 0..n {
            if !self.positions[i].iter().all(|v| v.is_finite()) {
                return Err(data_error!("non-finite position at Gaussian {}", i));
            }
            if !self.scales[i].iter().all(|&s| s.is_finite() && s > 0.0) {
                return Err(data_error!("non-positive scale at Gaussian {}", i));
            }
            let q = self.rotations[i];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(data_error!("quaternion norm {} at Gaussian {}", norm, i));
            }
            let o = self.opacities[i];
            if !(o > 0.0 && o < 1.0) {
                return Err(data_error!("opacity {} outside (0,1) at Gaussian {}", o, i));
            }
            if !self.colors[i].iter().all(|c| c.is_finite()) {
                return Err(data_error!("non-finite color at Gaussian {}", i));
            }
        }
        if self.features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(data_error!("non-finite feature value"));
        }
        Ok(())
    }

    /// World-space covariance `R S S^T R^T` of one Gaussian.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = quat_to_matrix(self.rotations[i]);
        let s = Matrix3::from_diagonal(&self.scales[i]);
        let m = r * s;
        m * m.transpose()
    }

    /// Copies the Gaussians selected by `membership` into a new cloud.
    pub fn subset(&self, membership: &[bool]) -> Result<GaussianCloud> {
        if membership.len() != self.len() {
            return Err(argument_error!(
                "membership has {} entries for {} Gaussians",
                membership.len(),
                self.len()
            ));
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| membership[i]).collect();
        let dim = self.feature_dim();
        let mut features = Vec::with_capacity(keep.len() * dim);
        for &i in &keep {
            features.extend_from_slice(self.features.row(i));
        }
        Ok(GaussianCloud {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
            scales: keep.iter().map(|&i| self.scales[i]).collect(),
            rotations: keep.iter().map(|&i| self.rotations[i]).collect(),
            opacities: keep.iter().map(|&i| self.opacities[i]).collect(),
            colors: keep.iter().map(|&i| self.colors[i]).collect(),
            features: Features { dim, data: features },
        })
    }
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Per-Gaussian object labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub gaussian_labels: Vec<u32>,
}

impl GroundTruthLabels {
    /// Highest label present; labels span `0..=max_label`.
    pub fn max_label(&self) -> u32 {
        self.gaussian_labels.iter().copied().max().unwrap_or(0)
    }

    /// Object labels (non-zero) in ascending order.
    pub fn object_labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self
            .gaussian_labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn membership(&self, label: u32) -> Vec<bool> {
        self.gaussian_labels.iter().map(|&l| l == label).collect()
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        if self.gaussian_labels.len() != count {
            return Err(data_error!(
                "{} labels for {} Gaussians",
                self.gaussian_labels.len(),
                count
            ));
        }
        let max = self.max_label();
        let mut seen = vec![false; max as usize + 1];
        for &l in &self.gaussian_labels {
            seen[l as usize] = true;
        }
        if let Some(gap) = seen.iter().skip(1).position(|s| !s) {
            return Err(data_error!("labels are not contiguous: {} missing", gap + 1));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
