//! Deterministic synthetic scenes with known per-Gaussian object labels.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Camera, Features, GaussianCloud, GroundTruthLabels, DEFAULT_FEATURE_DIM};
use crate::error::{argument_error, Result};

fn default_blob_radius() -> f64 {
    1.0
}
fn default_views() -> usize {
    8
}
fn default_held_out() -> usize {
    4
}
fn default_image_size() -> usize {
    64
}
fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: usize,
    pub gaussians_per_object: usize,
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_blob_radius")]
    pub blob_radius: f64,
    #[serde(default = "default_views")]
    pub views: usize,
    #[serde(default = "default_held_out")]
    pub held_out_views: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

impl SceneSpec {
    pub fn new(objects: usize, gaussians_per_object: usize, separation: f64, seed: u64) -> Self {
        SceneSpec {
            objects,
            gaussians_per_object,
            separation,
            seed,
            blob_radius: default_blob_radius(),
            views: default_views(),
            held_out_views: default_held_out(),
            image_size: default_image_size(),
            feature_dim: default_feature_dim(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cloud: GaussianCloud,
    /// Training views.
    pub cameras: Vec<Camera>,
    /// Views never used for training, for propagation checks.
    pub held_out: Vec<Camera>,
    pub labels: GroundTruthLabels,
    pub centers: Vec<Vector3<f64>>,
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return q.map(|v| v / n);
        }
    }
}

fn place_centers(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut half = spec.separation * (spec.objects as f64).sqrt() * 0.8;
    loop {
        let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(spec.objects);
        let mut attempts = 0;
        while centers.len() < spec.objects && attempts < 10_000 {
            attempts += 1;
            let c = Vector3::new(
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
                rng.random_range(-0.2..=0.2) * spec.separation,
            );
            if centers.iter().all(|o| (o - c).norm() >= spec.separation) {
                centers.push(c);
            }
        }
        if centers.len() == spec.objects {
            return centers;
        }
        half *= 1.25;
    }
}

/// Generates axis-aligned ellipsoidal clusters of Gaussians, one per object,
/// with a ring of cameras looking at the scene centroid.
///
/// Positions are uniform inside each ellipsoid, whose largest semi-axis equals
/// `blob_radius`, so any two objects are at least
/// `separation - 2 * blob_radius` apart.
pub fn synth_scene(spec: &SceneSpec) -> Result<SynthScene> {
    if spec.objects == 0 {
        return Err(argument_error!("scene needs at least one object"));
    }
    if spec.gaussians_per_object == 0 {
        return Err(argument_error!("objects need at least one Gaussian"));
    }
    if !(spec.separation > 0.0) || !(spec.blob_radius > 0.0) {
        return Err(argument_error!("separation and blob radius must be positive"));
    }
    if spec.views == 0 || spec.image_size == 0 || spec.feature_dim == 0 {
        return Err(argument_error!("views, image size and feature dim must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_centers(spec, &mut rng);

    let n = spec.objects * spec.gaussians_per_object;
    let mut cloud = GaussianCloud {
        positions: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        features: Features::zeros(0, spec.feature_dim),
    };
    let mut labels = Vec::with_capacity(n);

    for (obj, center) in centers.iter().enumerate() {
        let mut axes = Vector3::from_fn(|_, _| rng.random_range(0.6..=1.0));
        axes /= axes.max();
        axes *= spec.blob_radius;
        let volume = 4.0 / 3.0 * PI * axes.x * axes.y * axes.z;
        let spacing = (volume / spec.gaussians_per_object as f64).cbrt();
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..=0.9));

        for _ in 0..spec.gaussians_per_object {
            let local = loop {
                let u = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
                if u.norm_squared() <= 1.0 {
                    break u.component_mul(&axes);
                }
            };
            cloud.positions.push(center + local);
            cloud
                .scales
                .push(Vector3::from_fn(|_, _| 0.7 * spacing * rng.random_range(0.7..=1.3)));
            cloud.rotations.push(random_unit_quaternion(&mut rng));
            cloud.opacities.push(rng.random_range(0.35..=0.75));
            cloud
                .colors
                .push(base.map(|b| (b + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0)));
            labels.push(obj as u32 + 1);
        }
    }
    cloud.features = Features::init_uniform(n, spec.feature_dim, spec.seed ^ 0x5eed_f00d);

    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers
        .iter()
        .map(|c| (c - centroid).norm())
        .fold(0.0, f64::max)
        + spec.blob_radius;
    let half_fov = 30f64.to_radians();
    let distance = 1.2 * radius / half_fov.sin();
    let focal = spec.image_size as f64 / (2.0 * half_fov.tan());
    let ring = |id: String, azimuth: f64, elevation: f64| {
        let eye = centroid
            + distance
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
        Camera::look_at(
            id,
            spec.image_size,
            spec.image_size,
            focal,
            eye,
            centroid,
            Vector3::z(),
        )
    };
    let cameras = (0..spec.views)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / spec.views as f64;
            let el = if i % 2 == 0 { 30f64 } else { 45f64 }.to_radians();
            ring(format!("t{:02}", i), az, el)
        })
        .collect();
    let held_out = (0..spec.held_out_views)
        .map(|i| {
            let az = 2.0 * PI * (i as f64 + 0.5) / spec.held_out_views as f64 + 0.3;
            let el = if i % 2 == 0 { 20f64 } else { 55f64 }.to_radians();
            ring(format!("h{:02}", i), az, el)
        })
        .collect();

    Ok(SynthScene {
        cloud,
        cameras,
        held_out,
        labels: GroundTruthLabels {
            gaussian_labels: labels,
        },
        centers,
    })
}
