//! Trained features and projector, stored next to (never inside) the scene PLY.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/features.gsten            [N, C] f32
//! <dir>/projector.<k>.weight.gsten [in, out] f32
//! <dir>/projector.<k>.bias.gsten   [out] f32
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Dense, Projector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{argument_error, format_error, Error, Result};
use crate::scene::{Features, GroundTruthLabels};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarManifest {
    #[serde(rename = "C")]
    pub feature_dim: usize,
    /// Guidance channel count; absent when trained without guidance.
    #[serde(rename = "C_sam")]
    pub guidance_dim: Option<usize>,
    pub iterations: usize,
    pub lambda: f64,
    pub seed: u64,
    pub num_gaussians: usize,
    #[serde(default)]
    pub projector_layers: usize,
}

#[derive(Debug, Clone)]
pub struct Sidecar {
    pub manifest: SidecarManifest,
    pub features: Features,
    pub projector: Option<Projector>,
}

pub fn save_sidecar(
    dir: impl AsRef<Path>,
    manifest: &SidecarManifest,
    features: &Features,
    projector: Option<&Projector>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = manifest.clone();
    manifest.projector_layers = projector.map_or(0, |p| p.layers().len());
    manifest.num_gaussians = features.count();
    manifest.feature_dim = features.dim();
    Tensor::from_f64(vec![features.count(), features.dim()], features.as_slice())?
        .save(dir.join("features.gsten"))?;
    if let Some(p) = projector {
        for (k, layer) in p.layers().iter().enumerate() {
            let w: Vec<f64> = layer.weight.iter().copied().collect();
            Tensor::from_f64(vec![layer.input_dim(), layer.output_dim()], &w)?
                .save(dir.join(format!("projector.{}.weight.gsten", k)))?;
            Tensor::from_f64(vec![layer.output_dim()], &layer.bias.to_vec())?
                .save(dir.join(format!("projector.{}.bias.gsten", k)))?;
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_sidecar(dir: impl AsRef<Path>) -> Result<Sidecar> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SidecarManifest = serde_json::from_str(&text)?;
    let t = Tensor::load(dir.join("features.gsten"))?;
    t.expect_rank(2)?;
    if t.dims != [manifest.num_gaussians, manifest.feature_dim] {
        return Err(format_error!(
            "features tensor {:?} disagrees with manifest ({} x {})",
            t.dims,
            manifest.num_gaussians,
            manifest.feature_dim
        ));
    }
    let features = Features::from_vec(manifest.feature_dim, t.to_f64()?)?;
    let projector = if manifest.projector_layers > 0 {
        let layers = (0..manifest.projector_layers)
            .map(|k| {
                let w = Tensor::load(dir.join(format!("projector.{}.weight.gsten", k)))?;
                let b = Tensor::load(dir.join(format!("projector.{}.bias.gsten", k)))?;
                w.expect_rank(2)?;
                b.expect_rank(1)?;
                Ok(Dense {
                    weight: Array2::from_shape_vec((w.dims[0], w.dims[1]), w.to_f64()?)
                        .map_err(|e| format_error!("projector weight: {}", e))?,
                    bias: Array1::from_vec(b.to_f64()?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(Projector::from_layers(layers)?)
    } else {
        None
    };
    Ok(Sidecar {
        manifest,
        features,
        projector,
    })
}

/// Untrained stand-in whose features encode the ground truth directly: one
/// random unit direction per label plus isotropic noise of std `noise`.
/// Useful where feature quality is not under test (latency, plumbing).
pub fn label_sidecar(labels: &GroundTruthLabels, dim: usize, noise: f64, seed: u64) -> Result<Sidecar> {
    if dim == 0 {
        return Err(argument_error!("feature dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..=labels.max_label())
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(labels.gaussian_labels.len() * dim);
    for &l in &labels.gaussian_labels {
        for &d in &directions[l as usize] {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(d + noise * e);
        }
    }
    let features = Features::from_vec(dim, data)?;
    Ok(Sidecar {
        manifest: SidecarManifest {
            feature_dim: dim,
            guidance_dim: None,
            iterations: 0,
            lambda: 0.0,
            seed,
            num_gaussians: features.count(),
            projector_layers: 0,
        },
        features,
        projector: None,
    })
}
