//! Distillation of 2D mask supervision into per-Gaussian features.
//!
//! Two objectives drive the features: a guidance loss that segments the
//! rendered feature map with mask queries pooled from projected guidance
//! features, and a correspondence loss that pulls rendered features together
//! or apart according to the mask-IoU of pixel pairs.

mod adam;
mod loss;
mod projector;
mod sidecar;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument_error, Error, Result};
use crate::masks::{GuidanceFeatureMap, MaskStack, DEFAULT_PAIRS_PER_VIEW};
use crate::scene::{Camera, Features, GaussianCloud, DEFAULT_FEATURE_DIM};
use crate::splat::{rasterize, BlendTrace, FeatureMap};

pub use adam::Adam;
pub use loss::{
    correspondence_loss, guidance_loss, mask_query, CorrespondenceLoss, GuidanceLoss,
    MIN_FEATURE_NORM,
};
pub use projector::{project_guidance, Dense, FeatureGrid, ForwardCache, Projector};
pub use sidecar::{label_sidecar, load_sidecar, save_sidecar, Sidecar, SidecarManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Weight of the correspondence loss.
    pub lambda: f64,
    pub lr_features: f64,
    pub lr_projector: f64,
    pub pairs_per_view: usize,
    pub feature_dim: usize,
    pub masks_per_step: usize,
    pub projector_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            lambda: 1.0,
            lr_features: 2.5e-3,
            lr_projector: 1e-4,
            pairs_per_view: DEFAULT_PAIRS_PER_VIEW,
            feature_dim: DEFAULT_FEATURE_DIM,
            masks_per_step: 16,
            projector_hidden: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(argument_error!("iterations must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(argument_error!("lambda must be non-negative"));
        }
        if !(self.lr_features > 0.0 && self.lr_projector > 0.0) {
            return Err(argument_error!("learning rates must be positive"));
        }
        if self.pairs_per_view == 0 || self.masks_per_step == 0 {
            return Err(argument_error!("pairs per view and masks per step must be positive"));
        }
        if self.feature_dim == 0 || self.projector_hidden == 0 {
            return Err(argument_error!("feature and hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub view: usize,
    pub total: f64,
    pub guidance: f64,
    pub correspondence: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub features: Features,
    /// Present when guidance maps were supplied.
    pub projector: Option<Projector>,
    pub history: Vec<LossRecord>,
}

impl TrainOutput {
    pub fn into_sidecar(self, cfg: &TrainConfig) -> Sidecar {
        Sidecar {
            manifest: SidecarManifest {
                feature_dim: self.features.dim(),
                guidance_dim: self.projector.as_ref().map(Projector::input_dim),
                iterations: cfg.iterations,
                lambda: cfg.lambda,
                seed: cfg.seed,
                num_gaussians: self.features.count(),
                projector_layers: self.projector.as_ref().map_or(0, |p| p.layers().len()),
            },
            features: self.features,
            projector: self.projector,
        }
    }
}

struct View<'a> {
    trace: BlendTrace,
    stack: &'a MaskStack,
    has_support: bool,
    /// Guidance-grid cells covered by each mask of the stack.
    cells: Vec<Vec<bool>>,
    guidance: Option<&'a GuidanceFeatureMap>,
}

/// Trains the feature block of `cloud` (and a projector, when guidance maps
/// are given) for `cfg.iterations` steps, visiting views round-robin.
///
/// Geometry is never touched. An empty `guidance` slice disables the
/// guidance loss; `cfg.lambda == 0` disables the correspondence loss.
pub fn train(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    stacks: &[MaskStack],
    guidance: &[GuidanceFeatureMap],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cameras.is_empty() {
        return Err(argument_error!("training needs at least one camera"));
    }
    if cloud.feature_dim() != cfg.feature_dim {
        return Err(argument_error!(
            "cloud features have width {}, config expects {}",
            cloud.feature_dim(),
            cfg.feature_dim
        ));
    }
    let stack_by_view: BTreeMap<&str, &MaskStack> =
        stacks.iter().map(|s| (s.view_id.as_str(), s)).collect();
    let guidance_by_view: BTreeMap<&str, &GuidanceFeatureMap> =
        guidance.iter().map(|g| (g.view_id.as_str(), g)).collect();
    let guidance_dim = guidance.first().map(|g| g.dim);
    if guidance.iter().any(|g| Some(g.dim) != guidance_dim) {
        return Err(argument_error!("guidance maps disagree on channel count"));
    }
    let mut pending = Vec::new();
    for cam in cameras {
        let stack = *stack_by_view
            .get(cam.id.as_str())
            .ok_or_else(|| argument_error!("view {} has no mask stack", cam.id))?;
        stack.check_camera(cam)?;
        if stack.support().is_empty() && cfg.lambda > 0.0 && guidance.is_empty() {
            return Err(argument_error!("view {} has no non-empty masks", cam.id));
        }
        pending.push((cam, stack, guidance_by_view.get(cam.id.as_str()).copied()));
    }
    let views: Vec<View> = pending
        .into_par_iter()
        .map(|(cam, stack, guidance)| View {
            trace: rasterize(cloud, cam),
            stack,
            has_support: !stack.support().is_empty(),
            cells: guidance
                .map(|g| stack.masks().iter().map(|m| g.downsample(m)).collect())
                .unwrap_or_default(),
            guidance,
        })
        .collect();

    let dim = cfg.feature_dim;
    let mut features = cloud.features.clone();
    let mut feature_opt = Adam::new(features.as_slice().len(), cfg.lr_features);
    let mut projector = guidance_dim.map(|c_sam| {
        Projector::new(c_sam, cfg.projector_hidden, dim, cfg.seed.wrapping_add(1))
    });
    let mut projector_opts: Vec<(Adam, Adam)> = projector
        .as_ref()
        .map(|p| {
            p.layers()
                .iter()
                .map(|l| {
                    (
                        Adam::new(l.weight.len(), cfg.lr_projector),
                        Adam::new(l.bias.len(), cfg.lr_projector),
                    )
                })
                .collect()
        })
        .unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let v = iteration % views.len();
        let view = &views[v];
        let rendered = FeatureMap {
            width: view.trace.width,
            height: view.trace.height,
            dim,
            data: view.trace.render(features.as_slice(), dim),
            alpha: Vec::new(),
        };
        let mut grad_rendered = vec![0.0; rendered.data.len()];
        let mut any_grad = false;

        let mut guidance_value = 0.0;
        if let (Some(gfm), Some(proj)) = (view.guidance, projector.as_mut()) {
            let x = projector::guidance_matrix(gfm);
            let cache = proj.forward(x);
            let grid = FeatureGrid {
                width: gfm.grid_width,
                height: gfm.grid_height,
                dim,
                data: cache.output().iter().copied().collect(),
            };
            let masks = view.stack.masks();
            let chosen: Vec<usize> = if masks.len() > cfg.masks_per_step {
                let mut idx = sample(&mut rng, masks.len(), cfg.masks_per_step).into_vec();
                idx.sort_unstable();
                idx
            } else {
                (0..masks.len()).collect()
            };
            let terms: Vec<(usize, Vec<f64>)> = chosen
                .iter()
                .filter_map(|&m| Some((m, mask_query(&grid, &view.cells[m])?)))
                .collect();
            if !terms.is_empty() {
                let scale = 1.0 / terms.len() as f64;
                let queries = Array2::from_shape_fn((terms.len(), dim), |(i, k)| terms[i].1[k]);
                let targets = Array2::from_shape_fn((rendered.pixel_count(), terms.len()), |(p, i)| {
                    if masks[terms[i].0].bits[p] {
                        1.0
                    } else {
                        0.0
                    }
                });
                let pixels = ArrayView2::from_shape((rendered.pixel_count(), dim), &rendered.data)
                    .map_err(|e| Error::State(format!("rendered feature layout: {}", e)))?;
                let (losses, d_rendered, d_queries) =
                    loss::guidance_loss_batch(queries.view(), pixels, targets.view(), scale);
                guidance_value = scale * losses.iter().sum::<f64>();
                for (g, t) in grad_rendered.iter_mut().zip(d_rendered.iter()) {
                    *g += t;
                }
                let mut d_grid = Array2::<f64>::zeros((grid.cell_count(), dim));
                for (i, (m, _)) in terms.iter().enumerate() {
                    let cells = &view.cells[*m];
                    let covered = cells.iter().filter(|&&c| c).count() as f64;
                    for (c, _) in cells.iter().enumerate().filter(|(_, &on)| on) {
                        for k in 0..dim {
                            d_grid[(c, k)] += d_queries[(i, k)] / covered;
                        }
                    }
                }
                let grads = proj.backward(&cache, d_grid);
                for ((layer, (dw, db)), (opt_w, opt_b)) in proj
                    .layers_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(projector_opts.iter_mut())
                {
                    opt_w.step(layer.weight.as_slice_mut().unwrap(), dw.as_slice().unwrap());
                    opt_b.step(layer.bias.as_slice_mut().unwrap(), db.as_slice().unwrap());
                }
                any_grad = true;
            }
        }

        let mut corr_value = 0.0;
        if cfg.lambda > 0.0 && view.has_support {
            let pairs = view.stack.sample_pairs(cfg.pairs_per_view, &mut rng)?;
            let term = correspondence_loss(&rendered, &pairs);
            corr_value = term.loss;
            for (g, t) in grad_rendered.iter_mut().zip(&term.grad_rendered) {
                *g += cfg.lambda * t;
            }
            any_grad |= term.used_pairs > 0;
        }

        if any_grad {
            let grad = view.trace.backward(&grad_rendered, dim)?;
            feature_opt.step(features.as_mut_slice(), &grad);
        }
        history.push(LossRecord {
            iteration,
            view: v,
            total: guidance_value + cfg.lambda * corr_value,
            guidance: guidance_value,
            correspondence: corr_value,
        });
    }

    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("training diverged to non-finite features".into()));
    }
    Ok(TrainOutput {
        features,
        projector,
        history,
    })
}

/// CSV with header `iteration,view,total,guidance,correspondence`.
pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,view,total,guidance,correspondence\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.view, r.total, r.guidance, r.correspondence
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{synth_masks, Granularity};
    use crate::scene::{synth_scene, SceneSpec};

    #[test]
    fn disabled_losses_leave_features_alone() {
        let s = synth_scene(&SceneSpec::new(2, 60, 6.0, 1)).unwrap();
        let stacks = synth_masks(&s.cloud, &s.cameras, &s.labels, Granularity::default()).unwrap();
        let cfg = TrainConfig {
            iterations: 20,
            lambda: 0.0,
            ..Default::default()
        };
        let out = train(&s.cloud, &s.cameras, &stacks, &[], &cfg).unwrap();
        assert_eq!(out.features, s.cloud.features);
        assert!(out.history.iter().all(|r| r.total == 0.0));
        assert!(out.projector.is_none());
    }

    #[test]
    fn missing_stack_is_a_configuration_error() {
        let s = synth_scene(&SceneSpec::new(1, 20, 6.0, 1)).unwrap();
        let stacks = synth_masks(&s.cloud, &s.cameras[..1], &s.labels, Granularity::default()).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&s.cloud, &s.cameras, &stacks, &[], &cfg),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
