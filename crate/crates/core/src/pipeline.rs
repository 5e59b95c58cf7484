//! Scene bundles on disk and the prompt to segmentation pipeline.
//!
//! ```text
//! <dir>/scene.ply
//! <dir>/cameras.json            training views
//! <dir>/heldout_cameras.json    optional
//! <dir>/labels.json             optional ground truth
//! <dir>/masks/<view>.masks.gsten, <view>.guidance.gsten
//! <dir>/features/               trained sidecar, absent until training
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use crate::distill::{load_sidecar, project_guidance, save_sidecar, FeatureGrid, Projector, Sidecar, SidecarManifest};
use crate::error::{argument_error, Error, Result};
use crate::eval::TimeBreakdown;
use crate::masks::{guidance_file_name, load_guidance, load_stack, stack_file_name, GuidanceFeatureMap, MaskStack};
use crate::matching::{score, select, Segmentation};
use crate::post::{ball_grow, filter_stage, KdTree, MaskContext};
use crate::prompt::{kmeans_queries, point_queries, resolve, sam_based_queries, Prompt, PromptKind, QuerySet};
use crate::scene::{load_cameras, load_ply, save_cameras, save_ply, Camera, GaussianCloud, GroundTruthLabels};
use crate::splat::{feature_map_from_trace, rasterize, BlendTrace, FeatureMap};

pub const PLY_FILE: &str = "scene.ply";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const HELD_OUT_FILE: &str = "heldout_cameras.json";
pub const LABELS_FILE: &str = "labels.json";
pub const MASKS_DIR: &str = "masks";
pub const FEATURES_DIR: &str = "features";

/// A loaded scene with optional trained features. Per-view rasters and
/// feature maps are computed on first use and cached.
pub struct Scene {
    pub name: String,
    pub root: Option<PathBuf>,
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub held_out: Vec<Camera>,
    pub labels: Option<GroundTruthLabels>,
    pub stacks: BTreeMap<String, MaskStack>,
    pub guidance: BTreeMap<String, GuidanceFeatureMap>,
    pub projector: Option<Projector>,
    pub manifest: Option<SidecarManifest>,
    caches: Vec<ViewCache>,
    all_tree: OnceLock<KdTree>,
}

#[derive(Default)]
struct ViewCache {
    trace: OnceLock<Arc<BlendTrace>>,
    rendered: OnceLock<Arc<FeatureMap>>,
    grid: OnceLock<Option<Arc<FeatureGrid>>>,
}

impl fmt::Debug for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scene")
            .field("name", &self.name)
            .field("gaussians", &self.cloud.len())
            .field("cameras", &self.cameras.len())
            .field("held_out", &self.held_out.len())
            .field("trained", &self.is_trained())
            .finish()
    }
}

impl Scene {
    pub fn new(name: impl Into<String>, cloud: GaussianCloud, cameras: Vec<Camera>, held_out: Vec<Camera>) -> Result<Self> {
        cloud.validate()?;
        let mut ids: Vec<&str> = cameras.iter().chain(&held_out).map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(argument_error!("camera ids must be unique across training and held-out views"));
        }
        let n = cameras.len() + held_out.len();
        Ok(Scene {
            name: name.into(),
            root: None,
            cloud,
            cameras,
            held_out,
            labels: None,
            stacks: BTreeMap::new(),
            guidance: BTreeMap::new(),
            projector: None,
            manifest: None,
            caches: (0..n).map(|_| ViewCache::default()).collect(),
            all_tree: OnceLock::new(),
        })
    }

    pub fn with_labels(mut self, labels: GroundTruthLabels) -> Result<Self> {
        labels.validate(self.cloud.len())?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_masks(mut self, stacks: Vec<MaskStack>, guidance: Vec<GuidanceFeatureMap>) -> Result<Self> {
        for s in stacks {
            let cam = self
                .camera(&s.view_id)
                .ok_or_else(|| argument_error!("mask stack for unknown view {}", s.view_id))?;
            s.check_camera(cam)?;
            self.stacks.insert(s.view_id.clone(), s);
        }
        for g in guidance {
            if self.camera(&g.view_id).is_none() {
                return Err(argument_error!("guidance map for unknown view {}", g.view_id));
            }
            self.guidance.insert(g.view_id.clone(), g);
        }
        Ok(self)
    }

    /// Installs trained features (and projector); drops cached feature maps.
    pub fn with_sidecar(mut self, sidecar: Sidecar) -> Result<Self> {
        if sidecar.features.count() != self.cloud.len() {
            return Err(Error::Data(format!(
                "trained features cover {} Gaussians, scene has {}",
                sidecar.features.count(),
                self.cloud.len()
            )));
        }
        self.cloud.features = sidecar.features;
        self.projector = sidecar.projector;
        self.manifest = Some(sidecar.manifest);
        for c in &mut self.caches {
            c.rendered = OnceLock::new();
            c.grid = OnceLock::new();
        }
        Ok(self)
    }

    pub fn is_trained(&self) -> bool {
        self.manifest.is_some()
    }

    pub fn all_cameras(&self) -> impl Iterator<Item = &Camera> {
        self.cameras.iter().chain(&self.held_out)
    }

    fn camera_index(&self, id: &str) -> Option<usize> {
        self.all_cameras().position(|c| c.id == id)
    }

    pub fn camera(&self, id: &str) -> Option<&Camera> {
        self.all_cameras().find(|c| c.id == id)
    }

    fn require_camera(&self, id: &str) -> Result<(usize, &Camera)> {
        let i = self
            .camera_index(id)
            .ok_or_else(|| argument_error!("view: unknown view {}", id))?;
        Ok((i, self.all_cameras().nth(i).unwrap()))
    }

    /// Full-scene raster of a view.
    pub fn trace(&self, view: &str) -> Result<Arc<BlendTrace>> {
        let (i, cam) = self.require_camera(view)?;
        Ok(self.caches[i]
            .trace
            .get_or_init(|| Arc::new(rasterize(&self.cloud, cam)))
            .clone())
    }

    /// Rendered feature map of a view under the current features.
    pub fn rendered(&self, view: &str) -> Result<Arc<FeatureMap>> {
        let trace = self.trace(view)?;
        let (i, _) = self.require_camera(view)?;
        Ok(self.caches[i]
            .rendered
            .get_or_init(|| {
                Arc::new(feature_map_from_trace(
                    &trace,
                    self.cloud.features.as_slice(),
                    self.cloud.feature_dim(),
                ))
            })
            .clone())
    }

    /// Projected guidance grid of a view, when both map and projector exist.
    pub fn projected_guidance(&self, view: &str) -> Result<Option<Arc<FeatureGrid>>> {
        let (i, _) = self.require_camera(view)?;
        if let Some(g) = self.caches[i].grid.get() {
            return Ok(g.clone());
        }
        let grid = match (self.guidance.get(view), &self.projector) {
            (Some(gfm), Some(p)) => Some(Arc::new(project_guidance(gfm, p)?)),
            _ => None,
        };
        Ok(self.caches[i].grid.get_or_init(|| grid).clone())
    }

    pub fn spatial_index(&self) -> &KdTree {
        self.all_tree.get_or_init(|| KdTree::over_all(&self.cloud.positions))
    }

    /// Loads a bundle directory. The features sidecar is optional.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        let cloud = load_ply(dir.join(PLY_FILE))?;
        let cameras = load_cameras(dir.join(CAMERAS_FILE))?;
        let held_path = dir.join(HELD_OUT_FILE);
        let held_out = if held_path.exists() { load_cameras(&held_path)? } else { Vec::new() };
        let mut scene = Scene::new(name, cloud, cameras, held_out)?;
        scene.root = Some(dir.to_path_buf());
        let labels_path = dir.join(LABELS_FILE);
        if labels_path.exists() {
            scene = scene.with_labels(GroundTruthLabels::load(&labels_path)?)?;
        }
        let masks = dir.join(MASKS_DIR);
        let (mut stacks, mut guidance) = (Vec::new(), Vec::new());
        for cam in &scene.cameras {
            let s = masks.join(stack_file_name(&cam.id));
            if s.exists() {
                stacks.push(load_stack(&s, cam)?);
            }
            let g = masks.join(guidance_file_name(&cam.id));
            if g.exists() {
                guidance.push(load_guidance(&g, cam)?);
            }
        }
        scene = scene.with_masks(stacks, guidance)?;
        let features = dir.join(FEATURES_DIR);
        if features.join("manifest.json").exists() {
            scene = scene.with_sidecar(load_sidecar(&features)?)?;
        }
        Ok(scene)
    }

    /// Writes the bundle; the sidecar only when the scene is trained.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let masks = dir.join(MASKS_DIR);
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        save_ply(&self.cloud, dir.join(PLY_FILE))?;
        save_cameras(&self.cameras, dir.join(CAMERAS_FILE))?;
        if !self.held_out.is_empty() {
            save_cameras(&self.held_out, dir.join(HELD_OUT_FILE))?;
        }
        if let Some(l) = &self.labels {
            l.save(dir.join(LABELS_FILE))?;
        }
        for (view, s) in &self.stacks {
            s.to_tensor().save(masks.join(stack_file_name(view)))?;
        }
        for (view, g) in &self.guidance {
            g.to_tensor().save(masks.join(guidance_file_name(view)))?;
        }
        if let Some(m) = &self.manifest {
            save_sidecar(dir.join(FEATURES_DIR), m, &self.cloud.features, self.projector.as_ref())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Prompt,
    Retrieving,
    Filtering,
    Growing,
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PipelineStage::Prompt => "prompt",
            PipelineStage::Retrieving => "retrieving",
            PipelineStage::Filtering => "filtering",
            PipelineStage::Growing => "growing",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: PipelineStage,
    pub error: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage: {}", self.stage, self.error)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait StageExt<T> {
    fn at(self, stage: PipelineStage) -> Result<T, PipelineError>;
}

impl<T> StageExt<T> for Result<T> {
    fn at(self, stage: PipelineStage) -> Result<T, PipelineError> {
        self.map_err(|error| PipelineError { stage, error })
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub raw: Segmentation,
    pub filtered: Segmentation,
    pub grown: Segmentation,
    pub queries: QuerySet,
    /// Guidance prompts only: overlap ratio and whether the pooled query was kept.
    pub sam_decision: Option<(f64, bool)>,
    pub timing: TimeBreakdown,
}

/// Runs prompt resolution, query extraction, scoring, selection, filtering
/// and growing on a trained scene.
pub fn segment(scene: &Scene, prompt: &Prompt) -> Result<Outcome, PipelineError> {
    let start = Instant::now();
    if !scene.is_trained() {
        return Err(Error::State(format!("scene {} has no trained features", scene.name))).at(PipelineStage::Prompt);
    }
    let cam = scene
        .cameras
        .iter()
        .find(|c| c.id == prompt.view)
        .ok_or_else(|| argument_error!("view: {} is not a training view of {}", prompt.view, scene.name))
        .at(PipelineStage::Prompt)?;
    let resolved = resolve(prompt, cam, scene.stacks.get(&prompt.view), scene.root.as_deref()).at(PipelineStage::Prompt)?;

    let retrieve = || -> Result<(QuerySet, Option<(f64, bool)>, Arc<BlendTrace>)> {
        let trace = scene.trace(&cam.id)?;
        let rendered = scene.rendered(&cam.id)?;
        Ok(match resolved.kind {
            PromptKind::Points => (point_queries(&rendered, &resolved)?, None, trace),
            PromptKind::Scribble | PromptKind::Mask => (kmeans_queries(&rendered, &resolved)?, None, trace),
            PromptKind::SamBased => {
                let grid = scene.projected_guidance(&cam.id)?.ok_or_else(|| {
                    Error::State(format!("view {} has no guidance map or the scene no projector", cam.id))
                })?;
                let q = sam_based_queries(&grid, &rendered, &resolved.positive_mask(), &resolved.config)?;
                (q.queries, Some((q.overlap, q.accepted)), trace)
            }
        })
    };
    let (queries, sam_decision, trace) = retrieve().at(PipelineStage::Retrieving)?;
    let scores = score(&scene.cloud.features, &queries).at(PipelineStage::Retrieving)?;
    let raw = select(&scores, &resolved.id);
    let retrieving = start.elapsed();

    let t = Instant::now();
    let ref_mask = resolved.kind.has_mask().then(|| resolved.positive_mask());
    let ctx = ref_mask.as_ref().map(|mask| MaskContext {
        camera: cam,
        trace: &trace,
        mask,
    });
    let filtered = filter_stage(&scene.cloud, &raw, resolved.kind, ctx).at(PipelineStage::Filtering)?;
    let filtering = t.elapsed();

    let t = Instant::now();
    let grown = ball_grow(&scene.cloud, &filtered, Some(scene.spatial_index())).at(PipelineStage::Growing)?;
    let growing = t.elapsed();
    Ok(Outcome {
        raw,
        filtered,
        grown,
        queries,
        sam_decision,
        timing: TimeBreakdown::from_durations(retrieving, filtering, growing, start.elapsed()),
    })
}
