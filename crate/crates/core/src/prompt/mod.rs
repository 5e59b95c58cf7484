//! User prompts and the query sets derived from them.
//!
//! Prompt JSON:
//!
//! ```json
//! {"id": "p1", "view": "t00", "kind": "points",
//!  "positives": [[12, 30], [14, 31]], "negatives": [[50, 8]],
//!  "config": {"k": 5, "ratio": 0.9}}
//! ```
//!
//! `positives` / `negatives` hold click coordinates (`points`), polylines
//! (`scribble`, `[[[x, y], ...], ...]`) or a mask reference (`mask`,
//! `sam_based`): `{"stack_index": 3}`, `{"file": "m.gsten"}` or
//! `{"inline": {"width": 64, "height": 64, "bits": "<base64>"}}`.

mod kmeans;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bits;
use crate::distill::FeatureGrid;
use crate::error::{argument_error, Result};
use crate::masks::{Mask, MaskStack};
use crate::scene::Camera;
use crate::splat::FeatureMap;
use crate::tensor::Tensor;

pub use kmeans::kmeans;

pub const DEFAULT_CLUSTERS: usize = 5;
pub const DEFAULT_ACCEPT_RATIO: f64 = 0.9;
pub const KMEANS_MAX_ITER: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Points,
    Scribble,
    Mask,
    SamBased,
}

impl PromptKind {
    /// Whether the prompt carries a 2D mask usable for mask projection.
    pub fn has_mask(self) -> bool {
        matches!(self, PromptKind::Mask | PromptKind::SamBased)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// K-means cluster count.
    pub k: usize,
    /// Overlap needed to accept the pooled guidance query.
    pub ratio: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            k: DEFAULT_CLUSTERS,
            ratio: DEFAULT_ACCEPT_RATIO,
            max_iter: KMEANS_MAX_ITER,
            seed: 0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(argument_error!("config.k: must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(argument_error!("config.ratio: must lie in [0, 1], got {}", self.ratio));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Region {
    Points(Vec<[f64; 2]>),
    Strokes(Vec<Vec<[f64; 2]>>),
    Mask(MaskRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskRef {
    /// GSTEN u8 tensor `[H, W]` or `[1, H, W]`; relative paths resolve
    /// against the prompt's base directory.
    File(PathBuf),
    /// Index into the view's mask stack.
    StackIndex(usize),
    Inline(InlineMask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineMask {
    pub width: usize,
    pub height: usize,
    /// Row-major bitset, LSB first, base64.
    pub bits: String,
}

impl InlineMask {
    pub fn from_mask(mask: &Mask) -> Self {
        InlineMask {
            width: mask.width,
            height: mask.height,
            bits: bits::encode(&mask.bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub view: String,
    pub kind: PromptKind,
    pub positives: Region,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negatives: Option<Region>,
    #[serde(default)]
    pub config: PromptConfig,
}

impl Prompt {
    /// Parses prompt JSON; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let prompt: Prompt = serde_path_to_error::deserialize(de)
            .map_err(|e| argument_error!("prompt.{}: {}", e.path(), e.inner()))?;
        prompt.config.validate()?;
        Ok(prompt)
    }

    pub fn points(view: impl Into<String>, positives: &[[f64; 2]], negatives: &[[f64; 2]]) -> Self {
        Prompt {
            id: None,
            view: view.into(),
            kind: PromptKind::Points,
            positives: Region::Points(positives.to_vec()),
            negatives: (!negatives.is_empty()).then(|| Region::Points(negatives.to_vec())),
            config: PromptConfig::default(),
        }
    }

    pub fn mask(view: impl Into<String>, kind: PromptKind, mask: &Mask) -> Self {
        Prompt {
            id: None,
            view: view.into(),
            kind,
            positives: Region::Mask(MaskRef::Inline(InlineMask::from_mask(mask))),
            negatives: None,
            config: PromptConfig::default(),
        }
    }
}

/// A prompt with every region turned into pixel indices of its view.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPrompt {
    pub id: String,
    pub view: String,
    pub kind: PromptKind,
    pub width: usize,
    pub height: usize,
    /// Clicked pixels in click order for `points`, otherwise the ascending
    /// covered pixel set.
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub config: PromptConfig,
}

impl ResolvedPrompt {
    pub fn positive_mask(&self) -> Mask {
        let mut m = Mask::empty(self.width, self.height);
        for &p in &self.positive {
            m.bits[p] = true;
        }
        m
    }
}

struct Resolver<'a> {
    width: usize,
    height: usize,
    stack: Option<&'a MaskStack>,
    base_dir: Option<&'a Path>,
}

impl Resolver<'_> {
    fn pixel(&self, field: &str, xy: [f64; 2]) -> Result<usize> {
        let [x, y] = xy;
        if !(x.is_finite() && y.is_finite())
            || x < 0.0
            || y < 0.0
            || x >= self.width as f64
            || y >= self.height as f64
        {
            return Err(argument_error!(
                "{}: pixel ({}, {}) outside the {}x{} view",
                field,
                x,
                y,
                self.width,
                self.height
            ));
        }
        Ok(y as usize * self.width + x as usize)
    }

    fn strokes(&self, field: &str, strokes: &[Vec<[f64; 2]>]) -> Result<Vec<usize>> {
        let mut m = Mask::empty(self.width, self.height);
        for (s, stroke) in strokes.iter().enumerate() {
            let pts = stroke
                .iter()
                .enumerate()
                .map(|(i, &xy)| self.pixel(&format!("{}[{}][{}]", field, s, i), xy))
                .collect::<Result<Vec<_>>>()?;
            rasterize_stroke(&mut m, &pts);
        }
        Ok(m.pixels())
    }

    fn mask(&self, field: &str, r: &MaskRef) -> Result<Vec<usize>> {
        let mask = match r {
            MaskRef::StackIndex(i) => self
                .stack
                .and_then(|s| s.masks().get(*i))
                .cloned()
                .ok_or_else(|| argument_error!("{}.stack_index: no mask {} for this view", field, i))?,
            MaskRef::Inline(m) => Mask::new(m.width, m.height, bits::decode(&m.bits, m.width * m.height)?)
                .map_err(|e| argument_error!("{}.inline: {}", field, e))?,
            MaskRef::File(path) => {
                let path = match self.base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                let t = Tensor::load(&path)?;
                let (h, w) = match t.dims.as_slice() {
                    [h, w] | [1, h, w] => (*h, *w),
                    d => return Err(argument_error!("{}.file: expected [H, W] mask, found {:?}", field, d)),
                };
                let bits = match t.as_u8() {
                    Ok(bytes) => bytes.iter().map(|&v| v != 0).collect(),
                    Err(_) => t.to_f64()?.iter().map(|&v| v != 0.0).collect(),
                };
                Mask::new(w, h, bits)?
            }
        };
        if mask.width != self.width || mask.height != self.height {
            return Err(argument_error!(
                "{}: mask is {}x{}, view is {}x{}",
                field,
                mask.width,
                mask.height,
                self.width,
                self.height
            ));
        }
        Ok(mask.pixels())
    }

    fn region(&self, field: &str, kind: PromptKind, region: &Region) -> Result<Vec<usize>> {
        match (kind, region) {
            (PromptKind::Points, Region::Points(pts)) => pts
                .iter()
                .enumerate()
                .map(|(i, &xy)| self.pixel(&format!("{}[{}]", field, i), xy))
                .collect(),
            (PromptKind::Scribble, Region::Points(pts)) => self.strokes(field, &[pts.clone()]),
            (PromptKind::Scribble, Region::Strokes(strokes)) => self.strokes(field, strokes),
            (k, Region::Points(pts)) if k.has_mask() => {
                let mut px = pts
                    .iter()
                    .enumerate()
                    .map(|(i, &xy)| self.pixel(&format!("{}[{}]", field, i), xy))
                    .collect::<Result<Vec<_>>>()?;
                px.sort_unstable();
                px.dedup();
                Ok(px)
            }
            (k, Region::Strokes(strokes)) if k.has_mask() => self.strokes(field, strokes),
            (k, Region::Mask(r)) if k.has_mask() => self.mask(field, r),
            (k, _) => Err(argument_error!("{}: region shape does not fit a {:?} prompt", field, k)),
        }
    }
}

/// Resolves `prompt` against the camera of its view. `stack` backs
/// `stack_index` references, `base_dir` relative mask files.
pub fn resolve(
    prompt: &Prompt,
    camera: &Camera,
    stack: Option<&MaskStack>,
    base_dir: Option<&Path>,
) -> Result<ResolvedPrompt> {
    if prompt.view != camera.id {
        return Err(argument_error!("view: prompt targets {}, camera is {}", prompt.view, camera.id));
    }
    prompt.config.validate()?;
    let r = Resolver {
        width: camera.width,
        height: camera.height,
        stack,
        base_dir,
    };
    let positive = r.region("positives", prompt.kind, &prompt.positives)?;
    if positive.is_empty() {
        return Err(argument_error!("positives: at least one positive element is required"));
    }
    let negative = match &prompt.negatives {
        Some(n) => r.region("negatives", prompt.kind, n)?,
        None => Vec::new(),
    };
    Ok(ResolvedPrompt {
        id: prompt.id.clone().unwrap_or_default(),
        view: prompt.view.clone(),
        kind: prompt.kind,
        width: camera.width,
        height: camera.height,
        positive,
        negative,
        config: prompt.config.clone(),
    })
}

/// Draws 1-px Bresenham segments through `points` (pixel indices), dilated
/// by one pixel in every direction.
pub fn rasterize_stroke(mask: &mut Mask, points: &[usize]) {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let xy = |p: usize| ((p % mask.width) as i64, (p / mask.width) as i64);
    let mut line = Vec::new();
    match points {
        [] => return,
        [p] => line.push(xy(*p)),
        _ => {
            for seg in points.windows(2) {
                let ((mut x0, mut y0), (x1, y1)) = (xy(seg[0]), xy(seg[1]));
                let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
                let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
                let mut err = dx + dy;
                loop {
                    line.push((x0, y0));
                    if x0 == x1 && y0 == y1 {
                        break;
                    }
                    let e2 = 2 * err;
                    if e2 >= dy {
                        err += dy;
                        x0 += sx;
                    }
                    if e2 <= dx {
                        err += dx;
                        y0 += sy;
                    }
                }
            }
        }
    }
    for (x, y) in line {
        for ny in (y - 1).max(0)..=(y + 1).min(h - 1) {
            for nx in (x - 1).max(0)..=(x + 1).min(w - 1) {
                mask.set(nx as usize, ny as usize, true);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
    pub metric: Metric,
}

impl QuerySet {
    pub fn dim(&self) -> usize {
        self.positive.first().map_or(0, Vec::len)
    }
}

fn check_rendered(rendered: &FeatureMap, prompt: &ResolvedPrompt) -> Result<()> {
    if rendered.width != prompt.width || rendered.height != prompt.height {
        return Err(argument_error!(
            "rendered map is {}x{}, prompt view is {}x{}",
            rendered.width,
            rendered.height,
            prompt.width,
            prompt.height
        ));
    }
    Ok(())
}

/// One query per clicked pixel: the rendered feature under it.
pub fn point_queries(rendered: &FeatureMap, prompt: &ResolvedPrompt) -> Result<QuerySet> {
    if prompt.kind != PromptKind::Points {
        return Err(argument_error!("point queries need a points prompt, got {:?}", prompt.kind));
    }
    check_rendered(rendered, prompt)?;
    Ok(QuerySet {
        positive: prompt.positive.iter().map(|&p| rendered.pixel(p).to_vec()).collect(),
        negative: prompt.negative.iter().map(|&p| rendered.pixel(p).to_vec()).collect(),
        metric: Metric::Cosine,
    })
}

fn cluster_pixels(rendered: &FeatureMap, pixels: &[usize], cfg: &PromptConfig) -> Result<Vec<Vec<f64>>> {
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let data: Vec<f64> = sorted.iter().flat_map(|&p| rendered.pixel(p).iter().copied()).collect();
    kmeans(&data, rendered.dim, cfg.k, cfg.max_iter, KMEANS_TOL, cfg.seed)
}

/// K-means centroids of the rendered features over the positive (and,
/// separately, the negative) region.
pub fn kmeans_queries(rendered: &FeatureMap, prompt: &ResolvedPrompt) -> Result<QuerySet> {
    check_rendered(rendered, prompt)?;
    if prompt.positive.is_empty() {
        return Err(argument_error!("positives: empty region"));
    }
    let negative = if prompt.negative.is_empty() {
        Vec::new()
    } else {
        cluster_pixels(rendered, &prompt.negative, &prompt.config)?
    };
    Ok(QuerySet {
        positive: cluster_pixels(rendered, &prompt.positive, &prompt.config)?,
        negative,
        metric: Metric::Cosine,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamQueries {
    pub queries: QuerySet,
    /// `|M_temp ∩ M_ref| / |M_ref|`.
    pub overlap: f64,
    /// True when the pooled query was kept, false on the K-means fallback.
    pub accepted: bool,
}

/// Grid cells covered by `mask`: cell-center sampling, or, for masks too
/// thin to cover any center, every cell holding a mask pixel.
pub fn mask_cells(grid: &FeatureGrid, mask: &Mask) -> Vec<usize> {
    let cells: Vec<usize> = mask
        .downsample(grid.width, grid.height)
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(c, _)| c)
        .collect();
    if !cells.is_empty() {
        return cells;
    }
    let mut cells: Vec<usize> = mask
        .pixels()
        .into_iter()
        .map(|p| {
            let (x, y) = (p % mask.width, p / mask.width);
            let u = (x * grid.width / mask.width).min(grid.width - 1);
            let v = (y * grid.height / mask.height).min(grid.height - 1);
            v * grid.width + u
        })
        .collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Queries from projected guidance features: the pooled mask query when
/// its decision region covers at least `cfg.ratio` of `m_ref`, otherwise
/// K-means centroids of the projected cells inside `m_ref`.
pub fn sam_based_queries(
    grid: &FeatureGrid,
    rendered: &FeatureMap,
    m_ref: &Mask,
    cfg: &PromptConfig,
) -> Result<SamQueries> {
    cfg.validate()?;
    if m_ref.is_empty() {
        return Err(argument_error!("positives: reference mask is empty"));
    }
    if rendered.width != m_ref.width || rendered.height != m_ref.height {
        return Err(argument_error!("reference mask and rendered map differ in size"));
    }
    if grid.dim != rendered.dim {
        return Err(argument_error!(
            "projected guidance has {} channels, rendered features {}",
            grid.dim,
            rendered.dim
        ));
    }
    let cells = mask_cells(grid, m_ref);
    let mut query = vec![0.0; grid.dim];
    for &c in &cells {
        for (q, v) in query.iter_mut().zip(grid.cell(c)) {
            *q += v;
        }
    }
    query.iter_mut().for_each(|q| *q /= cells.len() as f64);

    let ref_pixels = m_ref.pixels();
    let hits = ref_pixels
        .iter()
        .filter(|&&p| rendered.pixel(p).iter().zip(&query).map(|(a, b)| a * b).sum::<f64>() >= 0.0)
        .count();
    let overlap = hits as f64 / ref_pixels.len() as f64;
    if overlap >= cfg.ratio {
        return Ok(SamQueries {
            queries: QuerySet {
                positive: vec![query],
                negative: Vec::new(),
                metric: Metric::Dot,
            },
            overlap,
            accepted: true,
        });
    }
    let data: Vec<f64> = cells.iter().flat_map(|&c| grid.cell(c).iter().copied()).collect();
    Ok(SamQueries {
        queries: QuerySet {
            positive: kmeans(&data, grid.dim, cfg.k, cfg.max_iter, KMEANS_TOL, cfg.seed)?,
            negative: Vec::new(),
            metric: Metric::Dot,
        },
        overlap,
        accepted: false,
    })
}

#[cfg(test)]
mod tests;
