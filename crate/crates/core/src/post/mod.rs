//! Spatial clean-up of raw segmentations: statistical outlier removal,
//! mask-seeded region growing and ball-query growing.

mod kdtree;

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{argument_error, Result};
use crate::masks::Mask;
use crate::matching::{Segmentation, Stage};
use crate::prompt::PromptKind;
use crate::scene::{Camera, GaussianCloud};
use crate::splat::{project, BlendTrace, MIN_ALPHA};

pub use kdtree::KdTree;

/// Relative slack on the statistical cutoff so means that differ only by
/// rounding are treated as equal.
pub const TIE_TOLERANCE: f64 = 1e-9;

fn check_len(cloud: &GaussianCloud, seg: &Segmentation) -> Result<()> {
    if seg.len() != cloud.len() {
        return Err(argument_error!(
            "segmentation covers {} Gaussians, cloud has {}",
            seg.len(),
            cloud.len()
        ));
    }
    Ok(())
}

/// Distance from each listed point to its nearest other point in `tree`.
fn nearest_distances(cloud: &GaussianCloud, tree: &KdTree, points: &[usize]) -> Vec<f64> {
    points
        .par_iter()
        .map(|&i| tree.nearest(&cloud.positions[i], Some(i)).map_or(0.0, |(_, d2)| d2.sqrt()))
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Drops members whose mean distance to their `round(sqrt(n))` nearest
/// fellow members exceeds the mean of those distances by more than one
/// standard deviation.
pub fn statistical_filter(cloud: &GaussianCloud, seg: &Segmentation) -> Result<Segmentation> {
    check_len(cloud, seg)?;
    let members = seg.members();
    let n = members.len();
    if n < 2 {
        log::warn!("statistical filter needs two members, found {}; skipped", n);
        return Ok(seg.with_membership(seg.membership.clone(), Stage::Filtered));
    }
    let k = ((n as f64).sqrt().round() as usize).max(1).min(n - 1);
    let tree = KdTree::build(&cloud.positions, members.iter().copied());
    let means: Vec<f64> = members
        .par_iter()
        .map(|&i| {
            let nn = tree.knn(&cloud.positions[i], k, Some(i));
            nn.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / nn.len() as f64
        })
        .collect();
    let (mu, sigma) = mean_std(&means);
    let cutoff = mu + sigma + TIE_TOLERANCE * mu;
    let mut membership = seg.membership.clone();
    for (&i, &m) in members.iter().zip(&means) {
        if m > cutoff {
            membership[i] = false;
        }
    }
    Ok(seg.with_membership(membership, Stage::Filtered))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProjection {
    /// Members whose projected center is visible inside the mask.
    pub validated: Vec<bool>,
    /// Gaussians whose projected center is visible outside the mask.
    pub unwanted: Vec<bool>,
}

/// Splits Gaussians by where their projected centers land in `mask`.
///
/// A center counts as visible when its Gaussian's blend weight at the
/// pixel under it is at least `MIN_ALPHA` in `trace`, the full-cloud
/// raster of `camera`.
pub fn project_mask_to_gaussians(
    cloud: &GaussianCloud,
    camera: &Camera,
    trace: &BlendTrace,
    mask: &Mask,
    seg: &Segmentation,
) -> Result<MaskProjection> {
    check_len(cloud, seg)?;
    if mask.width != camera.width || mask.height != camera.height {
        return Err(argument_error!(
            "mask is {}x{}, camera {} is {}x{}",
            mask.width,
            mask.height,
            camera.id,
            camera.width,
            camera.height
        ));
    }
    if trace.width != camera.width || trace.height != camera.height || trace.num_gaussians != cloud.len() {
        return Err(argument_error!("blend trace does not belong to camera {}", camera.id));
    }
    let mut validated = vec![false; cloud.len()];
    let mut unwanted = vec![false; cloud.len()];
    for proj in project(cloud, camera) {
        let (x, y) = (proj.mean2d.x.floor(), proj.mean2d.y.floor());
        if x < 0.0 || y < 0.0 || x >= camera.width as f64 || y >= camera.height as f64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        let g = proj.gaussian_index;
        if trace.weight_of(y * camera.width + x, g) < MIN_ALPHA {
            continue;
        }
        if mask.get(x, y) {
            validated[g] = seg.membership[g];
        } else {
            unwanted[g] = true;
        }
    }
    if !validated.iter().any(|&v| v) {
        return Err(argument_error!(
            "mask covers no visible member Gaussian in view {}; prompt and scene disagree",
            camera.id
        ));
    }
    Ok(MaskProjection {
        validated,
        unwanted,
    })
}

/// Growth distance for region growing: the largest nearest-neighbor
/// distance inside the seed set, or with a single seed the mean
/// nearest-neighbor distance over all members.
pub fn growth_distance(cloud: &GaussianCloud, seg: &Segmentation, seeds: &[bool]) -> f64 {
    let seed_ids: Vec<usize> = (0..seeds.len()).filter(|&i| seeds[i]).collect();
    if seed_ids.len() >= 2 {
        let tree = KdTree::build(&cloud.positions, seed_ids.iter().copied());
        return nearest_distances(cloud, &tree, &seed_ids).into_iter().fold(0.0, f64::max);
    }
    let members = seg.members();
    if members.len() < 2 {
        return 0.0;
    }
    let tree = KdTree::build(&cloud.positions, members.iter().copied());
    mean_std(&nearest_distances(cloud, &tree, &members)).0
}

/// Breadth-first growth from `seeds` over members not marked `unwanted`,
/// linking Gaussians at most the growth distance apart.
pub fn region_grow_filter(
    cloud: &GaussianCloud,
    seg: &Segmentation,
    seeds: &[bool],
    unwanted: &[bool],
) -> Result<Segmentation> {
    check_len(cloud, seg)?;
    if seeds.len() != cloud.len() || unwanted.len() != cloud.len() {
        return Err(argument_error!("seed and exclusion sets must cover every Gaussian"));
    }
    if !seeds.iter().any(|&s| s) {
        return Err(argument_error!("region growing needs at least one seed"));
    }
    if seeds.iter().zip(&seg.membership).any(|(&s, &m)| s && !m) {
        return Err(argument_error!("seeds must be members of the segmentation"));
    }
    let t = growth_distance(cloud, seg, seeds);
    let universe: Vec<usize> = (0..cloud.len())
        .filter(|&i| seeds[i] || (seg.membership[i] && !unwanted[i]))
        .collect();
    let tree = KdTree::build(&cloud.positions, universe.iter().copied());
    let mut reached = seeds.to_vec();
    let mut queue: VecDeque<usize> = (0..seeds.len()).filter(|&i| seeds[i]).collect();
    while let Some(i) = queue.pop_front() {
        for j in tree.within(&cloud.positions[i], t) {
            if !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    Ok(seg.with_membership(reached, Stage::Filtered))
}

/// Adds every Gaussian within `r` of a member, where `r` is the largest
/// nearest-neighbor distance among members. One pass, no iteration.
pub fn ball_grow(cloud: &GaussianCloud, seg: &Segmentation, all: Option<&KdTree>) -> Result<Segmentation> {
    check_len(cloud, seg)?;
    let members = seg.members();
    if members.len() < 2 {
        log::warn!("ball growing needs two members, found {}; skipped", members.len());
        return Ok(seg.with_membership(seg.membership.clone(), Stage::Grown));
    }
    let member_tree = KdTree::build(&cloud.positions, members.iter().copied());
    let r = nearest_distances(cloud, &member_tree, &members).into_iter().fold(0.0, f64::max);
    let owned;
    let tree = match all {
        Some(t) => t,
        None => {
            owned = KdTree::over_all(&cloud.positions);
            &owned
        }
    };
    let found: Vec<Vec<usize>> = members
        .par_iter()
        .map(|&i| tree.within(&cloud.positions[i], r))
        .collect();
    let mut membership = seg.membership.clone();
    for j in found.into_iter().flatten() {
        membership[j] = true;
    }
    Ok(seg.with_membership(membership, Stage::Grown))
}

/// The 2D evidence a mask-carrying prompt hands to post-processing.
pub struct MaskContext<'a> {
    pub camera: &'a Camera,
    pub trace: &'a BlendTrace,
    pub mask: &'a Mask,
}

#[derive(Debug, Clone)]
pub struct PostOutput {
    pub filtered: Segmentation,
    pub grown: Segmentation,
    pub filtering: Duration,
    pub growing: Duration,
}

/// The filter that belongs to a prompt kind: statistical for points and
/// scribbles, mask-seeded region growing for mask and guidance prompts.
pub fn filter_stage(
    cloud: &GaussianCloud,
    seg: &Segmentation,
    kind: PromptKind,
    mask: Option<MaskContext>,
) -> Result<Segmentation> {
    check_len(cloud, seg)?;
    if seg.count() == 0 {
        return Err(argument_error!("raw segmentation is empty"));
    }
    match (kind.has_mask(), mask) {
        (false, None) => statistical_filter(cloud, seg),
        (true, Some(ctx)) => {
            let proj = project_mask_to_gaussians(cloud, ctx.camera, ctx.trace, ctx.mask, seg)?;
            region_grow_filter(cloud, seg, &proj.validated, &proj.unwanted)
        }
        (true, None) => Err(argument_error!("{:?} prompt needs its mask and camera", kind)),
        (false, Some(_)) => Err(argument_error!("{:?} prompt carries no mask", kind)),
    }
}

/// Filtering then ball growing.
pub fn postprocess(
    cloud: &GaussianCloud,
    seg: &Segmentation,
    kind: PromptKind,
    mask: Option<MaskContext>,
    all: Option<&KdTree>,
) -> Result<PostOutput> {
    let start = Instant::now();
    let filtered = filter_stage(cloud, seg, kind, mask)?;
    let filtering = start.elapsed();
    let start = Instant::now();
    let grown = ball_grow(cloud, &filtered, all)?;
    Ok(PostOutput {
        filtered,
        grown,
        filtering,
        growing: start.elapsed(),
    })
}

#[cfg(test)]
mod tests;
