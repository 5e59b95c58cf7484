//! Mask stacks and guidance maps rendered from ground-truth labels, standing
//! in for the output of an offline 2D segmentation model.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GuidanceFeatureMap, Mask, MaskStack};
use crate::error::{argument_error, Result};
use crate::scene::{Camera, GaussianCloud, GroundTruthLabels};
use crate::splat::{rasterize, BlendTrace};

/// Which mask levels to emit besides one mask per visible object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Granularity {
    /// Two half-object part masks per object.
    pub parts: bool,
    /// Union of each object with its nearest neighbor.
    pub coarse: bool,
}

impl Default for Granularity {
    fn default() -> Self {
        Granularity {
            parts: true,
            coarse: false,
        }
    }
}

/// Splits every object in two along its longest extent. Returns a part id
/// per Gaussian: `2 * (label - 1) + side`, or `u32::MAX` for background.
pub fn part_labels(cloud: &GaussianCloud, labels: &GroundTruthLabels) -> Vec<u32> {
    let max = labels.max_label() as usize;
    let mut sum = vec![Vector3::zeros(); max + 1];
    let mut lo = vec![Vector3::repeat(f64::INFINITY); max + 1];
    let mut hi = vec![Vector3::repeat(f64::NEG_INFINITY); max + 1];
    let mut count = vec![0usize; max + 1];
    for (p, &l) in cloud.positions.iter().zip(&labels.gaussian_labels) {
        let l = l as usize;
        sum[l] += p;
        lo[l] = lo[l].inf(p);
        hi[l] = hi[l].sup(p);
        count[l] += 1;
    }
    cloud
        .positions
        .iter()
        .zip(&labels.gaussian_labels)
        .map(|(p, &l)| {
            if l == 0 {
                return u32::MAX;
            }
            let li = l as usize;
            let center = sum[li] / count[li] as f64;
            let axis = (hi[li] - lo[li]).imax();
            2 * (l - 1) + (p[axis] >= center[axis]) as u32
        })
        .collect()
}

struct Dominance {
    /// Winning object label per pixel (0 = background).
    object: Vec<u32>,
    /// Winning part id per pixel, meaningful where `object != 0`.
    part: Vec<u32>,
}

/// Per pixel, the object with the largest summed blend weight, with the
/// residual transmittance competing as background (background wins ties).
fn dominance(trace: &BlendTrace, labels: &[u32], parts: &[u32], max_label: usize) -> Dominance {
    let pixels = trace.pixel_count();
    let mut object = vec![0u32; pixels];
    let mut part = vec![u32::MAX; pixels];
    let mut obj_w = vec![0.0; max_label + 1];
    let mut part_w = vec![0.0; 2 * max_label + 2];
    for p in 0..pixels {
        obj_w.iter_mut().for_each(|w| *w = 0.0);
        part_w.iter_mut().for_each(|w| *w = 0.0);
        for (g, w) in trace.contributors(p) {
            obj_w[labels[g] as usize] += w;
            if parts[g] != u32::MAX {
                part_w[parts[g] as usize] += w;
            }
        }
        let mut best = (0u32, 1.0 - trace.alpha()[p]);
        for (l, &w) in obj_w.iter().enumerate().skip(1) {
            if w > best.1 {
                best = (l as u32, w);
            }
        }
        object[p] = best.0;
        if best.0 != 0 {
            let base = 2 * (best.0 - 1) as usize;
            part[p] = if part_w[base + 1] > part_w[base] {
                base as u32 + 1
            } else {
                base as u32
            };
        }
    }
    Dominance { object, part }
}

fn nearest_object(cloud: &GaussianCloud, labels: &GroundTruthLabels) -> Vec<Option<u32>> {
    let max = labels.max_label() as usize;
    let mut sum = vec![Vector3::zeros(); max + 1];
    let mut count = vec![0usize; max + 1];
    for (p, &l) in cloud.positions.iter().zip(&labels.gaussian_labels) {
        sum[l as usize] += p;
        count[l as usize] += 1;
    }
    let centers: Vec<Option<Vector3<f64>>> = (0..=max)
        .map(|l| (count[l] > 0).then(|| sum[l] / count[l] as f64))
        .collect();
    (0..=max)
        .map(|l| {
            let c = centers[l]?;
            (1..=max)
                .filter(|&o| o != l)
                .filter_map(|o| centers[o].map(|co| (o, (co - c).norm())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(o, _)| o as u32)
        })
        .collect()
}

/// One mask stack per camera: a mask per visible object (pixels where that
/// object's blend weight dominates), then part masks and coarse unions as
/// requested by `granularity`.
pub fn synth_masks(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    labels: &GroundTruthLabels,
    granularity: Granularity,
) -> Result<Vec<MaskStack>> {
    labels.validate(cloud.len())?;
    let max = labels.max_label() as usize;
    let parts = part_labels(cloud, labels);
    let nearest = nearest_object(cloud, labels);
    cameras
        .iter()
        .map(|cam| {
            let trace = rasterize(cloud, cam);
            let dom = dominance(&trace, &labels.gaussian_labels, &parts, max);
            let (w, h) = (cam.width, cam.height);
            let object_masks: Vec<Option<Mask>> = (0..=max as u32)
                .map(|l| {
                    let bits: Vec<bool> = dom.object.iter().map(|&o| o == l && l != 0).collect();
                    bits.iter().any(|&b| b).then(|| Mask {
                        width: w,
                        height: h,
                        bits,
                    })
                })
                .collect();
            let mut masks: Vec<Mask> = object_masks.iter().flatten().cloned().collect();
            if granularity.parts {
                for part in 0..(2 * max) as u32 {
                    let bits: Vec<bool> = dom
                        .part
                        .iter()
                        .zip(&dom.object)
                        .map(|(&p, &o)| o != 0 && p == part)
                        .collect();
                    let mask = Mask {
                        width: w,
                        height: h,
                        bits,
                    };
                    let whole = object_masks[(part / 2 + 1) as usize].as_ref();
                    if !mask.is_empty() && whole != Some(&mask) {
                        masks.push(mask);
                    }
                }
            }
            if granularity.coarse {
                let mut seen = Vec::new();
                for l in 1..=max {
                    let Some(nb) = nearest[l] else { continue };
                    let key = (l.min(nb as usize), l.max(nb as usize));
                    if seen.contains(&key) {
                        continue;
                    }
                    seen.push(key);
                    if let (Some(a), Some(b)) = (&object_masks[key.0], &object_masks[key.1]) {
                        masks.push(a.union(b));
                    }
                }
            }
            MaskStack::new(cam.id.clone(), w, h, masks)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub dim: usize,
    /// Image pixels per grid cell along each axis.
    pub stride: usize,
    /// Standard deviation of per-cell Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            dim: 32,
            stride: 4,
            noise: 0.05,
            seed: 0,
        }
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Guidance grids whose cells carry a view-independent embedding of the
/// dominant object plus half-magnitude part embedding and noise.
pub fn synth_guidance(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    labels: &GroundTruthLabels,
    spec: &GuidanceSpec,
) -> Result<Vec<GuidanceFeatureMap>> {
    if spec.dim == 0 || spec.stride == 0 {
        return Err(argument_error!("guidance dim and stride must be positive"));
    }
    labels.validate(cloud.len())?;
    let max = labels.max_label() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = unit_vector(spec.dim, &mut rng);
    let objects: Vec<Vec<f64>> = (0..max).map(|_| unit_vector(spec.dim, &mut rng)).collect();
    let part_emb: Vec<Vec<f64>> = (0..2 * max)
        .map(|_| unit_vector(spec.dim, &mut rng).into_iter().map(|v| 0.5 * v).collect())
        .collect();
    let parts = part_labels(cloud, labels);

    cameras
        .iter()
        .enumerate()
        .map(|(view, cam)| {
            let trace = rasterize(cloud, cam);
            let dom = dominance(&trace, &labels.gaussian_labels, &parts, max);
            let gw = cam.width.div_ceil(spec.stride);
            let gh = cam.height.div_ceil(spec.stride);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((view as u64 + 1) << 32));
            let mut data = Vec::with_capacity(gw * gh * spec.dim);
            for v in 0..gh {
                let y = (((v as f64 + 0.5) * cam.height as f64 / gh as f64) as usize).min(cam.height - 1);
                for u in 0..gw {
                    let x = (((u as f64 + 0.5) * cam.width as f64 / gw as f64) as usize).min(cam.width - 1);
                    let p = y * cam.width + x;
                    let obj = dom.object[p] as usize;
                    for k in 0..spec.dim {
                        let base = if obj == 0 {
                            background[k]
                        } else {
                            objects[obj - 1][k] + part_emb[dom.part[p] as usize][k]
                        };
                        let n: f64 = StandardNormal.sample(&mut noise_rng);
                        data.push(base + spec.noise * n);
                    }
                }
            }
            let g = GuidanceFeatureMap {
                view_id: cam.id.clone(),
                grid_width: gw,
                grid_height: gh,
                dim: spec.dim,
                data,
                image_width: cam.width,
                image_height: cam.height,
            };
            g.validate()?;
            Ok(g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_scene, SceneSpec};

    #[test]
    fn single_object_gives_single_mask() {
        let s = synth_scene(&SceneSpec::new(1, 300, 5.0, 2)).unwrap();
        let stacks = synth_masks(
            &s.cloud,
            &s.cameras,
            &s.labels,
            Granularity {
                parts: false,
                coarse: false,
            },
        )
        .unwrap();
        assert_eq!(stacks.len(), s.cameras.len());
        for (stack, cam) in stacks.iter().zip(&s.cameras) {
            assert_eq!(stack.len(), 1);
            // coverage equals the pixels where the object outweighs the background
            let trace = rasterize(&s.cloud, cam);
            for p in 0..stack.pixel_count() {
                let a = trace.alpha()[p];
                assert_eq!(stack.masks()[0].bits[p], a > 1.0 - a, "pixel {}", p);
            }
        }
    }

    #[test]
    fn coarse_level_adds_unions() {
        let s = synth_scene(&SceneSpec::new(3, 200, 6.0, 4)).unwrap();
        let g = Granularity {
            parts: false,
            coarse: true,
        };
        for stack in synth_masks(&s.cloud, &s.cameras, &s.labels, g).unwrap() {
            assert!(stack.len() >= 4, "view {} has {} masks", stack.view_id, stack.len());
        }
    }

    #[test]
    fn part_labels_split_each_object() {
        let s = synth_scene(&SceneSpec::new(2, 200, 6.0, 4)).unwrap();
        let parts = part_labels(&s.cloud, &s.labels);
        for id in 0..4 {
            let n = parts.iter().filter(|&&p| p == id).count();
            assert!(n > 50, "part {} has {} Gaussians", id, n);
        }
    }

    #[test]
    fn guidance_shape_and_determinism() {
        let s = synth_scene(&SceneSpec::new(2, 100, 6.0, 4)).unwrap();
        let spec = GuidanceSpec::default();
        let a = synth_guidance(&s.cloud, &s.cameras, &s.labels, &spec).unwrap();
        let b = synth_guidance(&s.cloud, &s.cameras, &s.labels, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].grid_width, 16);
        assert_eq!(a[0].data.len(), 16 * 16 * 32);
    }
}
