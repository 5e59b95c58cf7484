use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    gaussian_label_iou, mask_iou, pixel_acc, render_membership_mask, visible_membership_mask, EvalReport,
    ObjectScore, StageCounts, TimeBreakdown, ViewScore,
};
use crate::error::{argument_error, Error, Result};
use crate::distill::label_sidecar;
use crate::masks::Mask;
use crate::pipeline::{segment, Scene};
use crate::prompt::{Prompt, PromptKind};
use crate::scene::{synth_scene, SceneSpec, DEFAULT_FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One positive click per object plus one negative click on every other
    /// object visible in the same view, scored by Gaussian-level label IoU.
    Labels3d,
    /// One mask prompt per object, rendered into the held-out views.
    Propagate,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labels3d" => Ok(Protocol::Labels3d),
            "propagate" => Ok(Protocol::Propagate),
            other => Err(argument_error!("protocol: expected labels3d or propagate, got {}", other)),
        }
    }
}

/// The pixel of `mask` farthest (8-connected steps) from any uncovered
/// pixel or the image border; lowest index on ties.
pub fn interior_pixel(mask: &Mask) -> Option<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut dist = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if !mask.bits[p] {
                dist[p] = 0;
                queue.push_back(p);
            } else if border {
                dist[p] = 1;
                queue.push_back(p);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if dist[q] == usize::MAX {
                    dist[q] = dist[p] + 1;
                    queue.push_back(q);
                }
            }
        }
    }
    (0..w * h)
        .filter(|&p| mask.bits[p])
        .max_by(|&a, &b| dist[a].cmp(&dist[b]).then(b.cmp(&a)))
        .map(|p| (p % w, p / w))
}

fn interior_depth(mask: &Mask) -> usize {
    let Some((x, y)) = interior_pixel(mask) else {
        return 0;
    };
    // Chebyshev distance to the nearest uncovered pixel or border
    let mut r = 0;
    loop {
        r += 1;
        let (x0, y0) = (x as i64 - r, y as i64 - r);
        let (x1, y1) = (x as i64 + r, y as i64 + r);
        if x0 < 0 || y0 < 0 || x1 >= mask.width as i64 || y1 >= mask.height as i64 {
            return r as usize;
        }
        let ring_clear = (y0..=y1).all(|yy| (x0..=x1).all(|xx| mask.get(xx as usize, yy as usize)));
        if !ring_clear {
            return r as usize;
        }
    }
}

struct ObjectRun {
    score: ObjectScore,
    membership: Vec<bool>,
}

fn run_object(scene: &Scene, label: u32, prompt: Prompt) -> Result<ObjectRun> {
    let labels = scene.labels.as_ref().expect("checked by caller");
    let view = prompt.view.clone();
    let out = segment(scene, &prompt).map_err(|e| e.error)?;
    Ok(ObjectRun {
        score: ObjectScore {
            label,
            prompt_view: view,
            label_iou: gaussian_label_iou(&out.grown.membership, labels, label)?,
            raw_label_iou: gaussian_label_iou(&out.raw.membership, labels, label)?,
            counts: StageCounts {
                raw: out.raw.count(),
                filtered: out.filtered.count(),
                grown: out.grown.count(),
            },
            timing: out.timing,
        },
        membership: out.grown.membership,
    })
}

/// Occlusion-aware ground-truth masks of `label` in every training view.
fn visible_masks(scene: &Scene, membership: &[bool]) -> Result<Vec<(String, Mask)>> {
    scene
        .cameras
        .iter()
        .map(|c| Ok((c.id.clone(), visible_membership_mask(&*scene.trace(&c.id)?, membership))))
        .collect()
}

/// The benchmark point prompt for `label`: a positive click at the most
/// interior pixel of the training view where the object's visible mask is
/// deepest, and a negative click inside every other object visible there.
/// `None` when the object is visible in no training view.
pub fn object_point_prompt(scene: &Scene, label: u32) -> Result<Option<Prompt>> {
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::State(format!("scene {} has no ground-truth labels", scene.name)))?;
    let masks = visible_masks(scene, &labels.membership(label))?;
    let best = masks
        .iter()
        .map(|(v, m)| (interior_depth(m), v, m))
        .fold(None, |acc: Option<(usize, &String, &Mask)>, cur| match acc {
            Some(a) if a.0 >= cur.0 => Some(a),
            _ => Some(cur),
        });
    let Some((depth, view, mask)) = best.filter(|b| b.0 > 0) else {
        return Ok(None);
    };
    let (x, y) = interior_pixel(mask).expect("non-empty mask");
    log::debug!("object {}: click ({}, {}) in {} at depth {}", label, x, y, view, depth);
    let trace = scene.trace(view)?;
    let negatives: Vec<[f64; 2]> = labels
        .object_labels()
        .into_iter()
        .filter(|&other| other != label)
        .filter_map(|other| {
            let m = visible_membership_mask(&trace, &labels.membership(other));
            interior_pixel(&m).map(|(x, y)| [x as f64, y as f64])
        })
        .collect();
    let mut prompt = Prompt::points(view.clone(), &[[x as f64, y as f64]], &negatives);
    prompt.id = Some(format!("object-{}", label));
    Ok(Some(prompt))
}

/// Synthetic scene of `objects` clusters holding `gaussians` in total, with
/// features derived from the labels instead of training. For latency
/// measurements, where feature quality is not under test.
pub fn latency_scene(gaussians: usize, objects: usize, seed: u64) -> Result<Scene> {
    if objects == 0 || gaussians % objects != 0 {
        return Err(argument_error!(
            "gaussians ({}) must be a positive multiple of objects ({})",
            gaussians,
            objects
        ));
    }
    let s = synth_scene(&SceneSpec::new(objects, gaussians / objects, 10.0, seed))?;
    let sidecar = label_sidecar(&s.labels, DEFAULT_FEATURE_DIM, 0.05, seed)?;
    Scene::new(format!("latency-{}", gaussians), s.cloud, s.cameras, s.held_out)?
        .with_labels(s.labels)?
        .with_sidecar(sidecar)
}

/// Runs a benchmark protocol over every labelled object of a trained scene.
pub fn evaluate(scene: &Scene, protocol: Protocol) -> Result<EvalReport> {
    let labels = scene
        .labels
        .as_ref()
        .ok_or_else(|| Error::State(format!("scene {} has no ground-truth labels", scene.name)))?;
    if protocol == Protocol::Propagate && scene.held_out.is_empty() {
        return Err(Error::State(format!("scene {} has no held-out views", scene.name)));
    }
    let mut objects = Vec::new();
    let mut views = Vec::new();
    for label in labels.object_labels() {
        let truth = labels.membership(label);
        let masks = visible_masks(scene, &truth)?;
        let run = match protocol {
            Protocol::Labels3d => match object_point_prompt(scene, label)? {
                Some(prompt) => run_object(scene, label, prompt),
                None => {
                    log::warn!("object {} is not visible in any training view", label);
                    continue;
                }
            },
            Protocol::Propagate => {
                let best = masks
                    .iter()
                    .fold(None, |acc: Option<&(String, Mask)>, cur| match acc {
                        Some(a) if a.1.count() >= cur.1.count() => Some(a),
                        _ => Some(cur),
                    });
                let Some((view, mask)) = best.filter(|b| !b.1.is_empty()) else {
                    log::warn!("object {} is not visible in any training view", label);
                    continue;
                };
                let mut prompt = Prompt::mask(view.clone(), PromptKind::Mask, mask);
                prompt.id = Some(format!("object-{}", label));
                run_object(scene, label, prompt)
            }
        };
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                log::warn!("object {}: segmentation failed: {}", label, e);
                ObjectRun {
                    score: ObjectScore {
                        label,
                        prompt_view: String::new(),
                        label_iou: 0.0,
                        raw_label_iou: 0.0,
                        counts: StageCounts::default(),
                        timing: TimeBreakdown::default(),
                    },
                    membership: vec![false; scene.cloud.len()],
                }
            }
        };
        if protocol == Protocol::Propagate {
            for cam in &scene.held_out {
                let pred = render_membership_mask(&scene.cloud, &run.membership, cam)?;
                let gt = render_membership_mask(&scene.cloud, &truth, cam)?;
                views.push(ViewScore {
                    label,
                    view: cam.id.clone(),
                    iou: mask_iou(&pred, &gt)?,
                    acc: pixel_acc(&pred, &gt)?,
                });
            }
        }
        objects.push(run.score);
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let n = objects.len().max(1) as f64;
    let mean_timing = TimeBreakdown {
        retrieving_ms: objects.iter().map(|o| o.timing.retrieving_ms).sum::<f64>() / n,
        filtering_ms: objects.iter().map(|o| o.timing.filtering_ms).sum::<f64>() / n,
        growing_ms: objects.iter().map(|o| o.timing.growing_ms).sum::<f64>() / n,
        total_ms: objects.iter().map(|o| o.timing.total_ms).sum::<f64>() / n,
    };
    Ok(EvalReport {
        scene: scene.name.clone(),
        protocol,
        num_gaussians: scene.cloud.len(),
        miou: mean(&mut views.iter().map(|v| v.iou)),
        macc: mean(&mut views.iter().map(|v| v.acc)),
        mean_label_iou: mean(&mut objects.iter().map(|o| o.label_iou)).unwrap_or(0.0),
        objects,
        views,
        mean_timing,
    })
}
