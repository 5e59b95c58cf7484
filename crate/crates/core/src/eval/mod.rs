//! Metrics, timing and benchmark protocols.

mod harness;

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{argument_error, Error, Result};
use crate::masks::Mask;
use crate::scene::{Camera, GaussianCloud, GroundTruthLabels};
use crate::splat::{rasterize_subset, BlendTrace};

pub use harness::{evaluate, interior_pixel, latency_scene, object_point_prompt, Protocol};

/// Membership masks are thresholded at this accumulated alpha.
pub const MEMBERSHIP_ALPHA: f64 = 0.5;

fn check_same(pred: &Mask, gt: &Mask) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(argument_error!(
            "masks differ in size: {}x{} vs {}x{}",
            pred.width,
            pred.height,
            gt.width,
            gt.height
        ));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of pixels on which the masks agree.
pub fn pixel_acc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same(pred, gt)?;
    if pred.bits.is_empty() {
        return Ok(1.0);
    }
    let agree = pred.bits.iter().zip(&gt.bits).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.bits.len() as f64)
}

/// Renders only the members and thresholds their accumulated alpha.
pub fn render_membership_mask(cloud: &GaussianCloud, membership: &[bool], camera: &Camera) -> Result<Mask> {
    if membership.len() != cloud.len() {
        return Err(argument_error!(
            "membership covers {} Gaussians, cloud has {}",
            membership.len(),
            cloud.len()
        ));
    }
    let trace = rasterize_subset(cloud, camera, Some(membership));
    Mask::new(
        camera.width,
        camera.height,
        trace.alpha().iter().map(|&a| a >= MEMBERSHIP_ALPHA).collect(),
    )
}

/// Pixels where the members' summed blend weight in a full-scene raster
/// reaches the threshold, so occluded parts are left out.
pub fn visible_membership_mask(trace: &BlendTrace, membership: &[bool]) -> Mask {
    let bits = (0..trace.pixel_count())
        .map(|p| {
            trace
                .contributors(p)
                .filter(|&(g, _)| membership[g])
                .map(|(_, w)| w)
                .sum::<f64>()
                >= MEMBERSHIP_ALPHA
        })
        .collect();
    Mask {
        width: trace.width,
        height: trace.height,
        bits,
    }
}

/// IoU between the member set and the Gaussians carrying `label`.
pub fn gaussian_label_iou(membership: &[bool], labels: &GroundTruthLabels, label: u32) -> Result<f64> {
    if membership.len() != labels.gaussian_labels.len() {
        return Err(argument_error!(
            "membership covers {} Gaussians, labels {}",
            membership.len(),
            labels.gaussian_labels.len()
        ));
    }
    if label == 0 || !labels.object_labels().contains(&label) {
        return Err(argument_error!("unknown object label {}", label));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &l) in membership.iter().zip(&labels.gaussian_labels) {
        let t = l == label;
        inter += (m && t) as usize;
        union += (m || t) as usize;
    }
    Ok(inter as f64 / union as f64)
}

/// Wall-clock split of one segmentation request, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    /// Prompt resolution, query extraction, scoring and selection.
    pub retrieving_ms: f64,
    pub filtering_ms: f64,
    pub growing_ms: f64,
    /// Whole request, at least the sum of the phases.
    pub total_ms: f64,
}

impl TimeBreakdown {
    pub fn from_durations(retrieving: Duration, filtering: Duration, growing: Duration, total: Duration) -> Self {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        TimeBreakdown {
            retrieving_ms: ms(retrieving),
            filtering_ms: ms(filtering),
            growing_ms: ms(growing),
            total_ms: ms(total),
        }
    }

    pub fn phase_sum_ms(&self) -> f64 {
        self.retrieving_ms + self.filtering_ms + self.growing_ms
    }

    /// One line in the style `retrieving 1.2 ms | filtering 3.4 ms | growing 5.6 ms | total 10.3 ms`.
    pub fn summary(&self) -> String {
        format!(
            "retrieving {:.1} ms | filtering {:.1} ms | growing {:.1} ms | total {:.1} ms",
            self.retrieving_ms, self.filtering_ms, self.growing_ms, self.total_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub label: u32,
    pub view: String,
    pub iou: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub label: u32,
    /// View the prompt was placed in.
    pub prompt_view: String,
    pub label_iou: f64,
    pub raw_label_iou: f64,
    pub counts: StageCounts,
    pub timing: TimeBreakdown,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub raw: usize,
    pub filtered: usize,
    pub grown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub protocol: Protocol,
    pub num_gaussians: usize,
    pub objects: Vec<ObjectScore>,
    /// Per held-out view and object (propagation only).
    pub views: Vec<ViewScore>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub mean_label_iou: f64,
    pub mean_timing: TimeBreakdown,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rows `record,label,view,iou,acc`: one per object (`object`, label
    /// IoU) and one per propagated view (`view`, mask IoU and accuracy).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("record,label,view,iou,acc\n");
        for o in &self.objects {
            out.push_str(&format!("object,{},{},{},\n", o.label, o.prompt_view, o.label_iou));
        }
        for v in &self.views {
            out.push_str(&format!("view,{},{},{},{}\n", v.label, v.view, v.iou, v.acc));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = if path.extension().is_some_and(|e| e == "csv") {
            self.to_csv()
        } else {
            self.to_json()?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
