//! CPU splatting: projection of 3D Gaussians, per-pixel alpha blending of
//! colors or features, and the gradient of rendered features with respect to
//! the per-Gaussian feature vectors.

mod raster;

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::scene::{Camera, GaussianCloud};

pub use raster::{
    backward_features, feature_map_from_trace, rasterize, rasterize_subset, render_color,
    render_features, BlendTrace,
    FeatureMap,
};

/// Gaussians closer than this (camera-space z) are culled.
pub const NEAR_PLANE: f64 = 0.2;
/// Added to the diagonal of every projected covariance (pixel²).
pub const LOW_PASS: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
/// Contributions with a smaller alpha are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub gaussian_index: usize,
    /// Pixel radius beyond which the splat's alpha is below [`MIN_ALPHA`].
    pub radius: f64,
}

impl Projected2D {
    fn max_eigenvalue(cov: &Matrix2<f64>) -> f64 {
        let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        mid + (mid * mid - det).max(0.0).sqrt()
    }

    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` clipped to the image, or
    /// `None` when the splat touches no pixel center.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if self.radius <= 0.0 {
            return None;
        }
        // pixel (px, py) is sampled at (px + 0.5, py + 0.5)
        let x0 = (self.mean2d.x - self.radius - 0.5).ceil().max(0.0);
        let y0 = (self.mean2d.y - self.radius - 0.5).ceil().max(0.0);
        let x1 = (self.mean2d.x + self.radius - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (self.mean2d.y + self.radius - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// Projects every Gaussian through `camera` with the EWA local-affine
/// approximation, culls those behind the near plane or outside the frustum by
/// more than three standard deviations, and returns the rest sorted front to
/// back (ties by index).
pub fn project(cloud: &GaussianCloud, camera: &Camera) -> Vec<Projected2D> {
    let rot = camera.rotation();
    let trans = camera.translation();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut out: Vec<Projected2D> = (0..cloud.len())
        .filter_map(|i| {
            let p = rot * cloud.positions[i] + trans;
            if p.z <= NEAR_PLANE {
                return None;
            }
            let mean2d = Vector2::new(
                camera.fx * p.x / p.z + camera.cx,
                camera.fy * p.y / p.z + camera.cy,
            );
            let z2 = p.z * p.z;
            let jac = Matrix2x3::new(
                camera.fx / p.z,
                0.0,
                -camera.fx * p.x / z2,
                0.0,
                camera.fy / p.z,
                -camera.fy * p.y / z2,
            );
            let m = jac * rot;
            let mut cov2d = m * cloud.covariance(i) * m.transpose();
            cov2d[(0, 0)] += LOW_PASS;
            cov2d[(1, 1)] += LOW_PASS;
            // exact symmetry
            let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
            cov2d[(0, 1)] = off;
            cov2d[(1, 0)] = off;
            let conic = cov2d.try_inverse()?;

            let sigma = Projected2D::max_eigenvalue(&cov2d).sqrt();
            let reach = 3.0 * sigma;
            if mean2d.x + reach < 0.0
                || mean2d.x - reach > w
                || mean2d.y + reach < 0.0
                || mean2d.y - reach > h
            {
                return None;
            }
            let peak = cloud.opacities[i].min(MAX_ALPHA);
            let radius = if peak < MIN_ALPHA {
                0.0
            } else {
                (2.0 * (peak / MIN_ALPHA).ln()).sqrt() * sigma
            };
            Some(Projected2D {
                mean2d,
                cov2d,
                conic,
                depth: p.z,
                gaussian_index: i,
                radius,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    out
}

/// Opacity-scaled 2D Gaussian falloff at `pixel`, clamped to [`MAX_ALPHA`].
pub fn alpha_at(proj: &Projected2D, opacity: f64, pixel: Vector2<f64>) -> f64 {
    let d = pixel - proj.mean2d;
    let power = -0.5 * (d.transpose() * proj.conic * d)[(0, 0)];
    (opacity * power.exp()).min(MAX_ALPHA)
}
