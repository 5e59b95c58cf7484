use nalgebra::Vector2;
use rayon::prelude::*;

use super::{alpha_at, project, Projected2D, MIN_ALPHA, MIN_TRANSMITTANCE};
use crate::error::{argument_error, Result};
use crate::scene::{Camera, GaussianCloud};

const TILE: usize = 16;

/// Every blending weight `w_{p,i} = alpha_i * prod_{j<i} (1 - alpha_j)` of one
/// view, stored per pixel (row-major) in front-to-back order.
///
/// Geometry is frozen during feature training, so a trace computed once per
/// view serves every forward and backward pass over that view.
#[derive(Debug, Clone)]
pub struct BlendTrace {
    pub width: usize,
    pub height: usize,
    pub num_gaussians: usize,
    offsets: Vec<usize>,
    gaussians: Vec<u32>,
    weights: Vec<f64>,
    alpha: Vec<f64>,
}

impl BlendTrace {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// `(gaussian, weight)` pairs for one pixel, front to back.
    pub fn contributors(&self, pixel: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[pixel]..self.offsets[pixel + 1];
        self.gaussians[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(&g, &w)| (g as usize, w))
    }

    /// Accumulated alpha `1 - T_final` per pixel.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn weight_of(&self, pixel: usize, gaussian: usize) -> f64 {
        self.contributors(pixel)
            .find(|&(g, _)| g == gaussian)
            .map_or(0.0, |(_, w)| w)
    }

    pub fn entry_count(&self) -> usize {
        self.weights.len()
    }

    /// Blends `values` (row-major `num_gaussians x dim`) into a `pixels x dim` image.
    pub fn render(&self, values: &[f64], dim: usize) -> Vec<f64> {
        assert_eq!(values.len(), self.num_gaussians * dim, "value block shape");
        let mut out = vec![0.0; self.pixel_count() * dim];
        const BLOCK: usize = 256;
        out.par_chunks_mut(dim.max(1) * BLOCK)
            .enumerate()
            .for_each(|(b, block)| {
                for (i, px) in block.chunks_mut(dim.max(1)).enumerate() {
                    for (g, w) in self.contributors(b * BLOCK + i) {
                        let row = &values[g * dim..(g + 1) * dim];
                        for (o, v) in px.iter_mut().zip(row) {
                            *o += w * v;
                        }
                    }
                }
            });
        out
    }

    /// Transposed blend: `grad_i = sum_p w_{p,i} * upstream_p`.
    ///
    /// Pixels are split into a fixed number of chunks whose partial sums are
    /// reduced in chunk order, so the result does not depend on the thread
    /// count.
    pub fn backward(&self, upstream: &[f64], dim: usize) -> Result<Vec<f64>> {
        if upstream.len() != self.pixel_count() * dim {
            return Err(argument_error!(
                "upstream gradient has {} values, expected {} pixels x {}",
                upstream.len(),
                self.pixel_count(),
                dim
            ));
        }
        let n = self.num_gaussians;
        let accumulate = |pixels: std::ops::Range<usize>, grad: &mut [f64]| {
            for p in pixels {
                let up = &upstream[p * dim..(p + 1) * dim];
                if up.iter().all(|&u| u == 0.0) {
                    continue;
                }
                for (g, w) in self.contributors(p) {
                    for (acc, u) in grad[g * dim..(g + 1) * dim].iter_mut().zip(up) {
                        *acc += w * u;
                    }
                }
            }
        };
        const CHUNKS: usize = 4;
        let chunks = CHUNKS;
        if n * dim * chunks > 1 << 22 {
            let mut grad = vec![0.0; n * dim];
            accumulate(0..self.pixel_count(), &mut grad);
            return Ok(grad);
        }
        let step = self.pixel_count().div_ceil(chunks);
        let partials: Vec<Vec<f64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut grad = vec![0.0; n * dim];
                let start = (c * step).min(self.pixel_count());
                let end = ((c + 1) * step).min(self.pixel_count());
                accumulate(start..end, &mut grad);
                grad
            })
            .collect();
        let mut iter = partials.into_iter();
        let mut grad = iter.next().unwrap_or_else(|| vec![0.0; n * dim]);
        for part in iter {
            for (a, b) in grad.iter_mut().zip(part) {
                *a += b;
            }
        }
        Ok(grad)
    }
}

/// Rendered `H x W x C` features plus the accumulated alpha channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

fn blend_tile(
    projections: &[Projected2D],
    candidates: &[usize],
    cloud: &GaussianCloud,
    width: usize,
    x_range: (usize, usize),
    y_range: (usize, usize),
) -> Vec<(usize, Vec<(u32, f64)>, f64)> {
    let mut out = Vec::with_capacity((x_range.1 - x_range.0) * (y_range.1 - y_range.0));
    for y in y_range.0..y_range.1 {
        for x in x_range.0..x_range.1 {
            let center = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut transmittance = 1.0;
            let mut contrib = Vec::new();
            for &k in candidates {
                let proj = &projections[k];
                let d = center - proj.mean2d;
                if d.x.abs() > proj.radius || d.y.abs() > proj.radius {
                    continue;
                }
                let g = proj.gaussian_index;
                let alpha = alpha_at(proj, cloud.opacities[g], center);
                if alpha < MIN_ALPHA {
                    continue;
                }
                contrib.push((g as u32, alpha * transmittance));
                transmittance *= 1.0 - alpha;
                if transmittance < MIN_TRANSMITTANCE {
                    break;
                }
            }
            out.push((y * width + x, contrib, 1.0 - transmittance));
        }
    }
    out
}

/// Rasterizes the Gaussians of `cloud` selected by `include` (all when
/// `None`) and records every blend weight.
pub fn rasterize_subset(cloud: &GaussianCloud, camera: &Camera, include: Option<&[bool]>) -> BlendTrace {
    let mut projections = project(cloud, camera);
    if let Some(mask) = include {
        projections.retain(|p| mask[p.gaussian_index]);
    }
    let (width, height) = (camera.width, camera.height);
    let bounds: Vec<Option<(usize, usize, usize, usize)>> = projections
        .iter()
        .map(|p| p.pixel_bounds(width, height))
        .collect();

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let tile_results: Vec<Vec<(usize, Vec<(u32, f64)>, f64)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let xr = (tx * TILE, ((tx + 1) * TILE).min(width));
            let yr = (ty * TILE, ((ty + 1) * TILE).min(height));
            // depth order is preserved because `projections` is sorted
            let candidates: Vec<usize> = bounds
                .iter()
                .enumerate()
                .filter_map(|(k, b)| {
                    let (x0, y0, x1, y1) = (*b)?;
                    (x0 < xr.1 && x1 >= xr.0 && y0 < yr.1 && y1 >= yr.0).then_some(k)
                })
                .collect();
            blend_tile(&projections, &candidates, cloud, width, xr, yr)
        })
        .collect();

    let pixels = width * height;
    let mut per_pixel: Vec<(Vec<(u32, f64)>, f64)> = vec![(Vec::new(), 0.0); pixels];
    for tile in tile_results {
        for (p, contrib, alpha) in tile {
            per_pixel[p] = (contrib, alpha);
        }
    }
    let total: usize = per_pixel.iter().map(|(c, _)| c.len()).sum();
    let mut trace = BlendTrace {
        width,
        height,
        num_gaussians: cloud.len(),
        offsets: Vec::with_capacity(pixels + 1),
        gaussians: Vec::with_capacity(total),
        weights: Vec::with_capacity(total),
        alpha: Vec::with_capacity(pixels),
    };
    trace.offsets.push(0);
    for (contrib, alpha) in per_pixel {
        for (g, w) in contrib {
            trace.gaussians.push(g);
            trace.weights.push(w);
        }
        trace.offsets.push(trace.gaussians.len());
        trace.alpha.push(alpha);
    }
    trace
}

pub fn rasterize(cloud: &GaussianCloud, camera: &Camera) -> BlendTrace {
    rasterize_subset(cloud, camera, None)
}

pub fn render_features(cloud: &GaussianCloud, camera: &Camera) -> FeatureMap {
    let trace = rasterize(cloud, camera);
    feature_map_from_trace(&trace, cloud.features.as_slice(), cloud.feature_dim())
}

pub fn feature_map_from_trace(trace: &BlendTrace, features: &[f64], dim: usize) -> FeatureMap {
    FeatureMap {
        width: trace.width,
        height: trace.height,
        dim,
        data: trace.render(features, dim),
        alpha: trace.alpha().to_vec(),
    }
}

/// `H x W x 3` RGB over a black background.
pub fn render_color(cloud: &GaussianCloud, camera: &Camera) -> Vec<f64> {
    let trace = rasterize(cloud, camera);
    let colors: Vec<f64> = cloud.colors.iter().flatten().copied().collect();
    trace.render(&colors, 3)
}

/// Gradient of a loss with respect to per-Gaussian features, given its
/// gradient `upstream` (`H x W x C`) with respect to the rendered feature map.
pub fn backward_features(cloud: &GaussianCloud, camera: &Camera, upstream: &[f64]) -> Result<Vec<f64>> {
    rasterize(cloud, camera).backward(upstream, cloud.feature_dim())
}
