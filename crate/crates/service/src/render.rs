use std::io::Cursor;

use gsseg_core::splat::{BlendTrace, MIN_ALPHA};
use image::{ImageFormat, RgbImage};

use crate::error::ApiError;

/// Overlay tint for member Gaussians.
pub const HIGHLIGHT: [f64; 3] = [1.0, 0.15, 0.55];
pub const OVERLAY_OPACITY: f64 = 0.5;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blends `HIGHLIGHT` into every pixel where members carry blend weight
/// of at least `MIN_ALPHA`.
pub fn apply_overlay(rgb: &mut [f64], trace: &BlendTrace, membership: &[bool]) {
    for p in 0..trace.pixel_count() {
        let w: f64 = trace
            .contributors(p)
            .filter(|&(g, _)| membership[g])
            .map(|(_, w)| w)
            .sum();
        if w >= MIN_ALPHA {
            for (c, h) in rgb[3 * p..3 * p + 3].iter_mut().zip(HIGHLIGHT) {
                *c = (1.0 - OVERLAY_OPACITY) * *c + OVERLAY_OPACITY * h;
            }
        }
    }
}

pub fn encode_png(rgb: &[f64], width: usize, height: usize) -> Result<Vec<u8>, ApiError> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| ApiError::internal("rendered buffer does not match view size"))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("png encoding failed: {}", e)))?;
    Ok(out.into_inner())
}
