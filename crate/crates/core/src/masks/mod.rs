//! Per-view multi-granularity mask stacks and guidance feature maps, the
//! mask-IoU pixel correspondence and the pixel-pair sampler built on it.

mod synth;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{argument_error, data_error, format_error, Error, Result};
use crate::scene::Camera;
use crate::tensor::Tensor;

pub use synth::{part_labels, synth_guidance, synth_masks, Granularity, GuidanceSpec};

/// Default number of pixel pairs drawn per view and iteration.
pub const DEFAULT_PAIRS_PER_VIEW: usize = 4096;

/// Binary `H x W` image mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(argument_error!(
                "mask of {}x{} needs {} entries, found {}",
                width,
                height,
                width * height,
                bits.len()
            ));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Indices of covered pixels, ascending.
    pub fn pixels(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&p| self.bits[p]).collect()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nearest-neighbor resampling onto a `grid_width x grid_height` grid:
    /// each cell takes the mask value at the pixel under its center.
    pub fn downsample(&self, grid_width: usize, grid_height: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(grid_width * grid_height);
        for v in 0..grid_height {
            let y = (((v as f64 + 0.5) * self.height as f64 / grid_height as f64) as usize)
                .min(self.height - 1);
            for u in 0..grid_width {
                let x = (((u as f64 + 0.5) * self.width as f64 / grid_width as f64) as usize)
                    .min(self.width - 1);
                out.push(self.get(x, y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPair {
    pub p1: usize,
    pub p2: usize,
    pub corr: f64,
}

/// All masks extracted for one view.
#[derive(Debug, Clone)]
pub struct MaskStack {
    pub view_id: String,
    pub width: usize,
    pub height: usize,
    masks: Vec<Mask>,
    membership: OnceLock<Vec<Vec<u32>>>,
}

impl PartialEq for MaskStack {
    fn eq(&self, other: &Self) -> bool {
        self.view_id == other.view_id
            && self.width == other.width
            && self.height == other.height
            && self.masks == other.masks
    }
}

impl MaskStack {
    pub fn new(view_id: impl Into<String>, width: usize, height: usize, masks: Vec<Mask>) -> Result<Self> {
        if let Some(m) = masks.iter().find(|m| m.width != width || m.height != height) {
            return Err(format_error!(
                "mask of {}x{} in a {}x{} stack",
                m.width,
                m.height,
                width,
                height
            ));
        }
        Ok(MaskStack {
            view_id: view_id.into(),
            width,
            height,
            masks,
            membership: OnceLock::new(),
        })
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    fn membership_index(&self) -> &Vec<Vec<u32>> {
        self.membership.get_or_init(|| {
            let mut index = vec![Vec::new(); self.pixel_count()];
            for (m, mask) in self.masks.iter().enumerate() {
                for p in mask.pixels() {
                    index[p].push(m as u32);
                }
            }
            index
        })
    }

    /// Sorted ids of the masks containing pixel `p`.
    pub fn membership(&self, p: usize) -> &[u32] {
        &self.membership_index()[p]
    }

    /// Mask-IoU correspondence of two pixels.
    ///
    /// The IoU of the two membership sets, except that pairs sharing no mask
    /// get -1 and pairs where neither pixel lies in any mask get 0.
    pub fn corr(&self, p1: usize, p2: usize) -> f64 {
        let (a, b) = (self.membership(p1), self.membership(p2));
        if a.is_empty() && b.is_empty() {
            return 0.0;
        }
        let (mut i, mut j, mut inter) = (0, 0, 0usize);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        if inter == 0 {
            return -1.0;
        }
        inter as f64 / (a.len() + b.len() - inter) as f64
    }

    /// Pixels covered by at least one mask, ascending.
    pub fn support(&self) -> Vec<usize> {
        (0..self.pixel_count())
            .filter(|&p| !self.membership(p).is_empty())
            .collect()
    }

    /// `n` pairs with both pixels drawn uniformly inside mask `mask`.
    pub fn sample_within_mask<R: Rng + ?Sized>(&self, mask: usize, n: usize, rng: &mut R) -> Result<Vec<PixelPair>> {
        let pixels = self
            .masks
            .get(mask)
            .ok_or_else(|| argument_error!("mask index {} out of range", mask))?
            .pixels();
        if pixels.is_empty() {
            return Err(argument_error!("mask {} is empty", mask));
        }
        Ok((0..n)
            .map(|_| {
                let p1 = pixels[rng.random_range(0..pixels.len())];
                let p2 = pixels[rng.random_range(0..pixels.len())];
                PixelPair {
                    p1,
                    p2,
                    corr: self.corr(p1, p2),
                }
            })
            .collect())
    }

    /// Stochastic stand-in for the all-pairs correspondence sum.
    ///
    /// Even draws take both pixels uniformly from the union of mask supports;
    /// odd draws pick a non-empty mask uniformly and take both pixels from it.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<PixelPair>> {
        if n == 0 {
            return Err(argument_error!("pair count must be at least 1"));
        }
        let support = self.support();
        if support.is_empty() {
            return Err(argument_error!(
                "view {} has no mask coverage to sample from",
                self.view_id
            ));
        }
        let mask_pixels: Vec<Vec<usize>> = self
            .masks
            .iter()
            .map(Mask::pixels)
            .filter(|p| !p.is_empty())
            .collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let pool = if i % 2 == 0 {
                &support
            } else {
                &mask_pixels[rng.random_range(0..mask_pixels.len())]
            };
            let p1 = pool[rng.random_range(0..pool.len())];
            let p2 = pool[rng.random_range(0..pool.len())];
            out.push(PixelPair {
                p1,
                p2,
                corr: self.corr(p1, p2),
            });
        }
        Ok(out)
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.masks.len() * self.pixel_count());
        for m in &self.masks {
            data.extend(m.bits.iter().map(|&b| b as u8));
        }
        Tensor::u8(vec![self.masks.len(), self.height, self.width], data)
            .expect("stack dims are consistent")
    }

    /// Decodes an `[M, H, W]` u8 tensor; any non-zero byte is inside the mask.
    pub fn from_tensor(view_id: impl Into<String>, t: &Tensor) -> Result<Self> {
        t.expect_rank(3)?;
        let (m, h, w) = (t.dims[0], t.dims[1], t.dims[2]);
        let data = t.as_u8()?;
        let masks = (0..m)
            .map(|i| Mask {
                width: w,
                height: h,
                bits: data[i * h * w..(i + 1) * h * w].iter().map(|&b| b != 0).collect(),
            })
            .collect();
        MaskStack::new(view_id, w, h, masks)
    }

    pub fn check_camera(&self, camera: &Camera) -> Result<()> {
        if self.width != camera.width || self.height != camera.height {
            return Err(format_error!(
                "mask stack for view {} is {}x{}, camera is {}x{}",
                self.view_id,
                self.width,
                self.height,
                camera.width,
                camera.height
            ));
        }
        Ok(())
    }
}

/// Low-resolution feature grid of a 2D foundation model for one view.
///
/// Cell `(u, v)` covers image pixels `[u*W/Wf, (u+1)*W/Wf) x [v*H/Hf, (v+1)*H/Hf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceFeatureMap {
    pub view_id: String,
    pub grid_width: usize,
    pub grid_height: usize,
    pub dim: usize,
    /// Row-major `Hf x Wf x C_sam`.
    pub data: Vec<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl GuidanceFeatureMap {
    pub fn cell(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cell_count(&self) -> usize {
        self.grid_width * self.grid_height
    }

    pub fn cell_of_pixel(&self, x: usize, y: usize) -> usize {
        let u = (x * self.grid_width / self.image_width).min(self.grid_width - 1);
        let v = (y * self.grid_height / self.image_height).min(self.grid_height - 1);
        v * self.grid_width + u
    }

    pub fn downsample(&self, mask: &Mask) -> Vec<bool> {
        mask.downsample(self.grid_width, self.grid_height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_width == 0 || self.grid_height == 0 || self.dim == 0 {
            return Err(data_error!("guidance map {} has an empty grid", self.view_id));
        }
        if self.data.len() != self.cell_count() * self.dim {
            return Err(data_error!("guidance map {} payload size mismatch", self.view_id));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(data_error!(
                "guidance map {}: non-finite value in cell {}",
                self.view_id,
                i / self.dim
            ));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.grid_height, self.grid_width, self.dim], &self.data)
            .expect("guidance dims are consistent")
    }

    /// Decodes an `[Hf, Wf, C]` f32 tensor aligned to `camera`'s image.
    pub fn from_tensor(camera: &Camera, t: &Tensor) -> Result<Self> {
        t.expect_rank(3)?;
        let (hf, wf, c) = (t.dims[0], t.dims[1], t.dims[2]);
        if hf > camera.height || wf > camera.width {
            return Err(format_error!(
                "guidance grid {}x{} is finer than view {} ({}x{})",
                wf,
                hf,
                camera.id,
                camera.width,
                camera.height
            ));
        }
        let g = GuidanceFeatureMap {
            view_id: camera.id.clone(),
            grid_width: wf,
            grid_height: hf,
            dim: c,
            data: t.to_f64()?,
            image_width: camera.width,
            image_height: camera.height,
        };
        g.validate()?;
        Ok(g)
    }
}

pub fn stack_file_name(view: &str) -> String {
    format!("{}.masks.gsten", view)
}

pub fn guidance_file_name(view: &str) -> String {
    format!("{}.guidance.gsten", view)
}

pub fn load_stack(path: impl AsRef<Path>, camera: &Camera) -> Result<MaskStack> {
    let stack = MaskStack::from_tensor(camera.id.clone(), &Tensor::load(path)?)?;
    stack.check_camera(camera)?;
    Ok(stack)
}

pub fn load_guidance(path: impl AsRef<Path>, camera: &Camera) -> Result<GuidanceFeatureMap> {
    GuidanceFeatureMap::from_tensor(camera, &Tensor::load(path)?)
}

/// Loads `<view>.masks.gsten` for every camera; missing files are an error.
pub fn load_stacks(dir: impl AsRef<Path>, cameras: &[Camera]) -> Result<BTreeMap<String, MaskStack>> {
    let dir = dir.as_ref();
    cameras
        .iter()
        .map(|cam| {
            let path = dir.join(stack_file_name(&cam.id));
            if !path.exists() {
                return Err(Error::State(format!(
                    "view {} has no mask stack ({})",
                    cam.id,
                    path.display()
                )));
            }
            Ok((cam.id.clone(), load_stack(&path, cam)?))
        })
        .collect()
}

/// Loads every `<view>.guidance.gsten` that exists in `dir`.
pub fn load_guidance_dir(
    dir: impl AsRef<Path>,
    cameras: &[Camera],
) -> Result<BTreeMap<String, GuidanceFeatureMap>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for cam in cameras {
        let path = dir.join(guidance_file_name(&cam.id));
        if path.exists() {
            out.insert(cam.id.clone(), load_guidance(&path, cam)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn halves(w: usize, h: usize) -> MaskStack {
        let left = Mask::new(w, h, (0..w * h).map(|p| p % w < w / 2).collect()).unwrap();
        let right = Mask::new(w, h, (0..w * h).map(|p| p % w >= w / 2).collect()).unwrap();
        MaskStack::new("v", w, h, vec![left, right]).unwrap()
    }

    #[test]
    fn full_frame_mask_membership() {
        let s = MaskStack::new("v", 4, 3, vec![Mask::full(4, 3)]).unwrap();
        assert!((0..12).all(|p| s.membership(p) == [0]));
    }

    #[test]
    fn half_masks_membership() {
        let s = halves(4, 2);
        assert_eq!(s.membership(0), &[0]);
        assert_eq!(s.membership(3), &[1]);
        assert_eq!(s.corr(0, 3), -1.0);
        assert_eq!(s.corr(0, 1), 1.0);
    }

    #[test]
    fn corr_partial_overlap_and_background() {
        let a = Mask::new(3, 1, vec![true, true, false]).unwrap();
        let b = Mask::new(3, 1, vec![true, false, false]).unwrap();
        let s = MaskStack::new("v", 3, 1, vec![a, b]).unwrap();
        // p0 in {A,B}, p1 in {A}
        assert_eq!(s.corr(0, 1), 0.5);
        assert_eq!(s.corr(2, 2), 0.0);
        // one side in a mask, other in none: no shared mask
        assert_eq!(s.corr(0, 2), -1.0);
    }

    #[test]
    fn sampling_single_full_mask_is_all_ones() {
        let s = MaskStack::new("v", 5, 5, vec![Mask::full(5, 5)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = s.sample_pairs(500, &mut rng).unwrap();
        assert!(pairs.iter().all(|p| p.corr == 1.0));
    }

    #[test]
    fn disjoint_masks_sample_only_plus_minus_one() {
        let s = halves(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: BTreeSet<i64> = s
            .sample_pairs(5000, &mut rng)
            .unwrap()
            .iter()
            .map(|p| p.corr as i64)
            .collect();
        assert_eq!(values, BTreeSet::from([-1, 1]));
    }

    #[test]
    fn sampling_is_seeded() {
        let s = halves(8, 8);
        let a = s.sample_pairs(100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = s.sample_pairs(100, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_stack_cannot_be_sampled() {
        let s = MaskStack::new("v", 4, 4, vec![Mask::empty(4, 4)]).unwrap();
        assert!(s.sample_pairs(10, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let none = MaskStack::new("v", 4, 4, vec![]).unwrap();
        assert!(none.sample_pairs(10, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn stack_tensor_roundtrip_with_nested_masks() {
        // 16 nested squares
        let (w, h) = (20, 20);
        let masks = (0..16)
            .map(|k| {
                Mask::new(w, h, (0..w * h).map(|p| (p % w).max(p / w) <= k + 2).collect()).unwrap()
            })
            .collect();
        let s = MaskStack::new("nested", w, h, masks).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested.masks.gsten");
        s.to_tensor().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = MaskStack::from_tensor("nested", &Tensor::load(&path).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_tensor().to_bytes(), bytes);
    }

    #[test]
    fn camera_dimension_mismatch_is_format_error() {
        let s = halves(8, 8);
        let cam = Camera::look_at(
            "v",
            8,
            6,
            10.0,
            nalgebra::Vector3::new(0.0, -5.0, 0.0),
            nalgebra::Vector3::zeros(),
            nalgebra::Vector3::z(),
        );
        assert!(matches!(s.check_camera(&cam), Err(Error::Format(_))));
    }

    #[test]
    fn downsample_picks_center_pixels() {
        let m = Mask::new(4, 4, (0..16).map(|p| p % 4 >= 2).collect()).unwrap();
        assert_eq!(m.downsample(2, 2), vec![false, true, false, true]);
    }
}
