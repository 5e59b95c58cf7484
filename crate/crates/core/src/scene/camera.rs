use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{data_error, format_error, Error, Result};

pub const CAMERA_SCHEMA_VERSION: u32 = 1;

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Builds a camera at `eye` looking at `target` with world up `up`.
    pub fn look_at(
        id: impl Into<String>,
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera {
            id: id.into(),
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(data_error!("camera {}: zero image size", self.id));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(data_error!("camera {}: focal lengths must be positive", self.id));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-5) {
            return Err(data_error!(
                "camera {}: rotation block not orthonormal (error {:.3e})",
                self.id,
                err
            ));
        }
        let bottom = self.world_to_camera.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(data_error!("camera {}: last row must be [0 0 0 1]", self.id));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CameraId {
    Text(String),
    Number(u64),
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: CameraId,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_camera: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CameraFile {
    Bare(Vec<CameraRecord>),
    Versioned {
        version: u32,
        cameras: Vec<CameraRecord>,
    },
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(rec: CameraRecord) -> Result<Camera> {
        let id = match rec.id {
            CameraId::Text(s) => s,
            CameraId::Number(n) => n.to_string(),
        };
        if rec.world_to_camera.len() != 16 {
            return Err(format_error!(
                "camera {}: world_to_camera needs 16 values, found {}",
                id,
                rec.world_to_camera.len()
            ));
        }
        let cam = Camera {
            id,
            width: rec.width,
            height: rec.height,
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            world_to_camera: Matrix4::from_row_slice(&rec.world_to_camera),
        };
        cam.validate()?;
        Ok(cam)
    }
}

/// Parses either a bare JSON array of cameras or `{"version": 1, "cameras": [...]}`.
pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let file: CameraFile =
        serde_json::from_str(text).map_err(|e| format_error!("camera file: {}", e))?;
    let records = match file {
        CameraFile::Bare(records) => records,
        CameraFile::Versioned { version, cameras } => {
            if version != CAMERA_SCHEMA_VERSION {
                return Err(format_error!("unknown camera schema version {}", version));
            }
            cameras
        }
    };
    let cameras: Vec<Camera> = records
        .into_iter()
        .map(Camera::try_from)
        .collect::<Result<_>>()?;
    let mut ids: Vec<&str> = cameras.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(data_error!("duplicate camera ids"));
    }
    Ok(cameras)
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text)
}

/// Writes the versioned form.
pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| CameraRecord {
            id: CameraId::Text(c.id.clone()),
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: c.world_to_camera.transpose().as_slice().to_vec(),
        })
        .collect();
    let doc = serde_json::json!({ "version": CAMERA_SCHEMA_VERSION, "cameras": records });
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
