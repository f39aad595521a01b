//! Flat JSON camera calibration:
//! `{"fx", "fy", "cx", "cy", "rotation": [9 numbers, row-major], "translation": [3 numbers]}`
//! with camera-from-world extrinsics `p_cam = R p_world + t`.

use std::path::Path;

use anyhow::{anyhow, Result};
use hst_core::pose::Camera;
use serde::{Deserialize, Serialize};

use crate::fsio;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

pub fn parse_camera(text: &str) -> Result<Camera> {
    let c: CameraFile = serde_json::from_str(text)?;
    let r = c.rotation;
    let rotation = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
    Ok(Camera::new(c.fx, c.fy, c.cx, c.cy, rotation, c.translation)?)
}

pub fn format_camera(cam: &Camera) -> String {
    let c = CameraFile {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        rotation: std::array::from_fn(|i| cam.rotation[i / 3][i % 3]),
        translation: cam.translation,
    };
    serde_json::to_string_pretty(&c).expect("camera serializes") + "\n"
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    parse_camera(&fsio::read_to_string(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    fsio::write_atomic_str(path, &format_camera(cam))
}
