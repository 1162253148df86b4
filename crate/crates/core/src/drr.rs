//! Digitally reconstructed radiographs: ray casting through a voxel volume.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, CameraGeometry, Pose6};
use crate::volume::{file_pair, read_f32_le, write_f32_le, Volume};

/// Default ray-marching step, matching 1 mm voxels.
pub const DEFAULT_STEP_MM: f64 = 1.0;

/// Row-major 2D scalar image; pixel `(col, row)` is at `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorImage {
    width: usize,
    height: usize,
    spacing_mm: f64,
    data: Vec<f64>,
}

impl DetectorImage {
    pub fn new(width: usize, height: usize, spacing_mm: f64, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::mismatch(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image pixels must be finite"));
        }
        Ok(DetectorImage {
            width,
            height,
            spacing_mm,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        spacing_mm: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(c, r));
            }
        }
        DetectorImage::new(width, height, spacing_mm, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &DetectorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `(col, row)` of the brightest pixel, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Intensity-weighted centroid in pixel coordinates (pixel centers at +0.5).
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut sum = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(c, r);
                sum += v;
                cx += v * (c as f64 + 0.5);
                cy += v * (r as f64 + 0.5);
            }
        }
        (sum > 0.0).then(|| (cx / sum, cy / sum))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<DetectorImage> {
        DetectorImage::new(
            self.width,
            self.height,
            self.spacing_mm,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Renders the DRR of `volume` seen by `camera` with the volume placed at `pose`.
///
/// Each pixel integrates trilinearly interpolated attenuation along the ray
/// from the source to the pixel center. The ray is first clipped against the
/// box spanned by the outermost voxel centers, then sampled at the midpoints of
/// `ceil(len / step_mm)` equal sub-intervals.
pub fn project(
    volume: &Volume,
    camera: &CameraGeometry,
    pose: &Pose6,
    step_mm: f64,
) -> Result<DetectorImage> {
    if !(step_mm.is_finite() && step_mm > 0.0) {
        return Err(Error::invalid(format!(
            "ray step must be positive, got {step_mm}"
        )));
    }
    let transform = pose_to_transform(pose)?;
    let r_inv = transform.rotation.transpose();
    let spacing = volume.spacing_mm();
    let dims = volume.dims();
    let center = Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    );
    let upper = Vector3::new(
        dims[0] as f64 - 1.0,
        dims[1] as f64 - 1.0,
        dims[2] as f64 - 1.0,
    );
    let source = camera.source();
    // source in continuous voxel-index coordinates
    let origin_world = source.coords - camera.isocenter().coords - transform.translation;
    let origin = r_inv * origin_world / spacing + center;

    let (width, height) = (camera.width(), camera.height());
    let mut data = vec![0.0; width * height];
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out)| {
            for (col, px) in out.iter_mut().enumerate() {
                let dir_world = (camera.pixel_center(col, row) - source).normalize();
                // one index unit per `spacing` mm of ray
                let dir = r_inv * dir_world / spacing;
                let Some((t0, t1)) = clip_ray(&origin, &dir, &upper) else {
                    continue;
                };
                let len = t1 - t0;
                let n = (len / step_mm).ceil().max(1.0);
                let h = len / n;
                let mut acc = 0.0;
                for s in 0..n as usize {
                    let t = t0 + (s as f64 + 0.5) * h;
                    let p = origin + dir * t;
                    acc += volume.sample_index(p.x, p.y, p.z);
                }
                *px = acc * h;
            }
        });
    DetectorImage::new(width, height, camera.spacing_mm(), data)
}

/// Slab test against `[0, upper]`; returns the ray parameter interval (mm)
/// inside the box, restricted to `t >= 0`.
fn clip_ray(origin: &Vector3<f64>, dir: &Vector3<f64>, upper: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < 0.0 || origin[a] > upper[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut ta = (0.0 - origin[a]) * inv;
        let mut tb = (upper[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Min-max rescale to `[0, 1]`; constant images become all zeros.
pub fn normalize_image(img: &DetectorImage) -> DetectorImage {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        img.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; img.data.len()]
    };
    DetectorImage {
        data,
        ..img.clone()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageHeader {
    width: usize,
    height: usize,
    spacing_mm: f64,
}

/// Writes `<name>.raw` (little-endian f32, row-major) and `<name>.json`.
pub fn save_image(img: &DetectorImage, path: impl AsRef<Path>) -> Result<()> {
    let (raw, json) = file_pair(path.as_ref());
    let header = ImageHeader {
        width: img.width,
        height: img.height,
        spacing_mm: img.spacing_mm,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    write_f32_le(&raw, img.data.iter().map(|&v| v as f32))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<DetectorImage> {
    let (raw, json) = file_pair(path.as_ref());
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let h: ImageHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    let data = read_f32_le(&raw, h.width * h.height)?;
    DetectorImage::new(
        h.width,
        h.height,
        h.spacing_mm,
        data.into_iter().map(f64::from).collect(),
    )
    .map_err(|e| Error::format(&raw, e.to_string()))
}

/// Binary 16-bit PGM of the min-max normalized image, first row on top.
pub fn write_pgm16(img: &DetectorImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let norm = normalize_image(img);
    let mut bytes = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &norm.data {
        let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
