//! Voxel volumes: storage, raw+JSON file I/O, masking and synthetic phantoms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar attenuation grid, x-fastest, isotropic spacing.
///
/// Voxel `(i, j, k)` has its center at
/// `((i - (nx-1)/2) * spacing, (j - (ny-1)/2) * spacing, (k - (nz-1)/2) * spacing)`
/// in volume coordinates, so the volume midpoint is the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: f64,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: f64, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(Error::invalid(format!(
                "voxel spacing must be positive, got {spacing_mm}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::mismatch(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "voxel values must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Volume {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: f64) -> Result<Self> {
        Volume::new(dims, spacing_mm, vec![0.0; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f32) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::invalid(format!("bad voxel value {value}")));
        }
        let idx = self.index(i, j, k);
        self.data[idx] = value;
        Ok(())
    }

    /// Physical extent between the outermost voxel centers, per axis, in mm.
    pub fn extent_mm(&self) -> [f64; 3] {
        self.dims.map(|n| (n as f64 - 1.0) * self.spacing_mm)
    }

    /// Center of voxel `(i, j, k)` in volume coordinates (mm).
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let c = |idx: usize, n: usize| (idx as f64 - (n as f64 - 1.0) / 2.0) * self.spacing_mm;
        [c(i, self.dims[0]), c(j, self.dims[1]), c(k, self.dims[2])]
    }

    /// Trilinear interpolation at continuous voxel-index coordinates.
    /// Zero outside `[0, n-1]` on any axis.
    pub fn sample_index(&self, x: f64, y: f64, z: f64) -> f64 {
        let [nx, ny, nz] = self.dims;
        let max = |n: usize| (n - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && z >= 0.0 && x <= max(nx) && y <= max(ny) && z <= max(nz)) {
            return 0.0;
        }
        // base corner, clamped so the +1 neighbor stays in range
        let base = |v: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let i = (v.floor() as usize).min(n - 2);
            (i, v - i as f64)
        };
        let (i, fx) = base(x, nx);
        let (j, fy) = base(y, ny);
        let (k, fz) = base(z, nz);
        let step = |n: usize| usize::from(n > 1);
        let (di, dj, dk) = (step(nx), step(ny) * nx, step(nz) * nx * ny);
        let o = self.index(i, j, k);
        let d = &self.data;
        let c000 = d[o] as f64;
        let c100 = d[o + di] as f64;
        let c010 = d[o + dj] as f64;
        let c110 = d[o + di + dj] as f64;
        let c001 = d[o + dk] as f64;
        let c101 = d[o + di + dk] as f64;
        let c011 = d[o + dj + dk] as f64;
        let c111 = d[o + di + dj + dk] as f64;
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }

    /// Multiplies every voxel by `factor >= 0`.
    pub fn scaled(&self, factor: f32) -> Result<Volume> {
        Volume::new(
            self.dims,
            self.spacing_mm,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Voxel-wise sum of two volumes on the same grid.
    pub fn added(&self, other: &Volume) -> Result<Volume> {
        if self.dims != other.dims || self.spacing_mm != other.spacing_mm {
            return Err(Error::mismatch(format!(
                "cannot add {:?}@{} and {:?}@{}",
                self.dims, self.spacing_mm, other.dims, other.spacing_mm
            )));
        }
        Volume::new(
            self.dims,
            self.spacing_mm,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

/// Binary occupancy grid matching a volume's dims.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl VoxelMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::mismatch(format!(
                "mask {dims:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        Ok(VoxelMask { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: bool) -> Self {
        VoxelMask {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Voxels whose value is at least `threshold`.
    pub fn from_threshold(volume: &Volume, threshold: f32) -> Self {
        VoxelMask {
            dims: volume.dims,
            data: volume.data.iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = i + self.dims[0] * (j + self.dims[1] * k);
        self.data[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Zeroes every voxel outside the mask.
pub fn apply_mask(volume: &Volume, mask: &VoxelMask) -> Result<Volume> {
    if volume.dims != mask.dims {
        return Err(Error::mismatch(format!(
            "mask dims {:?} do not match volume dims {:?}",
            mask.dims, volume.dims
        )));
    }
    let data = volume
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Volume::new(volume.dims, volume.spacing_mm, data)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: f64,
}

/// `foo`, `foo.raw` and `foo.json` all name the pair `foo.raw` + `foo.json`.
pub(crate) fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut raw = stem.clone().into_os_string();
    raw.push(".raw");
    let mut json = stem.into_os_string();
    json.push(".json");
    (raw.into(), json.into())
}

pub(crate) fn write_f32_le(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!(
                "payload of {} bytes is not a whole number of f32",
                bytes.len()
            ),
        ));
    }
    if bytes.len() / 4 != expected {
        return Err(Error::format(
            path,
            format!(
                "size mismatch: header expects {expected} values, payload has {}",
                bytes.len() / 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `<name>.raw` (little-endian f32, x fastest) and `<name>.json`.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (raw, json) = file_pair(path.as_ref());
    let header = VolumeHeader {
        dims: volume.dims,
        spacing_mm: volume.spacing_mm,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    write_f32_le(&raw, volume.data.iter().copied())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (raw, json) = file_pair(path.as_ref());
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    let n = header.dims.iter().product();
    let data = read_f32_le(&raw, n)?;
    Volume::new(header.dims, header.spacing_mm, data)
        .map_err(|e| Error::format(&raw, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Sphere,
    Box,
    #[serde(alias = "spine-like")]
    Spine,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(PhantomKind::Sphere),
            "box" => Ok(PhantomKind::Box),
            "spine" | "spine-like" => Ok(PhantomKind::Spine),
            other => Err(Error::invalid(format!(
                "unknown phantom kind {other:?} (expected sphere, box or spine)"
            ))),
        }
    }
}

pub const MIN_PHANTOM_DIM: usize = 16;

/// Axis-aligned block in normalized coordinates (each axis spans [-0.5, 0.5]).
#[derive(Debug, Clone, Copy)]
struct Block {
    center: [f64; 3],
    half: [f64; 3],
    value: f32,
}

#[derive(Debug, Clone, Copy)]
struct Ball {
    center: [f64; 3],
    radius: f64,
    value: f32,
}

/// Synthetic stand-in for a masked CT scan.
///
/// The spine phantom stacks five vertebrae along +y inside a soft-tissue
/// torso. Each has a body that grows toward +y, a posterior arch and spinous
/// process, a long transverse process on -x, a short one on +x and a pair of
/// ribs. Three dense markers sit off-axis at different depths. No mirror
/// symmetry survives, so every pose component changes the projection.
pub fn make_phantom(
    kind: PhantomKind,
    dims: [usize; 3],
    spacing_mm: f64,
    seed: u64,
) -> Result<Volume> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::invalid(format!(
            "phantom dims must be at least {MIN_PHANTOM_DIM} per axis, got {dims:?}"
        )));
    }
    let mut vol = Volume::zeros(dims, spacing_mm)?;
    match kind {
        PhantomKind::Sphere => {
            let r = dims.iter().copied().min().unwrap() as f64 / 4.0;
            let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
            fill(&mut vol, |i, j, k| {
                let d2 = (i - c[0]).powi(2) + (j - c[1]).powi(2) + (k - c[2]).powi(2);
                if d2 <= r * r {
                    1.0
                } else {
                    0.0
                }
            });
        }
        PhantomKind::Box => {
            let block = Block {
                center: [0.0; 3],
                half: [0.25, 0.3, 0.15],
                value: 1.0,
            };
            let n = dims.map(|n| n as f64);
            fill(&mut vol, |i, j, k| {
                let f = normalized(i, j, k, n);
                if block.contains(f) {
                    block.value
                } else {
                    0.0
                }
            });
        }
        PhantomKind::Spine => {
            let (blocks, balls) = spine_layout(seed);
            let n = dims.map(|n| n as f64);
            fill(&mut vol, |i, j, k| {
                let f = normalized(i, j, k, n);
                let b = blocks
                    .iter()
                    .filter(|b| b.contains(f))
                    .map(|b| b.value)
                    .fold(0.0f32, f32::max);
                let bone = balls
                    .iter()
                    .filter(|s| s.contains(f))
                    .map(|s| s.value)
                    .fold(b, f32::max);
                bone + torso(f)
            });
        }
    }
    Ok(vol)
}

/// Soft-tissue envelope: elliptic cylinder along y with a smooth rim.
fn torso(p: [f64; 3]) -> f32 {
    let r = ((p[0] / 0.44).powi(2) + ((p[2] - 0.02) / 0.38).powi(2)).sqrt();
    let rim = ((1.0 - r) / 0.15).clamp(0.0, 1.0);
    (0.2 * rim * rim * (3.0 - 2.0 * rim)) as f32
}

fn normalized(i: f64, j: f64, k: f64, n: [f64; 3]) -> [f64; 3] {
    [
        (i + 0.5) / n[0] - 0.5,
        (j + 0.5) / n[1] - 0.5,
        (k + 0.5) / n[2] - 0.5,
    ]
}

fn fill(vol: &mut Volume, value: impl Fn(f64, f64, f64) -> f32) {
    let [nx, ny, nz] = vol.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = vol.index(i, j, k);
                vol.data[idx] = value(i as f64, j as f64, k as f64);
            }
        }
    }
}

impl Block {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half[a])
    }
}

impl Ball {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }
}

fn spine_layout(seed: u64) -> (Vec<Block>, Vec<Ball>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |scale: f64| rng.random_range(-scale..scale);
    let mut blocks = Vec::new();
    let mut balls = Vec::new();
    for v in 0..5 {
        let k = v as f64;
        let cy = -0.32 + 0.16 * k + jitter(0.005);
        let cx = jitter(0.01);
        let half = [
            (0.18 + 0.01 * k) * (1.0 + jitter(0.04)),
            (0.050 + 0.004 * k) * (1.0 + jitter(0.04)),
            (0.13 + 0.008 * k) * (1.0 + jitter(0.04)),
        ];
        // anterior body with denser endplates
        let cz = 0.12;
        blocks.push(Block {
            center: [cx, cy, cz],
            half,
            value: 0.9 + jitter(0.05) as f32,
        });
        for side in [-1.0, 1.0] {
            blocks.push(Block {
                center: [cx, cy + side * (half[1] - 0.01), cz],
                half: [half[0], 0.01, half[2]],
                value: 1.3,
            });
        }
        // pedicles running back from the body
        let back = cz - half[2];
        for side in [-1.0, 1.0] {
            blocks.push(Block {
                center: [cx + side * 0.6 * half[0], cy, back - 0.06],
                half: [0.035, 0.03, 0.06],
                value: 1.2,
            });
        }
        // lamina closing the arch
        blocks.push(Block {
            center: [cx, cy + 0.01, back - 0.13],
            half: [0.6 * half[0] + 0.035, 0.025, 0.02],
            value: 1.0,
        });
        // spinous process, posterior and angled toward +y
        blocks.push(Block {
            center: [cx + 0.015, cy + 0.03, back - 0.22],
            half: [0.02, 0.022, 0.08],
            value: 1.0,
        });
        // long left and short right transverse processes
        let left_len = 0.13 + 0.02 * (v % 2) as f64;
        blocks.push(Block {
            center: [cx - 0.6 * half[0] - left_len / 2.0, cy - 0.01, back - 0.07],
            half: [left_len / 2.0, 0.016, 0.025],
            value: 0.9,
        });
        let right_len = 0.07;
        blocks.push(Block {
            center: [cx + 0.6 * half[0] + right_len / 2.0, cy + 0.01, back - 0.07],
            half: [right_len / 2.0, 0.016, 0.025],
            value: 0.9,
        });
        // ribs curving from the transverse processes around the torso wall,
        // dropping toward +y as they go anterior
        for side in [-1.0, 1.0] {
            let sweep = 2.0 + 0.15 * k + jitter(0.1);
            let drop = 0.05 + jitter(0.015);
            for s in 0..14 {
                let t = s as f64 / 13.0;
                let a = -std::f64::consts::FRAC_PI_2 + t * sweep;
                balls.push(Ball {
                    center: [
                        cx + side * 0.36 * a.cos(),
                        cy + drop * t,
                        0.03 + 0.3 * a.sin(),
                    ],
                    radius: 0.016,
                    value: 1.0,
                });
            }
        }
        // interior cancellous texture
        for _ in 0..3 {
            balls.push(Ball {
                center: [
                    cx + jitter(half[0] * 0.6),
                    cy + jitter(half[1] * 0.5),
                    cz + jitter(half[2] * 0.6),
                ],
                radius: 0.025 + jitter(0.005).abs(),
                value: 1.15,
            });
        }
    }
    // fiducial markers at different depths
    for (center, radius) in [
        ([0.3, -0.38, 0.3], 0.035),
        ([-0.33, 0.08, -0.28], 0.03),
        ([0.28, 0.34, -0.12], 0.03),
    ] {
        balls.push(Ball {
            center,
            radius,
            value: 2.0,
        });
    }
    (blocks, balls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume::new([2, 2, 2], 1.0, vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], 0.0, vec![0.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], 1.0, vec![-1.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], 1.0, vec![f32::NAN; 8]).is_err());
        assert!(Volume::new([0, 2, 2], 1.0, vec![]).is_err());
    }

    #[test]
    fn trilinear_interpolation() {
        let mut v = Volume::zeros([2, 2, 2], 1.0).unwrap();
        v.set(1, 1, 1, 8.0).unwrap();
        assert_eq!(v.sample_index(1.0, 1.0, 1.0), 8.0);
        assert_eq!(v.sample_index(0.5, 0.5, 0.5), 1.0);
        assert_eq!(v.sample_index(0.0, 0.0, 0.0), 0.0);
        assert_eq!(v.sample_index(1.0001, 1.0, 1.0), 0.0);
        assert_eq!(v.sample_index(-0.1, 0.5, 0.5), 0.0);
        // linear along an axis
        let ramp = Volume::new([2, 1, 1], 1.0, vec![2.0, 4.0]).unwrap();
        assert_eq!(ramp.sample_index(0.25, 0.0, 0.0), 2.5);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phantom");
        let v = make_phantom(PhantomKind::Spine, [20, 24, 18], 1.5, 3).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v);
        // the extension is optional on either side
        let again = load_volume(dir.path().join("phantom.json")).unwrap();
        assert_eq!(again, v);
        let raw = fs::read(dir.path().join("phantom.raw")).unwrap();
        save_volume(&back, dir.path().join("copy.raw")).unwrap();
        assert_eq!(raw, fs::read(dir.path().join("copy.raw")).unwrap());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        assert!(matches!(load_volume(&p), Err(Error::Io { .. })));
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2,2],"spacing_mm":1.0}"#,
        )
        .unwrap();
        write_f32_le(&dir.path().join("v.raw"), std::iter::repeat_n(1.0, 7)).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2],"spacing_mm":1.0}"#,
        )
        .unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    #[ignore = "writes a 64 MiB volume"]
    fn full_size_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros([256, 256, 256], 1.0).unwrap();
        save_volume(&v, dir.path().join("ct")).unwrap();
        let back = load_volume(dir.path().join("ct")).unwrap();
        assert_eq!(back.dims(), [256, 256, 256]);
        assert_eq!(back.spacing_mm(), 1.0);
    }

    #[test]
    fn masks() {
        let v = make_phantom(PhantomKind::Sphere, [16, 16, 16], 1.0, 0).unwrap();
        assert_eq!(
            apply_mask(&v, &VoxelMask::filled(v.dims(), true)).unwrap(),
            v
        );
        let zero = apply_mask(&v, &VoxelMask::filled(v.dims(), false)).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        let mut single = VoxelMask::filled(v.dims(), false);
        single.set(8, 8, 8, true);
        let one = apply_mask(&v, &single).unwrap();
        assert_eq!(one.data().iter().filter(|&&x| x != 0.0).count(), 1);
        assert!(apply_mask(&v, &VoxelMask::filled([16, 16, 15], true)).is_err());
    }

    #[test]
    fn sphere_phantom_shape() {
        let v = make_phantom(PhantomKind::Sphere, [32, 32, 32], 1.0, 0).unwrap();
        assert!(v.get(16, 16, 16) > 0.0);
        for &(i, j, k) in &[(0, 0, 0), (31, 0, 0), (0, 31, 31), (31, 31, 31)] {
            assert_eq!(v.get(i, j, k), 0.0);
        }
    }

    #[test]
    fn box_phantom_is_cuboid() {
        let v = make_phantom(PhantomKind::Box, [32, 32, 32], 1.0, 0).unwrap();
        assert!(v.get(16, 16, 16) > 0.0);
        assert_eq!(v.get(16, 16, 31), 0.0);
        assert!(v.get(16, 24, 16) > 0.0); // taller than deep
        assert_eq!(v.get(16, 16, 26), 0.0);
    }

    #[test]
    fn phantom_is_deterministic_and_seeded() {
        let a = make_phantom(PhantomKind::Spine, [32, 40, 32], 1.0, 11).unwrap();
        let b = make_phantom(PhantomKind::Spine, [32, 40, 32], 1.0, 11).unwrap();
        let c = make_phantom(PhantomKind::Spine, [32, 40, 32], 1.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.max_value() >= 1.0);
    }

    #[test]
    fn spine_phantom_breaks_mirror_symmetry() {
        let v = make_phantom(PhantomKind::Spine, [48, 48, 48], 1.0, 1).unwrap();
        let [nx, ny, nz] = v.dims();
        let (mut lr, mut tb, mut total) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let a = v.get(i, j, k) as f64;
                    lr += (a - v.get(nx - 1 - i, j, k) as f64).abs();
                    tb += (a - v.get(i, ny - 1 - j, k) as f64).abs();
                    total += a;
                }
            }
        }
        assert!(lr > 0.05 * total, "left/right asymmetry too weak");
        assert!(tb > 0.05 * total, "top/bottom asymmetry too weak");
    }

    #[test]
    fn phantom_dims_precondition() {
        let err = make_phantom(PhantomKind::Sphere, [8, 8, 8], 1.0, 0).unwrap_err();
        assert!(err.to_string().contains("dims"));
    }

    proptest! {
        #[test]
        fn masking_is_idempotent(bits in prop::collection::vec(any::<bool>(), 16 * 16 * 16)) {
            let v = make_phantom(PhantomKind::Sphere, [16, 16, 16], 1.0, 0).unwrap();
            let m = VoxelMask::new([16, 16, 16], bits).unwrap();
            let once = apply_mask(&v, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }
    }
}
