//! Image similarity: global NCC, patch-wise LNCC, their mixture mNCC, and
//! gradient correlation; plus the registration cost built on top of them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drr::{project, DetectorImage};
use crate::error::{Error, Result};
use crate::geometry::{CameraGeometry, Pose6};
use crate::volume::Volume;

/// Population variance below which a region counts as flat.
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_PATCH_RADIUS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Ncc,
    Lncc,
    Mncc,
    Gc,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncc" => Ok(MetricKind::Ncc),
            "lncc" => Ok(MetricKind::Lncc),
            "mncc" => Ok(MetricKind::Mncc),
            "gc" => Ok(MetricKind::Gc),
            other => Err(Error::invalid(format!(
                "unknown metric {other:?} (expected ncc, lncc, mncc or gc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub metric: MetricKind,
    pub mu: f64,
    pub patch_radius: usize,
    pub epsilon: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            metric: MetricKind::Mncc,
            mu: DEFAULT_MU,
            patch_radius: DEFAULT_PATCH_RADIUS,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SimilarityConfig {
    pub fn with_metric(metric: MetricKind) -> Self {
        SimilarityConfig {
            metric,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metric == MetricKind::Mncc && !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::invalid(format!(
                "mncc weight mu must lie in (0, 1), got {}",
                self.mu
            )));
        }
        if self.patch_radius < 1 {
            return Err(Error::invalid("patch radius must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Square patches of side `2r + 1` given by their centers `(col, row)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSpec {
    radius: usize,
    centers: Vec<(usize, usize)>,
}

impl PatchSpec {
    /// Checks that every patch fits in a `width × height` image and that no two overlap.
    pub fn new(
        radius: usize,
        centers: Vec<(usize, usize)>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        for &(c, r) in &centers {
            if c < radius || r < radius || c + radius >= width || r + radius >= height {
                return Err(Error::invalid(format!(
                    "patch at ({c}, {r}) with radius {radius} leaves the {width}x{height} image"
                )));
            }
        }
        let side = 2 * radius + 1;
        for (i, a) in centers.iter().enumerate() {
            for b in &centers[i + 1..] {
                if a.0.abs_diff(b.0) < side && a.1.abs_diff(b.1) < side {
                    return Err(Error::invalid(format!(
                        "patches at {a:?} and {b:?} overlap"
                    )));
                }
            }
        }
        Ok(PatchSpec { radius, centers })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn centers(&self) -> &[(usize, usize)] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Regular non-overlapping tiling with side `2r + 1` anchored at the top-left
/// corner; the remainder margins on the right and bottom are left out.
pub fn make_patch_grid(width: usize, height: usize, radius: usize) -> Result<PatchSpec> {
    let side = 2 * radius + 1;
    if width < side || height < side {
        return Err(Error::invalid(format!(
            "{width}x{height} image is smaller than one {side}x{side} patch"
        )));
    }
    let centers = (0..height / side)
        .flat_map(|pr| (0..width / side).map(move |pc| (pc * side + radius, pr * side + radius)))
        .collect();
    Ok(PatchSpec { radius, centers })
}

fn check_same_shape(a: &DetectorImage, b: &DetectorImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::mismatch(format!(
            "images are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Pearson correlation of two equally long samples; 0 if either one has
/// population variance below `eps`.
fn pearson(
    a: impl Iterator<Item = f64> + Clone,
    b: impl Iterator<Item = f64> + Clone,
    eps: f64,
) -> f64 {
    let mut n = 0usize;
    let (mut sa, mut sb) = (0.0, 0.0);
    for (x, y) in a.clone().zip(b.clone()) {
        sa += x;
        sb += y;
        n += 1;
    }
    let nf = n as f64;
    let (ma, mb) = (sa / nf, sb / nf);
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa / nf < eps || sbb / nf < eps {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Global normalized cross-correlation (Pearson coefficient of the pixels).
pub fn ncc(a: &DetectorImage, b: &DetectorImage) -> Result<f64> {
    ncc_eps(a, b, DEFAULT_EPSILON)
}

pub fn ncc_eps(a: &DetectorImage, b: &DetectorImage, eps: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.data().len() < 2 {
        return Err(Error::invalid("ncc needs at least 2 pixels"));
    }
    Ok(pearson(
        a.data().iter().copied(),
        b.data().iter().copied(),
        eps,
    ))
}

fn patch_pixels<'a>(
    img: &'a DetectorImage,
    center: (usize, usize),
    r: usize,
) -> impl Iterator<Item = f64> + Clone + 'a {
    let w = img.width();
    let data = img.data();
    (center.1 - r..=center.1 + r).flat_map(move |row| {
        data[row * w + center.0 - r..=row * w + center.0 + r]
            .iter()
            .copied()
    })
}

/// Mean of per-patch NCC; flat patches contribute 0.
pub fn lncc(a: &DetectorImage, b: &DetectorImage, patches: &PatchSpec, eps: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if patches.is_empty() {
        return Err(Error::invalid("lncc needs at least one patch"));
    }
    let r = patches.radius;
    for &(c, row) in &patches.centers {
        if c + r >= a.width() || row + r >= a.height() {
            return Err(Error::invalid(format!(
                "patch at ({c}, {row}) leaves the image"
            )));
        }
    }
    let sum: f64 = patches
        .centers
        .iter()
        .map(|&c| pearson(patch_pixels(a, c, r), patch_pixels(b, c, r), eps))
        .sum();
    Ok(sum / patches.len() as f64)
}

/// `(1 - mu) * ncc + mu * lncc` over the full patch tiling.
pub fn mncc(a: &DetectorImage, b: &DetectorImage, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.validate()?;
    let patches = make_patch_grid(a.width(), a.height(), cfg.patch_radius)?;
    mncc_with(a, b, &patches, cfg.mu, cfg.epsilon)
}

fn mncc_with(
    a: &DetectorImage,
    b: &DetectorImage,
    patches: &PatchSpec,
    mu: f64,
    eps: f64,
) -> Result<f64> {
    let global = ncc_eps(a, b, eps)?;
    let local = lncc(a, b, patches, eps)?;
    Ok((1.0 - mu) * global + mu * local)
}

/// Central differences on the interior: returns `(d/dx, d/dy)` images of
/// size `(w-2) × (h-2)`.
pub fn gradients(img: &DetectorImage) -> Result<(DetectorImage, DetectorImage)> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::invalid(format!(
            "gradient needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    let s = img.spacing_mm();
    let gx = DetectorImage::from_fn(w - 2, h - 2, s, |c, r| {
        0.5 * (img.get(c + 2, r + 1) - img.get(c, r + 1))
    })?;
    let gy = DetectorImage::from_fn(w - 2, h - 2, s, |c, r| {
        0.5 * (img.get(c + 1, r + 2) - img.get(c + 1, r))
    })?;
    Ok((gx, gy))
}

pub fn gradient_correlation(a: &DetectorImage, b: &DetectorImage) -> Result<f64> {
    gradient_correlation_eps(a, b, DEFAULT_EPSILON)
}

pub fn gradient_correlation_eps(a: &DetectorImage, b: &DetectorImage, eps: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let (ax, ay) = gradients(a)?;
    let (bx, by) = gradients(b)?;
    Ok(0.5 * (ncc_eps(&ax, &bx, eps)? + ncc_eps(&ay, &by, eps)?))
}

/// Similarity according to `cfg`, in `[-1, 1]`.
pub fn similarity(a: &DetectorImage, b: &DetectorImage, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.metric {
        MetricKind::Ncc => ncc_eps(a, b, cfg.epsilon),
        MetricKind::Lncc => {
            let patches = make_patch_grid(a.width(), a.height(), cfg.patch_radius)?;
            lncc(a, b, &patches, cfg.epsilon)
        }
        MetricKind::Mncc => mncc(a, b, cfg),
        MetricKind::Gc => gradient_correlation_eps(a, b, cfg.epsilon),
    }
}

/// The registration cost `θ ↦ 1 - S(fixed, P(θ; V))`; lower is better, range `[0, 2]`.
///
/// Cloning is cheap; the volume and fixed image are shared.
#[derive(Clone)]
pub struct Objective {
    volume: Arc<Volume>,
    camera: CameraGeometry,
    fixed: Arc<DetectorImage>,
    cfg: SimilarityConfig,
    patches: Option<Arc<PatchSpec>>,
    step_mm: f64,
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Objective")
            .field("volume_dims", &self.volume.dims())
            .field("camera", &self.camera)
            .field("cfg", &self.cfg)
            .field("step_mm", &self.step_mm)
            .finish()
    }
}

pub fn objective(
    volume: Arc<Volume>,
    camera: CameraGeometry,
    fixed: Arc<DetectorImage>,
    cfg: SimilarityConfig,
    step_mm: f64,
) -> Result<Objective> {
    cfg.validate()?;
    if fixed.width() != camera.width() || fixed.height() != camera.height() {
        return Err(Error::mismatch(format!(
            "fixed image is {}x{} but the detector is {}x{}",
            fixed.width(),
            fixed.height(),
            camera.width(),
            camera.height()
        )));
    }
    if !(step_mm.is_finite() && step_mm > 0.0) {
        return Err(Error::invalid(format!(
            "ray step must be positive, got {step_mm}"
        )));
    }
    let patches = match cfg.metric {
        MetricKind::Lncc | MetricKind::Mncc => Some(Arc::new(make_patch_grid(
            camera.width(),
            camera.height(),
            cfg.patch_radius,
        )?)),
        MetricKind::Ncc => None,
        MetricKind::Gc => {
            gradients(&fixed)?;
            None
        }
    };
    Ok(Objective {
        volume,
        camera,
        fixed,
        cfg,
        patches,
        step_mm,
    })
}

impl Objective {
    pub fn render(&self, pose: &Pose6) -> Result<DetectorImage> {
        project(&self.volume, &self.camera, pose, self.step_mm)
    }

    pub fn similarity_of(&self, moving: &DetectorImage) -> Result<f64> {
        let eps = self.cfg.epsilon;
        match (self.cfg.metric, &self.patches) {
            (MetricKind::Ncc, _) => ncc_eps(&self.fixed, moving, eps),
            (MetricKind::Lncc, Some(p)) => lncc(&self.fixed, moving, p, eps),
            (MetricKind::Mncc, Some(p)) => mncc_with(&self.fixed, moving, p, self.cfg.mu, eps),
            (MetricKind::Gc, _) => gradient_correlation_eps(&self.fixed, moving, eps),
            _ => unreachable!("patch grid is built for patch metrics"),
        }
    }

    pub fn evaluate(&self, pose: &Pose6) -> Result<f64> {
        let moving = self.render(pose)?;
        Ok(1.0 - self.similarity_of(&moving)?)
    }

    pub fn camera(&self) -> &CameraGeometry {
        &self.camera
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn fixed(&self) -> &DetectorImage {
        &self.fixed
    }

    pub fn config(&self) -> &SimilarityConfig {
        &self.cfg
    }
}
