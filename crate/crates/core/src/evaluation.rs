//! Registration metrics and the benchmark harness.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drr::{normalize_image, project, DetectorImage};
use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, CameraGeometry, Pose6};
use crate::optimizer::OptimizerKind;
use crate::registration::{
    register, sample_initial_offset, sample_initial_offset_truncated, sample_test_pose, substream,
    RegistrationConfig,
};
use crate::volume::Volume;

/// Points in volume coordinates (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("landmark set is empty"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when every point lies within the volume's physical bounding box.
    pub fn inside(&self, volume: &Volume) -> bool {
        let half = volume.dims().map(|n| n as f64 * volume.spacing_mm() / 2.0);
        self.points
            .iter()
            .all(|p| (0..3).all(|a| p[a].abs() <= half[a]))
    }
}

/// Mean distance between landmarks mapped by the two poses.
pub fn mtre(theta: &Pose6, theta_ref: &Pose6, landmarks: &LandmarkSet) -> Result<f64> {
    if landmarks.is_empty() {
        return Err(Error::invalid("landmark set is empty"));
    }
    let a = pose_to_transform(theta)?;
    let b = pose_to_transform(theta_ref)?;
    let total: f64 = landmarks
        .points
        .iter()
        .map(|p| {
            let p = Point3::from(*p);
            (a.apply(&p) - b.apply(&p)).norm()
        })
        .sum();
    Ok(total / landmarks.len() as f64)
}

/// Geodesic rotation angle (degrees) and translation distance (mm).
pub fn pose_error(theta: &Pose6, theta_ref: &Pose6) -> Result<(f64, f64)> {
    let a = pose_to_transform(theta)?;
    let b = pose_to_transform(theta_ref)?;
    let m = a.rotation.transpose() * b.rotation;
    // atan2 form of arccos((tr - 1) / 2), exact near zero
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * ((m[(2, 1)] - m[(1, 2)]).powi(2)
            + (m[(0, 2)] - m[(2, 0)]).powi(2)
            + (m[(1, 0)] - m[(0, 1)]).powi(2))
        .sqrt();
    Ok((
        sin.atan2(cos).to_degrees(),
        (a.translation - b.translation).norm(),
    ))
}

/// 3x3x3 grid spanning the central half of the volume, centered on it.
pub fn default_landmarks(volume: &Volume) -> LandmarkSet {
    let q = volume.dims().map(|n| n as f64 * volume.spacing_mm() / 4.0);
    let mut points = Vec::with_capacity(27);
    for k in -1..=1 {
        for j in -1..=1 {
            for i in -1..=1 {
                points.push([i as f64 * q[0], j as f64 * q[1], k as f64 * q[2]]);
            }
        }
    }
    LandmarkSet { points }
}

/// Pixel-wise `|normalize(a) - normalize(b)|`.
pub fn difference_map(a: &DetectorImage, b: &DetectorImage) -> Result<DetectorImage> {
    if !a.same_shape(b) {
        return Err(Error::mismatch(format!(
            "images are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (na, nb) = (normalize_image(a), normalize_image(b));
    let data = na
        .data()
        .iter()
        .zip(nb.data())
        .map(|(x, y)| (x - y).abs())
        .collect();
    DetectorImage::new(a.width(), a.height(), a.spacing_mm(), data)
}

/// One optimizer configuration compared by the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub population: Option<usize>,
}

impl MethodSpec {
    pub fn lra_cma() -> Self {
        MethodSpec {
            name: "LRA-CMA".into(),
            optimizer: OptimizerKind::LraCma,
            population: Some(5),
        }
    }

    pub fn cma_es(population: usize) -> Self {
        MethodSpec {
            name: "CMA-ES".into(),
            optimizer: OptimizerKind::CmaEs,
            population: Some(population),
        }
    }
}

pub const DEFAULT_CLASSIC_POPULATION: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub cases: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    /// Per-component bounds `[rot_deg, trans_mm]` on the initial offset.
    pub truncate_offset: Option<[f64; 2]>,
    /// Shared settings; each method overrides optimizer, population and seed.
    pub registration: RegistrationConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            cases: 5,
            seed: 0,
            methods: vec![
                MethodSpec::lra_cma(),
                MethodSpec::cma_es(DEFAULT_CLASSIC_POPULATION),
            ],
            truncate_offset: None,
            registration: RegistrationConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 {
            return Err(Error::invalid("benchmark needs at least one case"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("benchmark needs at least one method"));
        }
        if self.methods.iter().any(|m| m.name == INITIAL_ROW) {
            return Err(Error::invalid(format!(
                "method name {INITIAL_ROW:?} is reserved"
            )));
        }
        if let Some([r, t]) = self.truncate_offset {
            if !(r > 0.0 && t > 0.0) {
                return Err(Error::invalid("truncation bounds must be positive"));
            }
        }
        self.registration.validate()
    }
}

pub const INITIAL_ROW: &str = "Initial";

/// Ground truth and start pose of one benchmark case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseSetup {
    pub case: usize,
    pub ground_truth: Pose6,
    pub initial_pose: Pose6,
    pub registration_seed: u64,
}

/// Case `i` draws everything from sub-stream `i + 1` of the master seed.
pub fn case_setup(seed: u64, case: usize, truncate: Option<[f64; 2]>) -> Result<CaseSetup> {
    let mut rng = substream(seed, case as u64 + 1);
    let ground_truth = sample_test_pose(&mut rng);
    let offset = match truncate {
        Some([r, t]) => sample_initial_offset_truncated(&mut rng, r, t)?,
        None => sample_initial_offset(&mut rng),
    };
    Ok(CaseSetup {
        case,
        ground_truth,
        initial_pose: ground_truth.offset_by(&offset),
        registration_seed: rand::Rng::random(&mut rng),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: usize,
    pub method: String,
    pub ground_truth: Pose6,
    pub initial_pose: Pose6,
    pub final_pose: Pose6,
    pub initial_mtre: f64,
    pub final_mtre: f64,
    pub initial_rot_deg: f64,
    pub initial_trans_mm: f64,
    pub rot_deg: f64,
    pub trans_mm: f64,
    pub final_cost: Option<f64>,
    pub time_s: f64,
    pub evaluations: usize,
    /// Set when registration aborted; final metrics then repeat the initial ones.
    pub error: Option<String>,
}

impl CaseRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Mean, sample standard deviation and median of a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty column"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[m]
        } else {
            (sorted[m - 1] + sorted[m]) / 2.0
        };
        Ok(Aggregate { mean, std, median })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mtre: Aggregate,
    pub rot_deg: Aggregate,
    pub trans_mm: Aggregate,
    /// Absent for the Initial row.
    pub time_s: Option<Aggregate>,
    pub evaluations: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub landmarks: LandmarkSet,
    pub rows: Vec<MethodSummary>,
    pub cases: Vec<CaseRecord>,
}

impl BenchmarkReport {
    pub fn row(&self, method: &str) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn records_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a CaseRecord> + 'a {
        self.cases.iter().filter(move |c| c.method == method)
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> BenchmarkReport {
        let mut r = self.clone();
        for c in &mut r.cases {
            c.time_s = 0.0;
        }
        for row in &mut r.rows {
            if let Some(t) = &mut row.time_s {
                *t = Aggregate {
                    mean: 0.0,
                    std: 0.0,
                    median: 0.0,
                };
            }
        }
        r
    }

    /// Aligned plain-text table, one row per method after the Initial row.
    pub fn table(&self) -> String {
        let header = [
            "Method",
            "mTRE mean(std)",
            "median",
            "Rot.(°)",
            "Trans.(mm)",
            "time(s)",
        ];
        let mut rows = vec![header.map(String::from).to_vec()];
        for r in &self.rows {
            rows.push(vec![
                r.method.clone(),
                format!("{:.1}({:.1})", r.mtre.mean, r.mtre.std),
                format!("{:.1}", r.mtre.median),
                format!("{:.1}", r.rot_deg.mean),
                format!("{:.1}", r.trans_mm.mean),
                r.time_s
                    .map_or("N/A".to_string(), |t| format!("{:.2}", t.mean)),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                writeln!(out, "{}", rule.join("-|-")).unwrap();
            }
        }
        out
    }
}

fn summarize(method: &str, records: &[&CaseRecord], initial: bool) -> Result<MethodSummary> {
    let col = |f: &dyn Fn(&CaseRecord) -> f64| -> Result<Aggregate> {
        Aggregate::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>())
    };
    Ok(if initial {
        MethodSummary {
            method: method.to_string(),
            mtre: col(&|r| r.initial_mtre)?,
            rot_deg: col(&|r| r.initial_rot_deg)?,
            trans_mm: col(&|r| r.initial_trans_mm)?,
            time_s: None,
            evaluations: 0,
            failures: 0,
        }
    } else {
        MethodSummary {
            method: method.to_string(),
            mtre: col(&|r| r.final_mtre)?,
            rot_deg: col(&|r| r.rot_deg)?,
            trans_mm: col(&|r| r.trans_mm)?,
            time_s: Some(col(&|r| r.time_s)?),
            evaluations: records.iter().map(|r| r.evaluations).sum(),
            failures: records.iter().filter(|r| r.failed()).count(),
        }
    })
}

fn run_case(
    volume: &Arc<Volume>,
    camera: &CameraGeometry,
    cfg: &BenchmarkConfig,
    landmarks: &LandmarkSet,
    setup: &CaseSetup,
) -> Result<Vec<CaseRecord>> {
    let gt = setup.ground_truth;
    let theta0 = setup.initial_pose;
    let initial_mtre = mtre(&theta0, &gt, landmarks)?;
    let (initial_rot_deg, initial_trans_mm) = pose_error(&theta0, &gt)?;
    let fixed = project(volume, camera, &gt, cfg.registration.step_mm)
        .map(Arc::new)
        .map_err(|e| e.to_string());
    let mut out = Vec::with_capacity(cfg.methods.len());
    for m in &cfg.methods {
        let reg = RegistrationConfig {
            optimizer: m.optimizer,
            population: m.population,
            seed: setup.registration_seed,
            ..cfg.registration
        };
        let outcome = fixed.clone().and_then(|fixed| {
            register(volume.clone(), *camera, fixed, &theta0, &reg).map_err(|e| e.to_string())
        });
        let base = CaseRecord {
            case: setup.case,
            method: m.name.clone(),
            ground_truth: gt,
            initial_pose: theta0,
            final_pose: theta0,
            initial_mtre,
            final_mtre: initial_mtre,
            initial_rot_deg,
            initial_trans_mm,
            rot_deg: initial_rot_deg,
            trans_mm: initial_trans_mm,
            final_cost: None,
            time_s: 0.0,
            evaluations: 0,
            error: None,
        };
        let record = match outcome {
            Ok(res) => {
                let (rot_deg, trans_mm) = pose_error(&res.pose, &gt)?;
                CaseRecord {
                    final_pose: res.pose,
                    final_mtre: mtre(&res.pose, &gt, landmarks)?,
                    rot_deg,
                    trans_mm,
                    final_cost: Some(res.cost),
                    time_s: res.time_s,
                    evaluations: res.evaluations,
                    ..base
                }
            }
            Err(e) => CaseRecord {
                error: Some(e),
                ..base
            },
        };
        out.push(record);
    }
    Ok(out)
}

/// Runs every method on `cfg.cases` sampled cases; cases run in parallel.
pub fn run_benchmark(
    volume: Arc<Volume>,
    camera: CameraGeometry,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let landmarks = default_landmarks(&volume);
    let setups = (0..cfg.cases)
        .map(|i| case_setup(cfg.seed, i, cfg.truncate_offset))
        .collect::<Result<Vec<_>>>()?;
    let per_case = setups
        .par_iter()
        .map(|s| run_case(&volume, &camera, cfg, &landmarks, s))
        .collect::<Result<Vec<_>>>()?;
    let cases: Vec<CaseRecord> = per_case.into_iter().flatten().collect();

    let first = &cfg.methods[0].name;
    let mut rows = vec![summarize(
        INITIAL_ROW,
        &cases
            .iter()
            .filter(|c| &c.method == first)
            .collect::<Vec<_>>(),
        true,
    )?];
    for m in &cfg.methods {
        let recs: Vec<&CaseRecord> = cases.iter().filter(|c| c.method == m.name).collect();
        rows.push(summarize(&m.name, &recs, false)?);
    }
    Ok(BenchmarkReport {
        config: cfg.clone(),
        landmarks,
        rows,
        cases,
    })
}

/// Difference map between the ground-truth and final-pose renderings of a case.
pub fn case_difference_map(
    volume: &Volume,
    camera: &CameraGeometry,
    record: &CaseRecord,
    step_mm: f64,
) -> Result<DetectorImage> {
    let gt = project(volume, camera, &record.ground_truth, step_mm)?;
    let est = project(volume, camera, &record.final_pose, step_mm)?;
    difference_map(&est, &gt)
}
