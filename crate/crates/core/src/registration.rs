//! End-to-end 2D/3D registration: pose sampling and the optimizer loop.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmaes::Candidate;
use crate::drr::{DetectorImage, DEFAULT_STEP_MM};
use crate::error::{Error, Result};
use crate::geometry::{CameraGeometry, Pose6};
use crate::lra::LraParams;
use crate::optimizer::{GenerationRecord, Optimizer, OptimizerKind};
use crate::similarity::{objective, Objective, SimilarityConfig};
use crate::volume::Volume;

pub const DEFAULT_SIGMA0: f64 = 10.0;
pub const DEFAULT_GENERATIONS: usize = 50;

/// Standard deviations of the initial-offset distribution (degrees, mm).
pub const OFFSET_ROT_STD_DEG: f64 = 10.0;
pub const OFFSET_TRANS_STD_MM: f64 = 15.0;

/// Half-widths of the test-pose distribution.
pub const TEST_ROT_DEG: f64 = 20.0;
pub const TEST_INPLANE_MM: f64 = 30.0;
pub const TEST_DEPTH_MM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub similarity: SimilarityConfig,
    pub optimizer: OptimizerKind,
    pub sigma0: f64,
    pub generations: usize,
    /// `None` uses 4 + floor(ln d), which is 5 for a pose.
    pub population: Option<usize>,
    pub seed: u64,
    pub step_mm: f64,
    pub lra: LraParams,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            similarity: SimilarityConfig::default(),
            optimizer: OptimizerKind::LraCma,
            sigma0: DEFAULT_SIGMA0,
            generations: DEFAULT_GENERATIONS,
            population: None,
            seed: 0,
            step_mm: DEFAULT_STEP_MM,
            lra: LraParams::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.similarity.validate()?;
        self.lra.validate()?;
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::invalid(format!(
                "sigma0 must be positive, got {}",
                self.sigma0
            )));
        }
        if self.generations == 0 {
            return Err(Error::invalid("generation budget must be at least 1"));
        }
        if let Some(l) = self.population {
            if l < 2 {
                return Err(Error::invalid(format!(
                    "population must be at least 2, got {l}"
                )));
            }
        }
        if !(self.step_mm.is_finite() && self.step_mm > 0.0) {
            return Err(Error::invalid(format!(
                "ray step must be positive, got {}",
                self.step_mm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub pose: Pose6,
    pub cost: f64,
    pub initial_cost: f64,
    pub generations: usize,
    pub population: usize,
    /// Sampled candidates only; the injected start pose is counted separately.
    pub evaluations: usize,
    pub injected_evaluations: usize,
    pub time_s: f64,
    pub trace: Vec<GenerationRecord>,
}

/// Builds the objective and runs [`register_objective`].
pub fn register(
    volume: Arc<Volume>,
    camera: CameraGeometry,
    fixed: Arc<DetectorImage>,
    theta0: &Pose6,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let f = objective(volume, camera, fixed, cfg.similarity, cfg.step_mm)?;
    register_objective(&f, theta0, cfg)
}

fn checked_cost(f: &Objective, pose: &Pose6) -> Result<f64> {
    let y = f.evaluate(pose)?;
    if !y.is_finite() {
        return Err(Error::numerical(format!("objective is {y} at pose {pose}")));
    }
    Ok(y)
}

/// Minimizes `f` from `theta0`, returning the best pose ever evaluated.
pub fn register_objective(
    f: &Objective,
    theta0: &Pose6,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if !theta0.is_finite() {
        return Err(Error::invalid(format!(
            "start pose is not finite: {theta0}"
        )));
    }
    let started = Instant::now();
    let m0 = theta0.to_array();
    let mut opt = Optimizer::new(
        cfg.optimizer,
        &m0,
        cfg.sigma0,
        cfg.population,
        cfg.lra,
        cfg.seed,
    )?;
    let initial_cost = checked_cost(f, theta0)?;
    opt.observe(&m0, initial_cost);

    let mut trace = Vec::with_capacity(cfg.generations);
    for _ in 0..cfg.generations {
        let samples = opt.ask()?;
        let candidates = samples
            .into_par_iter()
            .map(|s| {
                let y = checked_cost(f, &Pose6::from_slice(s.x.as_slice())?)?;
                Ok(s.evaluated(y))
            })
            .collect::<Result<Vec<Candidate>>>()?;
        trace.push(opt.tell(candidates)?);
    }

    let (x, cost) = opt.best().expect("start pose is always observed");
    Ok(RegistrationResult {
        pose: Pose6::from_slice(x.as_slice())?,
        cost,
        initial_cost,
        generations: cfg.generations,
        population: opt.lambda(),
        evaluations: opt.evaluations(),
        injected_evaluations: 1,
        time_s: started.elapsed().as_secs_f64(),
        trace,
    })
}

/// Independent generator for sub-stream `stream` of a master seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rotations ~ N(0, 10°), translations ~ N(0, 15 mm), independent.
pub fn sample_initial_offset(rng: &mut impl Rng) -> Pose6 {
    let rot = Normal::new(0.0, OFFSET_ROT_STD_DEG).unwrap();
    let trans = Normal::new(0.0, OFFSET_TRANS_STD_MM).unwrap();
    Pose6::new(
        rot.sample(rng),
        rot.sample(rng),
        rot.sample(rng),
        trans.sample(rng),
        trans.sample(rng),
        trans.sample(rng),
    )
}

/// [`sample_initial_offset`] conditioned on `|rot| <= max_rot_deg` and
/// `|trans| <= max_trans_mm` per component (rejection per component).
pub fn sample_initial_offset_truncated(
    rng: &mut impl Rng,
    max_rot_deg: f64,
    max_trans_mm: f64,
) -> Result<Pose6> {
    if !(max_rot_deg > 0.0 && max_trans_mm > 0.0) {
        return Err(Error::invalid("truncation bounds must be positive"));
    }
    let draw = |rng: &mut dyn rand::RngCore, std: f64, bound: f64| loop {
        let v = Normal::new(0.0, std).unwrap().sample(rng);
        if v.abs() <= bound {
            break v;
        }
    };
    let mut v = [0.0; 6];
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = if i < 3 {
            draw(rng, OFFSET_ROT_STD_DEG, max_rot_deg)
        } else {
            draw(rng, OFFSET_TRANS_STD_MM, max_trans_mm)
        };
    }
    Pose6::from_slice(&v)
}

/// Rotations ~ U(-20°, 20°), x/y ~ U(-30, 30) mm, depth z ~ U(-50, 50) mm.
pub fn sample_test_pose(rng: &mut impl Rng) -> Pose6 {
    let mut rot = || rng.random_range(-TEST_ROT_DEG..TEST_ROT_DEG);
    let (rx, ry, rz) = (rot(), rot(), rot());
    let tx = rng.random_range(-TEST_INPLANE_MM..TEST_INPLANE_MM);
    let ty = rng.random_range(-TEST_INPLANE_MM..TEST_INPLANE_MM);
    let tz = rng.random_range(-TEST_DEPTH_MM..TEST_DEPTH_MM);
    Pose6::new(rx, ry, rz, tx, ty, tz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::project;
    use crate::geometry::make_camera;
    use crate::volume::{make_phantom, PhantomKind};

    fn small_setup(gt: &Pose6) -> (Arc<Volume>, CameraGeometry, Arc<DetectorImage>) {
        let cam = make_camera((32, 32), 6.384, 1012.0, 506.0).unwrap();
        let vol = Arc::new(make_phantom(PhantomKind::Spine, [32, 40, 32], 2.0, 3).unwrap());
        let fixed = Arc::new(project(&vol, &cam, gt, 2.0).unwrap());
        (vol, cam, fixed)
    }

    fn quick_cfg() -> RegistrationConfig {
        RegistrationConfig {
            generations: 6,
            step_mm: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn evaluation_accounting() {
        let gt = Pose6::IDENTITY;
        let (vol, cam, fixed) = small_setup(&gt);
        let res = register(
            vol,
            cam,
            fixed,
            &Pose6::new(3.0, 0.0, 0.0, 0.0, 5.0, 0.0),
            &quick_cfg(),
        )
        .unwrap();
        assert_eq!(res.population, 5);
        assert_eq!(res.evaluations, 30);
        assert_eq!(res.injected_evaluations, 1);
        assert_eq!(res.trace.len(), 6);
        assert!(res.time_s >= 0.0);
        assert!(res.cost <= res.initial_cost);
        assert!(res.trace.windows(2).all(|w| w[1].best_y <= w[0].best_y));
    }

    #[test]
    fn perfect_start_is_never_lost() {
        let gt = Pose6::new(4.0, -2.0, 1.0, 3.0, -6.0, 10.0);
        let (vol, cam, fixed) = small_setup(&gt);
        let res = register(vol, cam, fixed, &gt, &quick_cfg()).unwrap();
        assert_eq!(res.cost, res.initial_cost);
        assert_eq!(res.pose, gt);
    }

    #[test]
    fn deterministic_except_time() {
        let (vol, cam, fixed) = small_setup(&Pose6::IDENTITY);
        let start = Pose6::new(5.0, 5.0, 5.0, 10.0, 10.0, 10.0);
        let mut a = register(vol.clone(), cam, fixed.clone(), &start, &quick_cfg()).unwrap();
        let mut b = register(vol, cam, fixed, &start, &quick_cfg()).unwrap();
        a.time_s = 0.0;
        b.time_s = 0.0;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (vol, cam, fixed) = small_setup(&Pose6::IDENTITY);
        let bad = [
            RegistrationConfig {
                sigma0: 0.0,
                ..quick_cfg()
            },
            RegistrationConfig {
                generations: 0,
                ..quick_cfg()
            },
            RegistrationConfig {
                population: Some(1),
                ..quick_cfg()
            },
            RegistrationConfig {
                step_mm: -1.0,
                ..quick_cfg()
            },
        ];
        for cfg in bad {
            let err =
                register(vol.clone(), cam, fixed.clone(), &Pose6::IDENTITY, &cfg).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
        }
        let other = make_camera((16, 16), 12.768, 1012.0, 506.0).unwrap();
        let err = register(
            vol.clone(),
            other,
            fixed.clone(),
            &Pose6::IDENTITY,
            &quick_cfg(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        let nan = Pose6::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(register(vol, cam, fixed, &nan, &quick_cfg()).is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let cfg: RegistrationConfig =
            serde_json::from_str(r#"{"optimizer": "cma-es", "population": 50}"#).unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::CmaEs);
        assert_eq!(cfg.population, Some(50));
        assert_eq!(cfg.generations, 50);
        assert_eq!(cfg.sigma0, 10.0);
        assert!(serde_json::from_str::<RegistrationConfig>(r#"{"sigma": 3}"#).is_err());
    }

    #[test]
    fn samplers_are_seeded() {
        let a = sample_initial_offset(&mut substream(5, 1));
        let b = sample_initial_offset(&mut substream(5, 1));
        let c = sample_initial_offset(&mut substream(5, 2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            sample_test_pose(&mut substream(1, 0)),
            sample_test_pose(&mut substream(1, 0))
        );
    }

    #[test]
    fn truncated_offsets_respect_bounds() {
        let mut rng = substream(2, 0);
        for _ in 0..2000 {
            let p = sample_initial_offset_truncated(&mut rng, 10.0, 15.0).unwrap();
            let v = p.to_array();
            assert!(v[..3].iter().all(|r| r.abs() <= 10.0));
            assert!(v[3..].iter().all(|t| t.abs() <= 15.0));
        }
        assert!(sample_initial_offset_truncated(&mut rng, 0.0, 15.0).is_err());
    }
}
