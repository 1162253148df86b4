//! Classic CMA-ES, split into pure pieces so the learning-rate layer can sit
//! between "compute the update" and "apply the update".
//!
//! `compute_update` returns the unit-rate increments; `apply_update` applies
//! them scaled by `(rate_mean, rate_cov)`. With both rates equal to one the
//! result is exactly the textbook (Hansen) update.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How to pick λ when none is given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationRule {
    /// `4 + ⌊ln d⌋`: the small fixed population used with learning-rate adaptation.
    #[default]
    Small,
    /// `4 + ⌊3 ln d⌋`: the conventional CMA-ES default.
    Conventional,
}

impl PopulationRule {
    pub fn population(self, dim: usize) -> usize {
        let ln = (dim as f64).ln();
        match self {
            PopulationRule::Small => 4 + ln.floor() as usize,
            PopulationRule::Conventional => 4 + (3.0 * ln).floor() as usize,
        }
    }
}

/// Strategy constants; all functions of `(d, λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyParams {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    /// E‖N(0, I)‖
    pub chi_n: f64,
}

impl StrategyParams {
    pub fn new(dim: usize, lambda: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if lambda < 2 {
            return Err(Error::invalid(format!(
                "population must be at least 2, got {lambda}"
            )));
        }
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu =
            (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(StrategyParams {
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        })
    }
}

/// Full search-distribution state `N(m, σ² C)` plus evolution paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub generation: u64,
    pub params: StrategyParams,
    /// Number of updates where the eigenvalue floor had to be applied.
    pub floor_events: u64,
}

/// A sampled point `x = m + σ A z` with `A Aᵀ = C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

impl Sample {
    pub fn evaluated(self, y: f64) -> Candidate {
        Candidate {
            x: self.x,
            z: self.z,
            y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: f64,
}

/// Unit-rate increments of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    /// Δm
    pub mean_shift: DVector<f64>,
    /// Additive change of C (not of σ²C).
    pub cov_shift: DMatrix<f64>,
    /// CSA factor: σ_next = σ · sigma_factor.
    pub sigma_factor: f64,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
}

impl UpdateDelta {
    /// ΔΣ = σ_next² C_next − σ² C, the increment on the full covariance.
    pub fn sigma_increment(&self, state: &CmaState) -> DMatrix<f64> {
        let s_next = state.sigma * self.sigma_factor;
        (&state.cov + &self.cov_shift) * (s_next * s_next)
            - &state.cov * (state.sigma * state.sigma)
    }
}

/// Fresh state with `C = I` and zero paths. `lambda = None` uses [`PopulationRule::Small`].
pub fn cma_init(m0: &[f64], sigma0: f64, lambda: Option<usize>) -> Result<CmaState> {
    if m0.is_empty() {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(sigma0.is_finite() && sigma0 > 0.0) {
        return Err(Error::invalid(format!(
            "initial step size must be positive, got {sigma0}"
        )));
    }
    if m0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial mean must be finite"));
    }
    let d = m0.len();
    let lambda = lambda.unwrap_or_else(|| PopulationRule::Small.population(d));
    Ok(CmaState {
        mean: DVector::from_column_slice(m0),
        sigma: sigma0,
        cov: DMatrix::identity(d, d),
        p_sigma: DVector::zeros(d),
        p_c: DVector::zeros(d),
        generation: 0,
        params: StrategyParams::new(d, lambda)?,
        floor_events: 0,
    })
}

impl CmaState {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lambda(&self) -> usize {
        self.params.lambda
    }

    fn eigen(&self) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
        let eig = SymmetricEigen::new(self.cov.clone());
        if eig.eigenvalues.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::numerical(format!(
                "covariance is not positive-definite (eigenvalues {:?})",
                eig.eigenvalues.as_slice()
            )));
        }
        Ok(eig)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut e: Vec<f64> = SymmetricEigen::new(self.cov.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        e.sort_by(|a, b| a.total_cmp(b));
        e
    }

    /// `A = B D^{1/2}` with `A Aᵀ = C`.
    pub fn sqrt_cov(&self) -> Result<DMatrix<f64>> {
        let eig = self.eigen()?;
        let d = eig.eigenvalues.map(f64::sqrt);
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d))
    }

    /// `C^{-1/2} = B D^{-1/2} Bᵀ`.
    pub fn inv_sqrt_cov(&self) -> Result<DMatrix<f64>> {
        let eig = self.eigen()?;
        let d = eig.eigenvalues.map(|e| 1.0 / e.sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
    }

    /// σ² C
    pub fn full_cov(&self) -> DMatrix<f64> {
        &self.cov * (self.sigma * self.sigma)
    }
}

/// Draws λ points from `N(m, σ² C)`.
pub fn sample(state: &CmaState, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    let a = state.sqrt_cov()?;
    let d = state.dim();
    Ok((0..state.lambda())
        .map(|_| {
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let x = &state.mean + (&a * &z) * state.sigma;
            Sample { x, z }
        })
        .collect())
}

/// Indices of `candidates` sorted by `(y, index)`.
pub fn ranking(candidates: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| candidates[a].y.total_cmp(&candidates[b].y).then(a.cmp(&b)));
    idx
}

/// Unit-rate CMA-ES increments for one generation. Does not touch `state`.
pub fn compute_update(state: &CmaState, candidates: &[Candidate]) -> Result<UpdateDelta> {
    let p = &state.params;
    if candidates.len() != p.lambda {
        return Err(Error::invalid(format!(
            "expected {} candidates, got {}",
            p.lambda,
            candidates.len()
        )));
    }
    if let Some(c) = candidates.iter().find(|c| !c.y.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite objective value {}",
            c.y
        )));
    }
    let d = state.dim();
    let n = d as f64;
    let order = ranking(candidates);
    let steps: Vec<DVector<f64>> = order[..p.mu]
        .iter()
        .map(|&i| (&candidates[i].x - &state.mean) / state.sigma)
        .collect();
    let mut y_w = DVector::zeros(d);
    for (w, y) in p.weights.iter().zip(&steps) {
        y_w += y * *w;
    }
    let mean_shift = &y_w * state.sigma;

    let inv_sqrt = state.inv_sqrt_cov()?;
    let p_sigma = &state.p_sigma * (1.0 - p.c_sigma)
        + (&inv_sqrt * &y_w) * (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
    let ps_norm = p_sigma.norm();
    let sigma_factor = ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();

    let t = (state.generation + 1) as f64;
    let h_sigma = ps_norm / (1.0 - (1.0 - p.c_sigma).powf(2.0 * t)).sqrt()
        < (1.4 + 2.0 / (n + 1.0)) * p.chi_n;
    let h = if h_sigma { 1.0 } else { 0.0 };
    let p_c = &state.p_c * (1.0 - p.c_c) + &y_w * (h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt());

    let decay = p.c_1 + p.c_mu - (1.0 - h) * p.c_1 * p.c_c * (2.0 - p.c_c);
    let mut cov_shift = &state.cov * (-decay) + (&p_c * p_c.transpose()) * p.c_1;
    for (w, y) in p.weights.iter().zip(&steps) {
        cov_shift += (y * y.transpose()) * (p.c_mu * w);
    }
    Ok(UpdateDelta {
        mean_shift,
        cov_shift,
        sigma_factor,
        p_sigma,
        p_c,
    })
}

/// Advances the state by `rate_mean·Δm` and `rate_cov·ΔΣ`.
///
/// At `rate_cov == 1` the native `(σ·factor, C + ΔC)` form is used, which is the
/// classic update. Otherwise `Σ' = σ²C + rate_cov·ΔΣ` is split as
/// `σ' = σ·factor^rate_cov`, `C' = Σ'/σ'²`. Eigenvalues of `C'` are floored at
/// `1e-12·tr(C')/d`; every use of the floor bumps `floor_events`.
pub fn apply_update(
    state: &CmaState,
    delta: &UpdateDelta,
    rate_mean: f64,
    rate_cov: f64,
) -> Result<CmaState> {
    for (name, r) in [("mean", rate_mean), ("covariance", rate_cov)] {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::invalid(format!(
                "{name} learning rate must lie in (0, 1], got {r}"
            )));
        }
    }
    let mean = &state.mean + &delta.mean_shift * rate_mean;
    let (sigma, mut cov) = if rate_cov == 1.0 {
        (
            state.sigma * delta.sigma_factor,
            &state.cov + &delta.cov_shift,
        )
    } else {
        let full = state.full_cov() + delta.sigma_increment(state) * rate_cov;
        let sigma = state.sigma * delta.sigma_factor.powf(rate_cov);
        (sigma, full / (sigma * sigma))
    };
    cov = (&cov + cov.transpose()) * 0.5;
    if !(sigma.is_finite() && sigma > 0.0) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "update produced invalid step size {sigma} or covariance"
        )));
    }

    let mut floor_events = state.floor_events;
    let d = state.dim();
    let floor = 1e-12 * cov.trace() / d as f64;
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|&e| e < floor) {
        floor_events += 1;
        let clamped = eig.eigenvalues.map(|e| e.max(floor));
        cov = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
    }

    Ok(CmaState {
        mean,
        sigma,
        cov,
        p_sigma: delta.p_sigma.clone(),
        p_c: delta.p_c.clone(),
        generation: state.generation + 1,
        params: state.params.clone(),
        floor_events,
    })
}

/// One classic generation from already evaluated candidates.
pub fn classic_step(state: &CmaState, candidates: &[Candidate]) -> Result<CmaState> {
    let delta = compute_update(state, candidates)?;
    apply_update(state, &delta, 1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(x: &DVector<f64>) -> f64 {
        x.norm_squared()
    }

    fn evaluate(samples: Vec<Sample>, f: impl Fn(&DVector<f64>) -> f64) -> Vec<Candidate> {
        samples
            .into_iter()
            .map(|s| {
                let y = f(&s.x);
                s.evaluated(y)
            })
            .collect()
    }

    #[test]
    fn init_defaults() {
        let s = cma_init(&[0.0; 6], 10.0, None).unwrap();
        assert_eq!(s.lambda(), 5);
        assert_eq!(s.sigma, 10.0);
        assert_eq!(s.cov, DMatrix::identity(6, 6));
        assert_eq!(s.generation, 0);
        assert_eq!(PopulationRule::Conventional.population(6), 9);
        assert!(cma_init(&[0.0; 6], 0.0, None).is_err());
        assert!(cma_init(&[0.0; 6], -1.0, None).is_err());
        assert!(cma_init(&[], 1.0, None).is_err());
        assert!(cma_init(&[0.0; 6], 1.0, Some(1)).is_err());
    }

    #[test]
    fn strategy_constants_match_reference_values() {
        // d = 6, λ = 9 (conventional): μ = 4, w ∝ ln 5 - ln i
        let p = StrategyParams::new(6, 9).unwrap();
        assert_eq!(p.mu, 4);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.weights.windows(2).all(|w| w[0] > w[1]));
        assert!((p.mu_eff - 2.8406).abs() < 1e-3, "{}", p.mu_eff);
        assert!(p.c_1 + p.c_mu <= 1.0);
    }

    #[test]
    fn sampler_mean_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = cma_init(&[0.0; 3], 1.0, Some(1000)).unwrap();
        let mut sum = DVector::zeros(3);
        let mut norm1 = 0.0;
        for _ in 0..100 {
            for smp in sample(&s, &mut rng).unwrap() {
                sum += &smp.x;
                norm1 += smp.x.norm();
            }
        }
        let mean = sum / 1e5;
        assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean}");

        s.sigma = 10.0;
        let mut norm10 = 0.0;
        for _ in 0..10 {
            for smp in sample(&s, &mut rng).unwrap() {
                norm10 += smp.x.norm();
            }
        }
        let ratio = (norm10 / 1e4) / (norm1 / 1e5);
        assert!((ratio - 10.0).abs() < 0.5, "{ratio}");
    }

    #[test]
    fn sample_satisfies_construction_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = cma_init(&[1.0, 2.0], 2.0, Some(4)).unwrap();
        s.cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = s.sqrt_cov().unwrap();
        assert!((&a * a.transpose() - &s.cov).abs().max() < 1e-12);
        for smp in sample(&s, &mut rng).unwrap() {
            let rebuilt = &s.mean + (&a * &smp.z) * s.sigma;
            assert_eq!(rebuilt, smp.x);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = cma_init(&[0.0; 6], 1.0, None).unwrap();
        let a = sample(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indefinite_covariance_is_reported() {
        let mut s = cma_init(&[0.0; 2], 1.0, None).unwrap();
        s.cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = sample(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn update_input_validation() {
        let s = cma_init(&[0.0; 6], 1.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cands = evaluate(sample(&s, &mut rng).unwrap(), sphere);
        assert!(compute_update(&s, &cands[..4]).is_err());
        cands[2].y = f64::NAN;
        assert!(matches!(
            compute_update(&s, &cands),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn candidates_at_mean_do_not_move_it() {
        let s = cma_init(&[1.0, -2.0, 3.0], 1.0, None).unwrap();
        let cands: Vec<Candidate> = (0..s.lambda())
            .map(|i| Candidate {
                x: s.mean.clone(),
                z: DVector::zeros(3),
                y: i as f64,
            })
            .collect();
        let d = compute_update(&s, &cands).unwrap();
        assert!(d.mean_shift.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_shift_points_downhill_on_sphere() {
        let s = cma_init(&[5.0; 6], 1.0, None).unwrap();
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cands = evaluate(sample(&s, &mut rng).unwrap(), sphere);
            let d = compute_update(&s, &cands).unwrap();
            if d.mean_shift.dot(&(-&s.mean)) > 0.0 {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn classic_converges_on_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = cma_init(&[5.0; 6], 1.0, None).unwrap();
        let mut evals = 0;
        let mut best = f64::INFINITY;
        while evals < 2000 && best >= 1e-10 {
            let cands = evaluate(sample(&s, &mut rng).unwrap(), sphere);
            evals += cands.len();
            best = cands.iter().map(|c| c.y).fold(best, f64::min);
            s = classic_step(&s, &cands).unwrap();
        }
        assert!(best < 1e-10, "best {best} after {evals}");
        assert_eq!(s.floor_events, 0);
    }

    #[test]
    fn apply_update_rate_checks_and_scaling() {
        let s = cma_init(&[5.0; 6], 1.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cands = evaluate(sample(&s, &mut rng).unwrap(), sphere);
        let d = compute_update(&s, &cands).unwrap();
        assert!(apply_update(&s, &d, 0.0, 1.0).is_err());
        assert!(apply_update(&s, &d, 1.0, 1.5).is_err());

        let full = apply_update(&s, &d, 1.0, 1.0).unwrap();
        assert_eq!(full, classic_step(&s, &cands).unwrap());

        let half = apply_update(&s, &d, 0.5, 1.0).unwrap();
        let midpoint = (&s.mean + &full.mean) * 0.5;
        assert!((half.mean - midpoint).abs().max() < 1e-12);

        let tiny = apply_update(&s, &d, 1e-12, 1e-12).unwrap();
        assert!((&tiny.mean - &s.mean).abs().max() < 1e-9);
        assert!((tiny.sigma - s.sigma).abs() < 1e-9);
        assert!((&tiny.cov - &s.cov).abs().max() < 1e-9);
        assert_eq!(tiny.generation, 1);
    }

    #[test]
    fn partial_covariance_rate_interpolates_full_covariance() {
        let s = cma_init(&[5.0; 4], 2.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cands = evaluate(sample(&s, &mut rng).unwrap(), sphere);
        let d = compute_update(&s, &cands).unwrap();
        let inc = d.sigma_increment(&s);
        assert!((&inc - inc.transpose()).abs().max() < 1e-12);
        let next = apply_update(&s, &d, 1.0, 0.3).unwrap();
        let want = s.full_cov() + inc * 0.3;
        assert!((next.full_cov() - want).abs().max() < 1e-10);
    }

    #[test]
    fn covariance_stays_positive_definite() {
        // 50 random separable quadratics x 200 generations = 10^4 updates
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let scales: Vec<f64> = (0..6).map(|_| rng.random_range(1.0..100.0)).collect();
            let f = |x: &DVector<f64>| x.iter().zip(&scales).map(|(v, a)| a * v * v).sum::<f64>();
            let mut s = cma_init(&[1.0; 6], 0.5, None).unwrap();
            for _ in 0..200 {
                let cands = evaluate(sample(&s, &mut rng).unwrap(), f);
                s = classic_step(&s, &cands).unwrap();
                assert!((&s.cov - s.cov.transpose()).abs().max() < 1e-12);
            }
            assert!(s.eigenvalues()[0] > 0.0);
            assert_eq!(s.floor_events, 0);
        }
    }
}
