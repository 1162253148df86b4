//! Ask/tell driver over the pure CMA-ES and LRA state transitions.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmaes::{classic_step, cma_init, sample, Candidate, CmaState, Sample};
use crate::error::{Error, Result};
use crate::lra::{lra_step, LraParams, LraState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// CMA-ES with learning-rate adaptation.
    #[default]
    LraCma,
    /// Classic CMA-ES (both learning rates fixed at 1).
    CmaEs,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lra-cma" => Ok(OptimizerKind::LraCma),
            "cma-es" => Ok(OptimizerKind::CmaEs),
            other => Err(Error::invalid(format!(
                "unknown optimizer {other:?} (expected lra-cma or cma-es)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::LraCma => "lra-cma",
            OptimizerKind::CmaEs => "cma-es",
        })
    }
}

/// One line of the per-generation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Generations completed after this update.
    pub t: u64,
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Eigenvalues of C, ascending.
    pub eigenvalues: Vec<f64>,
    /// Best objective value seen so far, including injected points.
    pub best_y: f64,
    /// Best objective value of this generation.
    pub generation_best_y: f64,
    pub delta_m: f64,
    pub delta_sigma: f64,
    pub snr_m: Option<f64>,
    pub snr_sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    cma: CmaState,
    lra: Option<LraState>,
    rng: ChaCha8Rng,
    best: Option<(DVector<f64>, f64)>,
    evaluations: usize,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        m0: &[f64],
        sigma0: f64,
        lambda: Option<usize>,
        lra: LraParams,
        seed: u64,
    ) -> Result<Self> {
        let cma = cma_init(m0, sigma0, lambda)?;
        let lra = match kind {
            OptimizerKind::LraCma => Some(LraState::new(m0.len(), lra)?),
            OptimizerKind::CmaEs => None,
        };
        Ok(Optimizer {
            kind,
            cma,
            lra,
            rng: ChaCha8Rng::seed_from_u64(seed),
            best: None,
            evaluations: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn cma(&self) -> &CmaState {
        &self.cma
    }

    pub fn lra(&self) -> Option<&LraState> {
        self.lra.as_ref()
    }

    pub fn lambda(&self) -> usize {
        self.cma.lambda()
    }

    /// Candidates passed to `tell` so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn best(&self) -> Option<(&DVector<f64>, f64)> {
        self.best.as_ref().map(|(x, y)| (x, *y))
    }

    /// Records an externally evaluated point for best-ever tracking only.
    pub fn observe(&mut self, x: &[f64], y: f64) {
        self.consider(DVector::from_column_slice(x), y);
    }

    fn consider(&mut self, x: DVector<f64>, y: f64) {
        // strict: earlier points win ties
        if self.best.as_ref().is_none_or(|(_, b)| y < *b) {
            self.best = Some((x, y));
        }
    }

    pub fn ask(&mut self) -> Result<Vec<Sample>> {
        sample(&self.cma, &mut self.rng)
    }

    /// Consumes one evaluated generation, in sampling order.
    pub fn tell(&mut self, candidates: Vec<Candidate>) -> Result<GenerationRecord> {
        let (cma, lra) = match &self.lra {
            Some(lra) => {
                let (c, l) = lra_step(&self.cma, lra, &candidates)?;
                (c, Some(l))
            }
            None => (classic_step(&self.cma, &candidates)?, None),
        };
        self.cma = cma;
        self.lra = lra;
        self.evaluations += candidates.len();
        let mut gen_best = f64::INFINITY;
        for c in candidates {
            gen_best = gen_best.min(c.y);
            self.consider(c.x, c.y);
        }
        Ok(GenerationRecord {
            t: self.cma.generation,
            mean: self.cma.mean.iter().copied().collect(),
            sigma: self.cma.sigma,
            eigenvalues: self.cma.eigenvalues(),
            best_y: self.best.as_ref().map_or(f64::INFINITY, |b| b.1),
            generation_best_y: gen_best,
            delta_m: self.lra.as_ref().map_or(1.0, |l| l.rate_mean),
            delta_sigma: self.lra.as_ref().map_or(1.0, |l| l.rate_cov),
            snr_m: self.lra.as_ref().map(|l| l.last_snr_mean),
            snr_sigma: self.lra.as_ref().map(|l| l.last_snr_cov),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOutcome {
    pub best_x: Vec<f64>,
    pub best_y: f64,
    pub evaluations: usize,
    pub generations: u64,
    pub trace: Vec<GenerationRecord>,
}

/// Sequential ask/evaluate/tell loop on a plain function of a slice.
///
/// Stops once `max_evals` would be exceeded by another generation or the best
/// value drops below `target`.
pub fn minimize(
    opt: &mut Optimizer,
    mut f: impl FnMut(&[f64]) -> f64,
    max_evals: usize,
    target: Option<f64>,
) -> Result<MinimizeOutcome> {
    let mut trace = Vec::new();
    while opt.evaluations() + opt.lambda() <= max_evals {
        let cands = opt
            .ask()?
            .into_iter()
            .map(|s| {
                let y = f(s.x.as_slice());
                s.evaluated(y)
            })
            .collect();
        let rec = opt.tell(cands)?;
        let done = target.is_some_and(|t| rec.best_y < t);
        trace.push(rec);
        if done {
            break;
        }
    }
    let (x, y) = opt
        .best()
        .ok_or_else(|| Error::invalid("budget too small for a single generation"))?;
    Ok(MinimizeOutcome {
        best_x: x.iter().copied().collect(),
        best_y: y,
        evaluations: opt.evaluations(),
        generations: opt.cma().generation,
        trace,
    })
}
