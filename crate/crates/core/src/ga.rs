//! Genetic-algorithm calibration of IDM and GHR parameters.
//!
//! Real-coded chromosomes inside the feasible box, tournament selection,
//! uniform crossover, Gaussian mutation clipped to the box, and elitism.
//! Fitness is the mean closed-loop spacing MSE over the calibration events.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::spacing_mse;
use crate::physics::{Bounds, FeasibleBox, GhrBox, GhrParams, IdmParams};
use crate::rollout::{rollout, AccelerationPolicy, GhrPolicy, IdmPolicy, DEFAULT_WARMUP};
use crate::types::CfEvent;

#[derive(Debug, Error)]
pub enum GaError {
    #[error("no events to calibrate on")]
    NoEvents,
    #[error("invalid box for {0}")]
    InvalidBox(&'static str),
    #[error("invalid GA config: {0}")]
    Config(String),
    #[error("fitness is non-finite for every candidate")]
    AllNonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsKind {
    Idm,
    Ghr,
}

impl PhysicsKind {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            PhysicsKind::Idm => &IdmParams::NAMES,
            PhysicsKind::Ghr => &GhrParams::NAMES,
        }
    }

    fn bounds(self, b: &FeasibleBox) -> Vec<Bounds> {
        match self {
            PhysicsKind::Idm => b.idm.to_array().to_vec(),
            PhysicsKind::Ghr => b.ghr.to_array().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of each dimension's width.
    pub mutation_sigma: f64,
    pub tournament_size: usize,
    pub elitism: usize,
    pub seed: u64,
    pub warmup: usize,
    /// Calibrate on a seeded random subset of at most this many events.
    pub max_events: Option<usize>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 100,
            generations: 200,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            mutation_sigma: 0.1,
            tournament_size: 3,
            elitism: 2,
            seed: 0,
            warmup: DEFAULT_WARMUP,
            max_events: None,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let rate = |x: f64| (0.0..=1.0).contains(&x);
        if self.population < 2 {
            return Err(GaError::Config("population must be at least 2".into()));
        }
        if !rate(self.crossover_rate) || !rate(self.mutation_rate) {
            return Err(GaError::Config("rates must lie in [0, 1]".into()));
        }
        if self.elitism >= self.population {
            return Err(GaError::Config("elitism must be smaller than the population".into()));
        }
        if self.tournament_size == 0 || !(self.mutation_sigma >= 0.0) {
            return Err(GaError::Config("tournament size and mutation sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Best parameters found and the best fitness after each generation
/// (entry 0 is the initial population).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kind: PhysicsKind,
    pub params: Vec<f64>,
    pub best_fitness: f64,
    pub history: Vec<f64>,
}

impl Calibration {
    pub fn idm(&self) -> Option<IdmParams> {
        (self.kind == PhysicsKind::Idm).then(|| IdmParams::from_slice(&self.params))
    }

    pub fn ghr(&self) -> Option<GhrParams> {
        (self.kind == PhysicsKind::Ghr).then(|| GhrParams::from_slice(&self.params))
    }

    pub fn named_params(&self) -> Vec<(&'static str, f64)> {
        self.kind.names().iter().copied().zip(self.params.iter().copied()).collect()
    }
}

/// Policy for a parameter vector of the given kind.
pub fn physics_policy(kind: PhysicsKind, params: &[f64]) -> Box<dyn AccelerationPolicy + Send> {
    match kind {
        PhysicsKind::Idm => Box::new(IdmPolicy(IdmParams::from_slice(params))),
        PhysicsKind::Ghr => Box::new(GhrPolicy(GhrParams::from_slice(params))),
    }
}

/// Mean spacing MSE of rollouts under `params`; infinite when a rollout fails.
pub fn fitness(kind: PhysicsKind, params: &[f64], events: &[CfEvent], warmup: usize) -> f64 {
    let mut total = 0.0;
    for e in events {
        let mut policy = physics_policy(kind, params);
        let mse = rollout(e, policy.as_mut(), warmup)
            .ok()
            .and_then(|r| spacing_mse(&r.simulated, e, warmup).ok());
        match mse {
            Some(m) if m.is_finite() => total += m,
            _ => return f64::INFINITY,
        }
    }
    total / events.len() as f64
}

fn check_bounds(kind: PhysicsKind, bounds: &[Bounds]) -> Result<(), GaError> {
    for (name, b) in kind.names().iter().zip(bounds) {
        if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi) {
            return Err(GaError::InvalidBox(name));
        }
    }
    Ok(())
}

fn repair(kind: PhysicsKind, genes: &mut [f64], bounds: &[Bounds]) {
    if kind == PhysicsKind::Ghr {
        genes[0] = GhrBox::repair_gain(genes[0]);
    }
    for (g, b) in genes.iter_mut().zip(bounds) {
        *g = b.clamp(*g);
    }
}

fn sortable(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

/// Runs the GA. Events beyond `max_events` are subsampled with the GA seed.
pub fn calibrate(
    kind: PhysicsKind,
    events: &[CfEvent],
    feasible: &FeasibleBox,
    cfg: &GaConfig,
) -> Result<Calibration, GaError> {
    cfg.validate()?;
    if events.is_empty() {
        return Err(GaError::NoEvents);
    }
    let bounds = kind.bounds(feasible);
    check_bounds(kind, &bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let subset: Vec<CfEvent>;
    let events = match cfg.max_events {
        Some(m) if m < events.len() => {
            let mut idx = sample(&mut rng, events.len(), m).into_vec();
            idx.sort_unstable();
            subset = idx.into_iter().map(|i| events[i].clone()).collect();
            &subset[..]
        }
        _ => events,
    };

    let evaluate = |pop: &[Vec<f64>]| -> Vec<f64> {
        pop.par_iter()
            .map(|p| sortable(fitness(kind, p, events, cfg.warmup)))
            .collect()
    };

    let mut pop: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| {
            let mut g: Vec<f64> = bounds
                .iter()
                .map(|b| b.lo + (b.hi - b.lo) * rng.random::<f64>())
                .collect();
            repair(kind, &mut g, &bounds);
            g
        })
        .collect();
    let mut fit = evaluate(&pop);

    let argmin = |fit: &[f64]| -> usize {
        let mut best = 0;
        for (i, f) in fit.iter().enumerate() {
            if *f < fit[best] {
                best = i;
            }
        }
        best
    };
    let mut best_i = argmin(&fit);
    if !fit[best_i].is_finite() {
        return Err(GaError::AllNonFinite);
    }
    let mut best = (pop[best_i].clone(), fit[best_i]);
    let mut history = vec![best.1];

    for _ in 0..cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));

        let mut next: Vec<Vec<f64>> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = order[..cfg.elitism].iter().map(|&i| fit[i]).collect();

        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let mut winner = rng.random_range(0..pop.len());
            for _ in 1..cfg.tournament_size {
                let c = rng.random_range(0..pop.len());
                if fit[c] < fit[winner] {
                    winner = c;
                }
            }
            winner
        };
        let mut children = Vec::with_capacity(cfg.population - cfg.elitism);
        while next.len() + children.len() < cfg.population {
            let p1 = tournament(&mut rng);
            let p2 = tournament(&mut rng);
            let mut child = pop[p1].clone();
            if rng.random::<f64>() < cfg.crossover_rate {
                for (g, other) in child.iter_mut().zip(&pop[p2]) {
                    if rng.random::<bool>() {
                        *g = *other;
                    }
                }
            }
            for (g, b) in child.iter_mut().zip(&bounds) {
                if rng.random::<f64>() < cfg.mutation_rate {
                    let z: f64 = rng.sample(StandardNormal);
                    *g += z * cfg.mutation_sigma * b.width();
                }
            }
            repair(kind, &mut child, &bounds);
            children.push(child);
        }
        next_fit.extend(evaluate(&children));
        next.extend(children);
        pop = next;
        fit = next_fit;

        best_i = argmin(&fit);
        if fit[best_i] < best.1 {
            best = (pop[best_i].clone(), fit[best_i]);
        }
        history.push(best.1);
    }

    Ok(Calibration {
        kind,
        params: best.0,
        best_fitness: best.1,
        history,
    })
}

/// Calibration output with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model: PhysicsKind,
    #[serde(rename = "box")]
    pub feasible: FeasibleBox,
    pub config: GaConfig,
    pub params: std::collections::BTreeMap<String, f64>,
    pub best_fitness: f64,
    pub history: Vec<f64>,
}

impl CalibrationReport {
    pub fn new(cal: &Calibration, feasible: &FeasibleBox, config: &GaConfig) -> Self {
        Self {
            model: cal.kind,
            feasible: *feasible,
            config: *config,
            params: cal
                .named_params()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            best_fitness: cal.best_fitness,
            history: cal.history.clone(),
        }
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            kind: self.model,
            params: self.model.names().iter().map(|n| self.params[*n]).collect(),
            best_fitness: self.best_fitness,
            history: self.history.clone(),
        }
    }
}
