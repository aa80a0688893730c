//! Spacing MSE, collision rate, and the seven-model benchmark.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ga::{physics_policy, Calibration};
use crate::meta::{fine_tune, MetaConfig, MetaError, NetworkObjective, TaskSamples};
use crate::nn::ModelParams;
use crate::pidl::{make_samples, NetworkPolicy, NetworkSpec, PidlError};
use crate::rollout::{rollout, AccelerationPolicy, RolloutError, RolloutResult, DEFAULT_WARMUP};
use crate::types::{CfEvent, DriverTask};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: simulated {simulated} vs observed {observed} states")]
    LengthMismatch { simulated: usize, observed: usize },
    #[error("no steps after warmup {warmup} in an event of {len} states")]
    NoSteps { warmup: usize, len: usize },
    #[error("no rollouts to score")]
    Empty,
    #[error("{model}, event {event_id}: {source}")]
    Rollout {
        model: String,
        event_id: String,
        #[source]
        source: RolloutError,
    },
    #[error("{model}, driver {driver_id}: fine-tuning failed: {source}")]
    FineTune {
        model: String,
        driver_id: String,
        #[source]
        source: MetaError,
    },
    #[error(transparent)]
    Samples(#[from] PidlError),
}

/// Mean of `(S_sim - S_obs)^2` over the steps after warmup.
///
/// A warmup of zero is treated as one, as in the rollout.
pub fn spacing_mse(simulated: &CfEvent, observed: &CfEvent, warmup: usize) -> Result<f64, EvalError> {
    let (ns, no) = (simulated.states.len(), observed.states.len());
    if ns != no {
        return Err(EvalError::LengthMismatch {
            simulated: ns,
            observed: no,
        });
    }
    let warm = warmup.max(1);
    if warm >= no {
        return Err(EvalError::NoSteps { warmup, len: no });
    }
    let sum: f64 = simulated.states[warm..]
        .iter()
        .zip(&observed.states[warm..])
        .map(|(s, o)| (s.spacing - o.spacing).powi(2))
        .sum();
    Ok(sum / (no - warm) as f64)
}

/// Collision count and per-mille rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRate {
    pub collisions: usize,
    pub total: usize,
    pub permille: f64,
}

impl CollisionRate {
    pub fn from_counts(collisions: usize, total: usize) -> Result<Self, EvalError> {
        if total == 0 {
            return Err(EvalError::Empty);
        }
        Ok(Self {
            collisions,
            total,
            permille: 1000.0 * collisions as f64 / total as f64,
        })
    }
}

pub fn collision_rate(results: &[RolloutResult]) -> Result<CollisionRate, EvalError> {
    CollisionRate::from_counts(results.iter().filter(|r| r.collided).count(), results.len())
}

/// Scores of one model on one test driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverReport {
    pub driver_id: String,
    pub events: usize,
    /// Mean over the driver's query events of the per-event spacing MSE.
    pub mse_spacing: f64,
    pub collisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    /// Mean over all query events of the per-event spacing MSE, m².
    pub mse_spacing: f64,
    pub collision_rate_permille: f64,
    pub collision_count: usize,
    pub total_events: usize,
    pub per_driver: Vec<DriverReport>,
    pub collided_events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<ModelReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == name)
    }

    /// Table-2-shaped CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,mse_spacing,collision_rate_permille,collision_count\n");
        for m in &self.models {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.model, m.mse_spacing, m.collision_rate_permille, m.collision_count
            ));
        }
        out
    }
}

/// Rolls out every query event of every task under the policy built for
/// that task (by index) and aggregates both metrics.
pub fn evaluate_policy<'p, F>(
    name: &str,
    tasks: &[DriverTask],
    warmup: usize,
    make_policy: F,
) -> Result<ModelReport, EvalError>
where
    F: Fn(usize, &DriverTask) -> Result<Box<dyn AccelerationPolicy + Send + 'p>, EvalError> + Sync,
{
    let per_task: Vec<Result<(DriverReport, Vec<String>, Vec<f64>), EvalError>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let scored: Vec<Result<(f64, bool), EvalError>> = task
                .query
                .par_iter()
                .map(|e| {
                    let mut policy = make_policy(i, task)?;
                    let r = rollout(e, policy.as_mut(), warmup).map_err(|source| EvalError::Rollout {
                        model: name.to_string(),
                        event_id: e.event_id.clone(),
                        source,
                    })?;
                    Ok((spacing_mse(&r.simulated, e, warmup)?, r.collided))
                })
                .collect();
            let mut mses = Vec::with_capacity(scored.len());
            let mut collided = Vec::new();
            for (e, s) in task.query.iter().zip(scored) {
                let (m, c) = s?;
                mses.push(m);
                if c {
                    collided.push(e.event_id.clone());
                }
            }
            if mses.is_empty() {
                return Err(EvalError::Empty);
            }
            let report = DriverReport {
                driver_id: task.driver_id.clone(),
                events: mses.len(),
                mse_spacing: mses.iter().sum::<f64>() / mses.len() as f64,
                collisions: collided.len(),
            };
            Ok((report, collided, mses))
        })
        .collect();

    let mut per_driver = Vec::new();
    let mut collided_events = Vec::new();
    let mut all = Vec::new();
    for r in per_task {
        let (d, c, m) = r?;
        per_driver.push(d);
        collided_events.extend(c);
        all.extend(m);
    }
    let rate = CollisionRate::from_counts(collided_events.len(), all.len())?;
    Ok(ModelReport {
        model: name.to_string(),
        mse_spacing: all.iter().sum::<f64>() / all.len() as f64,
        collision_rate_permille: rate.permille,
        collision_count: rate.collisions,
        total_events: rate.total,
        per_driver,
        collided_events,
    })
}

/// One entry of the benchmark suite.
#[derive(Debug, Clone)]
pub enum SuiteModel {
    /// Calibrated physics model, used as is on every driver.
    Physics(Calibration),
    /// Network fine-tuned on each test driver's support set before rollout.
    Network { spec: NetworkSpec, theta: ModelParams },
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub model: SuiteModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub warmup: usize,
    /// Step size and number of steps for per-driver fine-tuning.
    pub finetune: MetaConfig,
    /// Window stride over support events during fine-tuning.
    pub support_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            finetune: MetaConfig::default(),
            support_stride: 1,
        }
    }
}

/// Parameters of a network after fine-tuning on one driver's support set.
pub fn adapt_to_driver(
    spec: &NetworkSpec,
    theta: &ModelParams,
    task: &DriverTask,
    finetune: &MetaConfig,
    support_stride: usize,
) -> Result<ModelParams, MetaError> {
    let samples = TaskSamples {
        driver_id: task.driver_id.clone(),
        support: make_samples(&task.support, spec.window, support_stride, &spec.scaler)?,
        query: Vec::new(),
    };
    fine_tune(theta, &samples, finetune, &NetworkObjective { spec: *spec })
}

/// Scores every suite entry on the query sets of `tasks`.
pub fn run_benchmark(tasks: &[DriverTask], suite: &[SuiteEntry], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let mut models = Vec::with_capacity(suite.len());
    for entry in suite {
        let report = match &entry.model {
            SuiteModel::Physics(cal) => evaluate_policy(&entry.name, tasks, cfg.warmup, |_, _| {
                Ok(physics_policy(cal.kind, &cal.params) as Box<dyn AccelerationPolicy + Send>)
            })?,
            SuiteModel::Network { spec, theta } => {
                let adapted: Vec<Result<ModelParams, EvalError>> = tasks
                    .par_iter()
                    .map(|t| {
                        adapt_to_driver(spec, theta, t, &cfg.finetune, cfg.support_stride).map_err(|source| {
                            EvalError::FineTune {
                                model: entry.name.clone(),
                                driver_id: t.driver_id.clone(),
                                source,
                            }
                        })
                    })
                    .collect();
                let adapted: Vec<ModelParams> = adapted.into_iter().collect::<Result<_, _>>()?;
                evaluate_policy(&entry.name, tasks, cfg.warmup, |i, _| {
                    Ok(Box::new(NetworkPolicy {
                        spec,
                        params: &adapted[i],
                    }) as Box<dyn AccelerationPolicy + Send>)
                })?
            }
        };
        models.push(report);
    }
    Ok(EvalReport {
        models,
        fingerprint: None,
        version: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::KinematicState;

    fn event(spacings: &[f64]) -> CfEvent {
        let states = spacings
            .iter()
            .map(|&s| KinematicState::new(s, 10.0, 0.0, 0.0))
            .collect();
        CfEvent::new("d", "e", "l", 0.1, states)
    }

    #[test]
    fn spacing_mse_examples() {
        let obs = event(&[20.0, 21.0, 22.0, 23.0, 24.0]);
        assert_eq!(spacing_mse(&obs, &obs, 2).unwrap(), 0.0);
        let shifted = event(&[20.0, 21.0, 23.0, 24.0, 25.0]);
        assert_eq!(spacing_mse(&shifted, &obs, 2).unwrap(), 1.0);
        let two = event(&[20.0, 21.0, 22.0, 22.0, 26.0]);
        assert_eq!(spacing_mse(&two, &obs, 3).unwrap(), 2.5);
        // Warmup steps are excluded even when they differ.
        let bad_warm = event(&[0.0, 21.0, 22.0, 22.0, 26.0]);
        assert_eq!(spacing_mse(&bad_warm, &obs, 3).unwrap(), 2.5);
    }

    #[test]
    fn spacing_mse_errors() {
        let a = event(&[1.0, 2.0, 3.0]);
        let b = event(&[1.0, 2.0]);
        assert!(matches!(spacing_mse(&a, &b, 1), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(spacing_mse(&a, &a, 3), Err(EvalError::NoSteps { .. })));
    }

    #[test]
    fn collision_rate_examples() {
        let r = CollisionRate::from_counts(0, 7).unwrap();
        assert_eq!(r.permille, 0.0);
        assert_eq!(CollisionRate::from_counts(2, 5).unwrap().permille, 400.0);
        let t2 = CollisionRate::from_counts(34, 609).unwrap();
        assert_eq!((t2.permille * 100.0).round() / 100.0, 55.83);
        assert!((t2.permille - 55.82).abs() < 0.01);
        assert!(CollisionRate::from_counts(0, 0).is_err());
    }
}
