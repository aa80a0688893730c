//! Model-agnostic meta-learning over per-driver tasks.
//!
//! The inner loop adapts the shared initialization with plain gradient steps
//! on a task's support set. The outer loop evaluates each adapted copy on the
//! task's query set and moves the initialization along the gradient of the
//! summed query losses with respect to the *original* parameters. Unless
//! `first_order` is set, that gradient flows through the inner updates
//! exactly, via the tape's recorded backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::nn::{Adam, ModelParams};
use crate::pidl::{make_samples, tape_loss, NetworkSpec, PidlError, Sample};
use crate::types::DriverTask;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("non-finite loss while adapting task {task}")]
    NonFinite { task: String },
    #[error("task {task}: {source}")]
    Autodiff {
        task: String,
        #[source]
        source: AutodiffError,
    },
    #[error("invalid meta config: {0}")]
    Config(String),
    #[error("empty task batch")]
    EmptyBatch,
    #[error(transparent)]
    Pidl(#[from] PidlError),
}

/// Inner/outer learning rates and loop sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    /// Total number of inner gradient updates.
    pub k_inner: usize,
    /// Tasks per outer step.
    pub meta_batch: usize,
    pub outer_steps: usize,
    /// Drop second-order terms through the inner updates.
    pub first_order: bool,
    /// Update rule [`meta_train`] applies to the meta-gradient.
    #[serde(default)]
    pub outer_optimizer: OuterOptimizer,
}

/// Outer-loop update rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    /// `theta - beta * g`.
    #[default]
    Sgd,
    /// Adam with step size `beta`, state kept across outer steps.
    Adam,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            k_inner: 3,
            meta_batch: 8,
            outer_steps: 2000,
            first_order: false,
            outer_optimizer: OuterOptimizer::Sgd,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(MetaError::Config("learning rates must be non-negative".into()));
        }
        if self.k_inner == 0 || self.meta_batch == 0 {
            return Err(MetaError::Config("k_inner and meta_batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
}

/// A differentiable per-task loss.
pub trait MetaObjective: Sync {
    type Task: Sync;

    fn task_name(&self, task: &Self::Task) -> String;

    /// Records the loss of `params` on one split of `task`.
    fn loss(&self, tape: &mut Tape, params: &[Var], task: &Self::Task, split: Split) -> Var;
}

fn shapes(tape: &Tape, vars: &[Var]) -> Vec<(usize, usize)> {
    vars.iter().map(|v| tape.shape(*v)).collect()
}

fn finite_loss<O: MetaObjective>(obj: &O, task: &O::Task, tape: &Tape, l: Var) -> Result<(), MetaError> {
    if tape.scalar(l).is_finite() {
        Ok(())
    } else {
        Err(MetaError::NonFinite {
            task: obj.task_name(task),
        })
    }
}

/// Inner updates recorded on `tape`, starting from the nodes `theta`.
fn adapt_on_tape<O: MetaObjective>(
    tape: &mut Tape,
    theta: &[Var],
    task: &O::Task,
    cfg: &MetaConfig,
    obj: &O,
) -> Result<Vec<Var>, MetaError> {
    let shp = shapes(tape, theta);
    let wrap = |source| MetaError::Autodiff {
        task: obj.task_name(task),
        source,
    };
    let mut phi = theta.to_vec();
    for _ in 0..cfg.k_inner {
        let l = obj.loss(tape, &phi, task, Split::Support);
        finite_loss(obj, task, tape, l)?;
        let grads: Vec<Var> = if cfg.first_order {
            let g = tape.backward(l, &phi).map_err(wrap)?;
            g.into_iter()
                .zip(&shp)
                .map(|(g, &(r, c))| tape.leaf(g, r, c))
                .collect()
        } else {
            tape.backward_graph(l, &phi).map_err(wrap)?
        };
        phi = phi
            .iter()
            .zip(grads)
            .map(|(&p, g)| {
                let step = tape.scale(g, cfg.alpha);
                tape.sub(p, step)
            })
            .collect();
    }
    Ok(phi)
}

/// `k_inner` plain gradient steps on the support set; nothing is kept for
/// differentiation.
pub fn inner_adapt<O: MetaObjective>(
    theta: &ModelParams,
    task: &O::Task,
    cfg: &MetaConfig,
    obj: &O,
) -> Result<ModelParams, MetaError> {
    let mut current = theta.clone();
    for _ in 0..cfg.k_inner {
        let mut tape = Tape::new();
        let vars = current.to_tape(&mut tape);
        let l = obj.loss(&mut tape, &vars, task, Split::Support);
        finite_loss(obj, task, &tape, l)?;
        let parts = tape.backward(l, &vars).map_err(|source| MetaError::Autodiff {
            task: obj.task_name(task),
            source,
        })?;
        let g = current.flatten(&parts);
        current = current.with_data(crate::nn::sgd_step(&current.data, &g, cfg.alpha));
    }
    Ok(current)
}

/// Adaptation of a meta-learned initialization to a new driver. Same
/// computation as [`inner_adapt`].
pub fn fine_tune<O: MetaObjective>(
    theta_star: &ModelParams,
    task: &O::Task,
    cfg: &MetaConfig,
    obj: &O,
) -> Result<ModelParams, MetaError> {
    inner_adapt(theta_star, task, cfg, obj)
}

/// Query loss after adaptation and its gradient with respect to `theta`.
pub fn task_meta_gradient<O: MetaObjective>(
    theta: &ModelParams,
    task: &O::Task,
    cfg: &MetaConfig,
    obj: &O,
) -> Result<(f64, Vec<f64>), MetaError> {
    let mut tape = Tape::new();
    let vars = theta.to_tape(&mut tape);
    let phi = adapt_on_tape(&mut tape, &vars, task, cfg, obj)?;
    let lq = obj.loss(&mut tape, &phi, task, Split::Query);
    finite_loss(obj, task, &tape, lq)?;
    let parts = tape.backward(lq, &vars).map_err(|source| MetaError::Autodiff {
        task: obj.task_name(task),
        source,
    })?;
    Ok((tape.scalar(lq), theta.flatten(&parts)))
}

/// Summed meta-gradient of a batch, accumulated in batch order. Returns the
/// summed query loss too.
pub fn meta_gradient<O: MetaObjective>(
    theta: &ModelParams,
    tasks: &[&O::Task],
    cfg: &MetaConfig,
    obj: &O,
) -> Result<(f64, Vec<f64>), MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let per_task: Vec<Result<(f64, Vec<f64>), MetaError>> = tasks
        .par_iter()
        .map(|t| task_meta_gradient(theta, *t, cfg, obj))
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for r in per_task {
        let (l, g) = r?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

/// One outer update `theta - beta * grad(sum of query losses)`. Returns the new
/// parameters and the summed meta-loss at the old ones.
pub fn outer_step<O: MetaObjective>(
    theta: &ModelParams,
    tasks: &[&O::Task],
    cfg: &MetaConfig,
    obj: &O,
) -> Result<(ModelParams, f64), MetaError> {
    let (loss, g) = meta_gradient(theta, tasks, cfg, obj)?;
    Ok((theta.with_data(crate::nn::sgd_step(&theta.data, &g, cfg.beta)), loss))
}

/// Progress record passed to the [`meta_train`] observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaStep {
    pub step: usize,
    /// Mean query loss over the sampled batch.
    pub meta_loss: f64,
}

/// Full outer loop with tasks sampled uniformly with replacement.
///
/// `observe` is called after every outer update with the new parameters.
pub fn meta_train<O, F>(
    theta0: &ModelParams,
    tasks: &[O::Task],
    cfg: &MetaConfig,
    seed: u64,
    obj: &O,
    mut observe: F,
) -> Result<(ModelParams, Vec<f64>), MetaError>
where
    O: MetaObjective,
    F: FnMut(MetaStep, &ModelParams),
{
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = theta0.clone();
    let mut adam = Adam::new(theta.len());
    let mut trace = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let batch: Vec<&O::Task> = (0..cfg.meta_batch)
            .map(|_| &tasks[rng.random_range(0..tasks.len())])
            .collect();
        let loss = match cfg.outer_optimizer {
            OuterOptimizer::Sgd => {
                let (next, loss) = outer_step(&theta, &batch, cfg, obj)?;
                theta = next;
                loss
            }
            OuterOptimizer::Adam => {
                let (loss, g) = meta_gradient(&theta, &batch, cfg, obj)?;
                let mut data = theta.data.clone();
                adam.step(&mut data, &g, cfg.beta);
                theta = theta.with_data(data);
                loss
            }
        };
        let meta_loss = loss / batch.len() as f64;
        trace.push(meta_loss);
        observe(MetaStep { step, meta_loss }, &theta);
    }
    Ok((theta, trace))
}

/// A driver task with its windows prepared once.
#[derive(Debug, Clone)]
pub struct TaskSamples {
    pub driver_id: String,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl TaskSamples {
    pub fn from_task(
        task: &DriverTask,
        spec: &NetworkSpec,
        support_stride: usize,
        query_stride: usize,
    ) -> Result<Self, PidlError> {
        Ok(Self {
            driver_id: task.driver_id.clone(),
            support: make_samples(&task.support, spec.window, support_stride, &spec.scaler)?,
            query: make_samples(&task.query, spec.window, query_stride, &spec.scaler)?,
        })
    }
}

/// Teacher-forced acceleration MSE of a network on a task split.
#[derive(Debug, Clone, Copy)]
pub struct NetworkObjective {
    pub spec: NetworkSpec,
}

impl MetaObjective for NetworkObjective {
    type Task = TaskSamples;

    fn task_name(&self, task: &TaskSamples) -> String {
        task.driver_id.clone()
    }

    fn loss(&self, tape: &mut Tape, params: &[Var], task: &TaskSamples, split: Split) -> Var {
        let samples = match split {
            Split::Support => &task.support,
            Split::Query => &task.query,
        };
        tape_loss(tape, params, &self.spec, samples)
    }
}

/// One-dimensional quadratic tasks `L(theta) = (theta - c)^2` on both splits.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticObjective;

impl MetaObjective for QuadraticObjective {
    type Task = f64;

    fn task_name(&self, c: &f64) -> String {
        format!("quadratic(c={c})")
    }

    fn loss(&self, tape: &mut Tape, params: &[Var], c: &f64, _split: Split) -> Var {
        let d = tape.add_const(params[0], -c);
        let sq = tape.mul(d, d);
        tape.sum(sq)
    }
}
