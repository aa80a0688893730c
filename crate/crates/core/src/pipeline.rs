//! End-to-end experiment: synthetic fleet, split, physics calibration,
//! network pretraining and meta-training, and the seven-model benchmark.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{driver_seed, extract_events, generate_fleet, make_tasks, DataError, ExtractionCriteria, FleetConfig, SplitSpec};
use crate::eval::{run_benchmark, EvalConfig, EvalError, EvalReport, SuiteEntry, SuiteModel};
use crate::ga::{calibrate, Calibration, GaConfig, GaError, PhysicsKind};
use crate::meta::{meta_train, MetaConfig, MetaError, MetaStep, NetworkObjective, OuterOptimizer, TaskSamples};
use crate::nn::ModelParams;
use crate::physics::FeasibleBox;
use crate::pidl::{make_samples, train_supervised, FeatureScaler, ModelKind, NetworkSpec, PidlError, SupervisedConfig};
use crate::rollout::DEFAULT_WARMUP;
use crate::types::{CfEvent, DriverTask};

pub const GHR: &str = "GHR";
pub const IDM: &str = "IDM";
pub const LSTM_SCRATCH: &str = "LSTM (no pretrain)";
pub const LSTM_PRETRAIN: &str = "LSTM (pretrain+finetune)";
pub const LSTM_META: &str = "LSTM (meta)";
pub const PIDL_PRETRAIN: &str = "PIDL (pretrain+finetune)";
pub const METAFOLLOWER: &str = "MetaFollower";

/// Suite order used in reports.
pub const SUITE: [&str; 7] = [GHR, IDM, LSTM_SCRATCH, LSTM_PRETRAIN, LSTM_META, PIDL_PRETRAIN, METAFOLLOWER];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ga(#[from] GaError),
    #[error(transparent)]
    Pidl(#[from] PidlError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Where meta-training starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaInit {
    /// From the supervised pretrained parameters.
    Pretrained,
    /// From a fresh random initialization.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub fleet: FleetConfig,
    pub extraction: ExtractionCriteria,
    pub split: SplitSpec,
    pub feasible: FeasibleBox,
    pub ga: GaConfig,
    pub hidden: usize,
    pub window: usize,
    pub supervised: SupervisedConfig,
    pub pretrain_stride: usize,
    pub meta: MetaConfig,
    pub meta_init: MetaInit,
    /// Window strides over support and query events in meta-training and
    /// fine-tuning.
    pub support_stride: usize,
    pub query_stride: usize,
    pub warmup: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fleet: FleetConfig::default(),
            extraction: ExtractionCriteria::default(),
            split: SplitSpec::default(),
            feasible: FeasibleBox::default(),
            ga: GaConfig::default(),
            hidden: crate::pidl::DEFAULT_HIDDEN,
            window: crate::pidl::DEFAULT_WINDOW,
            supervised: SupervisedConfig::default(),
            pretrain_stride: 1,
            meta: MetaConfig::default(),
            meta_init: MetaInit::Pretrained,
            support_stride: 1,
            query_stride: 1,
            warmup: DEFAULT_WARMUP,
        }
    }
}

impl ExperimentConfig {
    /// Reduced budgets that fit the whole experiment in minutes on one core.
    pub fn desk_scale() -> Self {
        Self {
            ga: GaConfig {
                generations: 60,
                population: 60,
                max_events: Some(40),
                ..GaConfig::default()
            },
            hidden: 16,
            supervised: SupervisedConfig {
                steps: 5000,
                batch: 64,
                lr: 0.01,
                seed: 0,
            },
            pretrain_stride: 5,
            meta: MetaConfig {
                alpha: 0.1,
                beta: 0.003,
                k_inner: 5,
                meta_batch: 4,
                outer_steps: 600,
                first_order: false,
                outer_optimizer: OuterOptimizer::Adam,
            },
            support_stride: 20,
            query_stride: 30,
            ..Self::default()
        }
    }

    /// Same settings with every stage seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.fleet.seed = seed;
        c.split.seed = seed;
        c.ga.seed = seed;
        c.supervised.seed = seed;
        c
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            warmup: self.warmup,
            finetune: self.meta,
            support_stride: self.support_stride,
        }
    }

    pub fn spec(&self, kind: ModelKind, scaler: FeatureScaler) -> NetworkSpec {
        NetworkSpec {
            kind,
            hidden: self.hidden,
            window: self.window,
            scaler,
            idm_box: self.feasible.idm,
        }
    }

    /// Seed of a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        driver_seed(self.seed, stage)
    }
}

/// Fleet, extraction and split.
pub fn prepare_tasks(cfg: &ExperimentConfig) -> Result<(Vec<DriverTask>, Vec<DriverTask>), PipelineError> {
    let fleet = generate_fleet(&cfg.fleet);
    let extracted = extract_events(&fleet.events, &cfg.extraction);
    Ok(make_tasks(&extracted.accepted, &cfg.split)?)
}

pub fn all_events(tasks: &[DriverTask]) -> Vec<CfEvent> {
    tasks
        .iter()
        .flat_map(|t| t.support.iter().chain(&t.query).cloned())
        .collect()
}

pub fn fit_scaler(train: &[DriverTask]) -> Result<FeatureScaler, PipelineError> {
    Ok(FeatureScaler::fit(
        train.iter().flat_map(|t| t.support.iter().chain(&t.query)),
    )?)
}

/// One global GA calibration over all training events.
pub fn calibrate_physics(
    kind: PhysicsKind,
    train: &[DriverTask],
    cfg: &ExperimentConfig,
) -> Result<Calibration, PipelineError> {
    let ga = GaConfig {
        warmup: cfg.warmup,
        ..cfg.ga
    };
    Ok(calibrate(kind, &all_events(train), &cfg.feasible, &ga)?)
}

/// Supervised training on all training events, pooled.
pub fn pretrain(
    spec: &NetworkSpec,
    train: &[DriverTask],
    cfg: &ExperimentConfig,
) -> Result<(ModelParams, Vec<f64>), PipelineError> {
    let label = format!("pretrain-{:?}", spec.kind);
    let theta0 = spec.init_params(cfg.stage_seed(&label));
    let samples = make_samples(&all_events(train), spec.window, cfg.pretrain_stride, &spec.scaler)?;
    let sup = SupervisedConfig {
        seed: cfg.supervised.seed ^ cfg.stage_seed(&label),
        ..cfg.supervised
    };
    Ok(train_supervised(spec, &theta0, &samples, &sup)?)
}

pub fn task_samples(spec: &NetworkSpec, tasks: &[DriverTask], cfg: &ExperimentConfig) -> Result<Vec<TaskSamples>, PipelineError> {
    tasks
        .iter()
        .map(|t| Ok(TaskSamples::from_task(t, spec, cfg.support_stride, cfg.query_stride)?))
        .collect()
}

pub fn meta_train_network<F>(
    spec: &NetworkSpec,
    theta0: &ModelParams,
    train: &[DriverTask],
    cfg: &ExperimentConfig,
    observe: F,
) -> Result<(ModelParams, Vec<f64>), PipelineError>
where
    F: FnMut(MetaStep, &ModelParams),
{
    let tasks = task_samples(spec, train, cfg)?;
    let seed = cfg.stage_seed(&format!("meta-{:?}", spec.kind));
    Ok(meta_train(theta0, &tasks, &cfg.meta, seed, &NetworkObjective { spec: *spec }, observe)?)
}

/// Trained models of one experiment.
#[derive(Debug, Clone)]
pub struct TrainedSuite {
    pub entries: Vec<SuiteEntry>,
}

/// Calibrates and trains every suite entry on `train`.
pub fn train_suite(train: &[DriverTask], cfg: &ExperimentConfig) -> Result<TrainedSuite, PipelineError> {
    let scaler = fit_scaler(train)?;
    let mut entries = Vec::new();
    for (name, kind) in [(GHR, PhysicsKind::Ghr), (IDM, PhysicsKind::Idm)] {
        entries.push(SuiteEntry {
            name: name.into(),
            model: SuiteModel::Physics(calibrate_physics(kind, train, cfg)?),
        });
    }
    for kind in [ModelKind::Lstm, ModelKind::Pidl] {
        let spec = cfg.spec(kind, scaler);
        let (pretrained, _) = pretrain(&spec, train, cfg)?;
        let start = match cfg.meta_init {
            MetaInit::Pretrained => pretrained.clone(),
            MetaInit::Random => spec.init_params(cfg.stage_seed(&format!("meta-init-{kind:?}"))),
        };
        let (meta, _) = meta_train_network(&spec, &start, train, cfg, |_, _| {})?;
        let net = |name: &str, theta: ModelParams| SuiteEntry {
            name: name.into(),
            model: SuiteModel::Network { spec, theta },
        };
        match kind {
            ModelKind::Lstm => {
                let scratch = spec.init_params(cfg.stage_seed("scratch-lstm"));
                entries.push(net(LSTM_SCRATCH, scratch));
                entries.push(net(LSTM_PRETRAIN, pretrained));
                entries.push(net(LSTM_META, meta));
            }
            ModelKind::Pidl => {
                entries.push(net(PIDL_PRETRAIN, pretrained));
                entries.push(net(METAFOLLOWER, meta));
            }
        }
    }
    Ok(TrainedSuite { entries })
}

/// Full experiment for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport, PipelineError> {
    let (train, test) = prepare_tasks(cfg)?;
    let suite = train_suite(&train, cfg)?;
    Ok(run_benchmark(&test, &suite.entries, &cfg.eval_config())?)
}
