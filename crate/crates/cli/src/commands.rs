//! Subcommand bodies. Each reads its inputs, runs one pipeline stage and
//! writes stamped artifacts under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use metafollower::data::{
    extract_events, generate_fleet, make_split, read_csv, tasks_from_manifest, write_csv, Rejection, SplitManifest,
};
use metafollower::eval::{adapt_to_driver, run_benchmark, EvalReport, ModelReport, SuiteEntry, SuiteModel};
use metafollower::ga::{CalibrationReport, GaConfig, PhysicsKind};
use metafollower::nn::ModelParams;
use metafollower::pidl::ModelKind;
use metafollower::pipeline::{
    calibrate_physics, fit_scaler, meta_train_network, pretrain, MetaInit, GHR, IDM, LSTM_META, LSTM_PRETRAIN,
    LSTM_SCRATCH, METAFOLLOWER, PIDL_PRETRAIN,
};
use metafollower::style::{
    derive_thresholds, fit_styles, mode_matrices, representative_modes, ModeMatrix, RepresentativeMode,
};
use metafollower::types::{CfEvent, DriverTask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    read_bytes, read_json, read_model, write_bytes, write_json, write_model, Envelope, LogEntry, ModelInfo, Stamp,
};
use crate::config::RunConfig;
use crate::error::CliError;

/// Settings shared by every subcommand.
pub struct Context {
    pub cfg: RunConfig,
    pub stamp: Stamp,
    pub out: PathBuf,
    pub reproducible: bool,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf, reproducible: bool) -> Self {
        Self {
            stamp: Stamp::new(&cfg),
            cfg,
            out,
            reproducible,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn or_default(&self, given: Option<PathBuf>, name: &str) -> PathBuf {
        given.unwrap_or_else(|| self.path(name))
    }

    fn elapsed(&self, start: Instant) -> Option<f64> {
        (!self.reproducible).then(|| start.elapsed().as_secs_f64())
    }

    fn write_events(&self, name: &str, events: &[CfEvent]) -> Result<PathBuf, CliError> {
        let mut buf = self.stamp.csv_header().into_bytes();
        write_csv(events, &mut buf)?;
        let path = self.path(name);
        write_bytes(&path, &buf)?;
        Ok(path)
    }
}

pub fn read_events(path: &Path) -> Result<Vec<CfEvent>, CliError> {
    let bytes = read_bytes(path)?;
    read_csv(&bytes[..]).map_err(|e| {
        let e = CliError::from(e);
        CliError::new(e.code, format!("{}: {e}", path.display()))
    })
}

/// Train and test tasks from an event CSV and a split manifest.
fn load_tasks(events: &Path, manifest: &Path) -> Result<(Vec<DriverTask>, Vec<DriverTask>), CliError> {
    let events = read_events(events)?;
    let m: Envelope<SplitManifest> = read_json(manifest)?;
    Ok((
        tasks_from_manifest(&events, &m.payload.train)?,
        tasks_from_manifest(&events, &m.payload.test)?,
    ))
}

fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Lstm => "lstm",
        ModelKind::Pidl => "pidl",
    }
}

pub fn gen(ctx: &Context) -> Result<(), CliError> {
    let fleet = generate_fleet(&ctx.cfg.experiment.fleet);
    ctx.write_events("fleet.csv", &fleet.events)?;
    write_json(&ctx.path("truth.json"), &ctx.stamp.wrap(&fleet.profiles))
}

#[derive(Serialize)]
struct ExtractionLog<'a> {
    accepted_events: usize,
    accepted_per_driver: &'a BTreeMap<String, usize>,
    rejections: &'a [Rejection],
}

pub fn extract(ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let raw = read_events(&ctx.or_default(input, "fleet.csv"))?;
    let ex = extract_events(&raw, &ctx.cfg.experiment.extraction);
    eprintln!(
        "INFO: accepted {} of {} events from {} drivers",
        ex.accepted.len(),
        raw.len(),
        ex.counts.len()
    );
    ctx.write_events("accepted.csv", &ex.accepted)?;
    let log = ExtractionLog {
        accepted_events: ex.accepted.len(),
        accepted_per_driver: &ex.counts,
        rejections: &ex.rejections,
    };
    write_json(&ctx.path("rejections.json"), &ctx.stamp.wrap(log))
}

pub fn split(ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let events = read_events(&ctx.or_default(input, "accepted.csv"))?;
    let manifest = make_split(&events, &ctx.cfg.experiment.split)?;
    write_json(&ctx.path("manifest.json"), &ctx.stamp.wrap(manifest))
}

fn physics_file(kind: PhysicsKind) -> &'static str {
    match kind {
        PhysicsKind::Idm => "calibration_idm.json",
        PhysicsKind::Ghr => "calibration_ghr.json",
    }
}

pub fn calibrate(
    ctx: &Context,
    kind: PhysicsKind,
    input: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<(), CliError> {
    let (train, _) = load_tasks(
        &ctx.or_default(input, "accepted.csv"),
        &ctx.or_default(manifest, "manifest.json"),
    )?;
    let exp = &ctx.cfg.experiment;
    let cal = calibrate_physics(kind, &train, exp)?;
    eprintln!("INFO: {kind:?} best fitness {:.6}", cal.best_fitness);
    let ga = GaConfig {
        warmup: exp.warmup,
        ..exp.ga
    };
    let report = CalibrationReport::new(&cal, &exp.feasible, &ga);
    write_json(&ctx.path(physics_file(kind)), &ctx.stamp.wrap(report))
}

pub struct TrainArgs {
    pub kind: ModelKind,
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub scratch: bool,
    pub name: Option<String>,
}

/// Supervised pretraining, or with `scratch` just the random initialization.
pub fn train(ctx: &Context, args: TrainArgs) -> Result<(), CliError> {
    let (train, _) = load_tasks(
        &ctx.or_default(args.input, "accepted.csv"),
        &ctx.or_default(args.manifest, "manifest.json"),
    )?;
    let exp = &ctx.cfg.experiment;
    let spec = exp.spec(args.kind, fit_scaler(&train)?);
    let k = kind_name(args.kind);
    let role = args.name.unwrap_or_else(|| {
        let stage = if args.scratch { "scratch" } else { "pretrain" };
        format!("{k}_{stage}")
    });
    let start = Instant::now();
    let (theta, log) = if args.scratch {
        (spec.init_params(exp.stage_seed(&format!("scratch-{k}"))), Vec::new())
    } else {
        let (theta, losses) = pretrain(&spec, &train, exp)?;
        let wall = ctx.elapsed(start);
        let log: Vec<LogEntry> = losses
            .into_iter()
            .enumerate()
            .map(|(step, loss)| LogEntry {
                step,
                loss,
                wall_time_s: None,
            })
            .collect();
        if let Some(last) = log.last() {
            eprintln!("INFO: final minibatch loss {:.6}", last.loss);
        }
        (theta, with_total_time(log, wall))
    };
    let info = ModelInfo {
        role: role.clone(),
        spec,
        driver_id: None,
    };
    write_model(&ctx.path(&format!("{role}.bin")), &theta, info, &ctx.stamp)?;
    write_json(&ctx.path(&format!("{role}_log.json")), &ctx.stamp.wrap(log))
}

/// Puts the total training time on the last log entry.
fn with_total_time(mut log: Vec<LogEntry>, wall: Option<f64>) -> Vec<LogEntry> {
    if let Some(last) = log.last_mut() {
        last.wall_time_s = wall;
    }
    log
}

pub struct MetaArgs {
    pub kind: ModelKind,
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub name: Option<String>,
}

pub fn meta_train(ctx: &Context, args: MetaArgs) -> Result<(), CliError> {
    let (train, _) = load_tasks(
        &ctx.or_default(args.input, "accepted.csv"),
        &ctx.or_default(args.manifest, "manifest.json"),
    )?;
    let exp = &ctx.cfg.experiment;
    let k = kind_name(args.kind);
    let (spec, theta0) = match (args.init, exp.meta_init) {
        (Some(path), _) => {
            let (theta, info) = read_model(&path)?;
            if info.spec.kind != args.kind {
                return Err(CliError::usage(format!(
                    "{} holds a {:?} model, not {:?}",
                    path.display(),
                    info.spec.kind,
                    args.kind
                )));
            }
            (info.spec, theta)
        }
        (None, MetaInit::Pretrained) => {
            let path = ctx.path(&format!("{k}_pretrain.bin"));
            if path.exists() {
                let (theta, info) = read_model(&path)?;
                (info.spec, theta)
            } else {
                eprintln!("INFO: no {} found; pretraining first", path.display());
                let spec = exp.spec(args.kind, fit_scaler(&train)?);
                let (theta, _) = pretrain(&spec, &train, exp)?;
                let info = ModelInfo {
                    role: format!("{k}_pretrain"),
                    spec,
                    driver_id: None,
                };
                write_model(&path, &theta, info, &ctx.stamp)?;
                (spec, theta)
            }
        }
        (None, MetaInit::Random) => {
            let spec = exp.spec(args.kind, fit_scaler(&train)?);
            (spec, spec.init_params(exp.stage_seed(&format!("meta-init-{:?}", args.kind))))
        }
    };
    let role = args.name.unwrap_or_else(|| format!("{k}_meta"));
    let start = Instant::now();
    let every = ctx.cfg.checkpoint_every;
    let mut log = Vec::new();
    let mut failed: Option<CliError> = None;
    let (theta, _) = meta_train_network(&spec, &theta0, &train, exp, |s, theta: &ModelParams| {
        log.push(LogEntry {
            step: s.step,
            loss: s.meta_loss,
            wall_time_s: ctx.elapsed(start),
        });
        if every > 0 && (s.step + 1) % every == 0 && failed.is_none() {
            let path = ctx.path(&format!("checkpoints/{role}_step{:05}.bin", s.step + 1));
            if let Err(e) = write_bytes(&path, &theta.to_bytes()) {
                failed = Some(e);
            }
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    if let Some(last) = log.last() {
        eprintln!("INFO: final meta-loss {:.6}", last.loss);
    }
    let info = ModelInfo {
        role: role.clone(),
        spec,
        driver_id: None,
    };
    write_model(&ctx.path(&format!("{role}.bin")), &theta, info, &ctx.stamp)?;
    write_json(&ctx.path(&format!("{role}_log.json")), &ctx.stamp.wrap(log))
}

pub struct FinetuneArgs {
    pub model: PathBuf,
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub train_split: bool,
}

/// Per-driver adapted parameters for every driver of the chosen split.
pub fn finetune(ctx: &Context, args: FinetuneArgs) -> Result<(), CliError> {
    let (theta, info) = read_model(&args.model)?;
    let (train, test) = load_tasks(
        &ctx.or_default(args.input, "accepted.csv"),
        &ctx.or_default(args.manifest, "manifest.json"),
    )?;
    let tasks = if args.train_split { train } else { test };
    let exp = &ctx.cfg.experiment;
    let adapted: Vec<Result<ModelParams, CliError>> = tasks
        .par_iter()
        .map(|t| {
            adapt_to_driver(&info.spec, &theta, t, &exp.meta, exp.support_stride)
                .map_err(|e| {
                    let e = CliError::from(e);
                    CliError::new(e.code, format!("driver {}: fine-tuning failed: {e}", t.driver_id))
                })
        })
        .collect();
    let stem = args
        .model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| info.role.clone());
    for (task, theta) in tasks.iter().zip(adapted) {
        let driver_info = ModelInfo {
            role: info.role.clone(),
            spec: info.spec,
            driver_id: Some(task.driver_id.clone()),
        };
        let path = ctx.path(&format!("finetuned/{stem}/{}.bin", task.driver_id));
        write_model(&path, &theta?, driver_info, &ctx.stamp)?;
    }
    Ok(())
}

/// Suite entries and the artifact each one is loaded from.
pub const SUITE_FILES: [(&str, &str); 7] = [
    (GHR, "calibration_ghr.json"),
    (IDM, "calibration_idm.json"),
    (LSTM_SCRATCH, "lstm_scratch.bin"),
    (LSTM_PRETRAIN, "lstm_pretrain.bin"),
    (LSTM_META, "lstm_meta.bin"),
    (PIDL_PRETRAIN, "pidl_pretrain.bin"),
    (METAFOLLOWER, "pidl_meta.bin"),
];

/// Suite entries selected by display name or artifact stem.
fn select(only: &[String]) -> Result<Vec<(&'static str, &'static str)>, CliError> {
    if only.is_empty() {
        return Ok(SUITE_FILES.to_vec());
    }
    let norm = |s: &str| s.to_ascii_lowercase().replace(['(', ')', '+'], "");
    let mut out = Vec::new();
    for want in only {
        let w = norm(want.trim());
        let hit = SUITE_FILES.iter().find(|(name, file)| {
            norm(name) == w || file.trim_end_matches(".bin").trim_end_matches(".json").trim_start_matches("calibration_") == w
        });
        match hit {
            Some(e) if !out.contains(e) => out.push(*e),
            Some(_) => {}
            None => return Err(CliError::usage(format!("unknown suite entry {want:?}"))),
        }
    }
    Ok(SUITE_FILES.iter().copied().filter(|e| out.contains(e)).collect())
}

pub struct EvalArgs {
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub only: Vec<String>,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<(), CliError> {
    let dir = args.models.unwrap_or_else(|| ctx.out.clone());
    let chosen = select(&args.only)?;
    // Check every artifact before any work starts.
    for (_, file) in &chosen {
        let path = dir.join(file);
        if !path.exists() {
            return Err(CliError::missing(&path));
        }
    }
    let (_, test) = load_tasks(
        &ctx.or_default(args.input, "accepted.csv"),
        &ctx.or_default(args.manifest, "manifest.json"),
    )?;
    let mut suite = Vec::new();
    for (name, file) in chosen {
        let path = dir.join(file);
        let model = if file.ends_with(".json") {
            let r: Envelope<CalibrationReport> = read_json(&path)?;
            SuiteModel::Physics(r.payload.calibration())
        } else {
            let (theta, info) = read_model(&path)?;
            SuiteModel::Network { spec: info.spec, theta }
        };
        suite.push(SuiteEntry {
            name: name.into(),
            model,
        });
    }
    let mut report = run_benchmark(&test, &suite, &ctx.cfg.experiment.eval_config())?;
    report.fingerprint = Some(ctx.stamp.fingerprint.clone());
    report.version = Some(crate::artifact::VERSION.into());
    for m in &report.models {
        eprintln!(
            "INFO: {}: mse {:.4} m^2, collisions {} of {}",
            m.model, m.mse_spacing, m.collision_count, m.total_events
        );
    }
    let csv = format!("{}{}", ctx.stamp.csv_header(), report.to_csv());
    write_bytes(&ctx.path("table2.csv"), csv.as_bytes())?;
    write_json(&ctx.path("eval.json"), &ctx.stamp.wrap(report))
}

#[derive(Serialize)]
struct MatrixJson {
    counts: ModeMatrix,
    /// Per gap category, `[relspeed][accel]` probabilities; `None` when the
    /// category has no samples.
    probabilities: Vec<Option<[[f64; 5]; 5]>>,
}

pub fn style(ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let events = read_events(&ctx.or_default(input, "accepted.csv"))?;
    let s = &ctx.cfg.style;
    let table = if s.derive {
        derive_thresholds(&events, &s.quantiles)?
    } else {
        s.thresholds
    };
    table.validate()?;
    let m = mode_matrices(&events, &table);
    let probabilities = (0..3).map(|g| m.probabilities(g)).collect();
    let reps: Vec<RepresentativeMode> = representative_modes(&m);
    let csv = format!("{}{}", ctx.stamp.csv_header(), m.to_csv());
    write_bytes(&ctx.path("mode_matrices.csv"), csv.as_bytes())?;
    write_json(
        &ctx.path("mode_matrices.json"),
        &ctx.stamp.wrap(MatrixJson {
            counts: m.clone(),
            probabilities,
        }),
    )?;
    write_json(&ctx.path("representative_modes.json"), &ctx.stamp.wrap(reps))?;
    write_json(&ctx.path("thresholds.json"), &ctx.stamp.wrap(table))?;
    write_json(&ctx.path("gamma_fits.json"), &ctx.stamp.wrap(fit_styles(&events)))
}

/// One row of the merged report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedRow {
    pub model: String,
    /// Mean over runs of each run's spacing MSE.
    pub mse_spacing: f64,
    /// Pooled over runs.
    pub collision_rate_permille: f64,
    pub collision_count: usize,
    pub total_events: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedReport {
    pub rows: Vec<MergedRow>,
    pub sources: Vec<SourceRun>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRun {
    pub path: String,
    pub fingerprint: String,
}

/// Merges evaluation reports, e.g. from several seeds, into one table.
pub fn merge_reports(reports: &[EvalReport]) -> Vec<MergedRow> {
    let mut order: Vec<String> = Vec::new();
    let mut by_model: BTreeMap<String, Vec<&ModelReport>> = BTreeMap::new();
    for r in reports {
        for m in &r.models {
            if !by_model.contains_key(&m.model) {
                order.push(m.model.clone());
            }
            by_model.entry(m.model.clone()).or_default().push(m);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let ms = &by_model[&name];
            let collisions: usize = ms.iter().map(|m| m.collision_count).sum();
            let total: usize = ms.iter().map(|m| m.total_events).sum();
            MergedRow {
                model: name,
                mse_spacing: ms.iter().map(|m| m.mse_spacing).sum::<f64>() / ms.len() as f64,
                collision_rate_permille: 1000.0 * collisions as f64 / total.max(1) as f64,
                collision_count: collisions,
                total_events: total,
                runs: ms.len(),
            }
        })
        .collect()
}

pub fn report(ctx: &Context, inputs: &[PathBuf]) -> Result<(), CliError> {
    let mut reports = Vec::new();
    let mut sources = Vec::new();
    for p in inputs {
        let r: Envelope<EvalReport> = read_json(p)?;
        sources.push(SourceRun {
            path: p.display().to_string(),
            fingerprint: r.fingerprint,
        });
        reports.push(r.payload);
    }
    let rows = merge_reports(&reports);
    let mut csv = ctx.stamp.csv_header();
    csv.push_str("model,mse_spacing,collision_rate_permille,collision_count\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.model, r.mse_spacing, r.collision_rate_permille, r.collision_count
        ));
    }
    write_bytes(&ctx.path("report.csv"), csv.as_bytes())?;
    write_json(&ctx.path("report.json"), &ctx.stamp.wrap(MergedReport { rows, sources }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_selection_by_name_or_stem() {
        let s = select(&["MetaFollower".into(), "ghr".into(), "lstm_meta".into()]).unwrap();
        let names: Vec<&str> = s.iter().map(|e| e.0).collect();
        assert_eq!(names, vec![GHR, LSTM_META, METAFOLLOWER]);
        assert_eq!(select(&["pidl_meta".into()]).unwrap()[0].0, METAFOLLOWER);
        assert_eq!(select(&["LSTM (no pretrain)".into()]).unwrap()[0].1, "lstm_scratch.bin");
        assert_eq!(select(&[]).unwrap().len(), 7);
        assert!(select(&["transformer".into()]).is_err());
    }

    fn model(name: &str, mse: f64, c: usize, n: usize) -> ModelReport {
        ModelReport {
            model: name.into(),
            mse_spacing: mse,
            collision_rate_permille: 1000.0 * c as f64 / n as f64,
            collision_count: c,
            total_events: n,
            per_driver: Vec::new(),
            collided_events: Vec::new(),
        }
    }

    #[test]
    fn merge_averages_mse_and_pools_collisions() {
        let r = |a: ModelReport, b: ModelReport| EvalReport {
            models: vec![a, b],
            fingerprint: None,
            version: None,
        };
        let rows = merge_reports(&[
            r(model("A", 2.0, 1, 10), model("B", 5.0, 0, 10)),
            r(model("A", 4.0, 3, 30), model("B", 7.0, 0, 30)),
        ]);
        assert_eq!(rows[0].model, "A");
        assert_eq!(rows[0].mse_spacing, 3.0);
        assert_eq!(rows[0].collision_count, 4);
        assert_eq!(rows[0].collision_rate_permille, 100.0);
        assert_eq!(rows[1].runs, 2);
    }
}
