//! Synthetic fleet generation, event extraction, driver splits and the
//! trajectory CSV format.
//!
//! Synthetic drivers follow IDM with parameters that wander over time as a
//! mean-reverting process reflected at the feasible box, plus Gaussian
//! acceleration noise. Leaders replay piecewise constant-acceleration speed
//! profiles with occasional hard braking.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{idm_acceleration_unchecked, idm_equilibrium_spacing, Bounds, IdmBox, IdmParams};
use crate::rollout::rollout;
use crate::types::{CfEvent, DriverTask, KinematicState, DEFAULT_DT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("event {event_id}: {reason}")]
    BadEvent { event_id: String, reason: String },
    #[error("split needs {needed} drivers, found {found}")]
    TooFewDrivers { needed: usize, found: usize },
    #[error("driver {driver_id} has {count} events; a split needs at least 2")]
    TooFewEvents { driver_id: String, count: usize },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("manifest references unknown event {0}")]
    UnknownEvent(String),
}

/// Stable per-driver seed from the fleet seed and the driver id.
pub fn driver_seed(fleet_seed: u64, driver_id: &str) -> u64 {
    // FNV-1a, then a SplitMix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in driver_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ fleet_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A family of drivers: base parameters are drawn uniformly within
/// `center * (1 ± spread)` per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCluster {
    pub name: String,
    pub center: IdmParams,
    pub spread: f64,
}

pub fn default_clusters() -> Vec<StyleCluster> {
    let p = |a0, b, v_des, t_des, s0, lambda| IdmParams {
        a0,
        b,
        v_des,
        t_des,
        s0,
        lambda,
    };
    vec![
        StyleCluster {
            name: "aggressive".into(),
            center: p(2.2, 3.0, 34.0, 0.8, 1.5, 4.0),
            spread: 0.15,
        },
        StyleCluster {
            name: "normal".into(),
            center: p(1.3, 2.0, 30.0, 1.4, 2.5, 4.0),
            spread: 0.15,
        },
        StyleCluster {
            name: "cautious".into(),
            center: p(0.8, 1.4, 28.0, 2.2, 4.0, 4.0),
            spread: 0.15,
        },
    ]
}

/// Ground truth for one synthetic driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDriverProfile {
    pub driver_id: String,
    pub cluster: String,
    pub base: IdmParams,
    /// Mean-reversion rate per parameter, 1/s.
    pub drift_rates: [f64; 6],
    /// Volatility per parameter as a fraction of the box width per sqrt(s).
    pub drift_volatility: [f64; 6],
    pub accel_noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub n_drivers: usize,
    pub events_per_driver: usize,
    /// Event length in seconds.
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub accel_noise_sigma: f64,
    pub drift_rate: f64,
    pub drift_volatility: f64,
    /// Chance that a leader segment is a hard braking maneuver.
    pub hard_brake_prob: f64,
    /// Leader accelerations of ordinary segments are drawn from
    /// `[-leader_accel, leader_accel]`, m/s².
    pub leader_accel: f64,
    /// Simulated time between consecutive events of a driver, seconds.
    pub event_gap: f64,
    pub clusters: Vec<StyleCluster>,
    pub idm_box: IdmBox,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_drivers: 44,
            events_per_driver: 25,
            horizon: 40.0,
            dt: DEFAULT_DT,
            seed: 0,
            accel_noise_sigma: 0.1,
            drift_rate: 0.05,
            drift_volatility: 0.01,
            hard_brake_prob: 0.1,
            leader_accel: 1.5,
            event_gap: 60.0,
            clusters: default_clusters(),
            idm_box: IdmBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub events: Vec<CfEvent>,
    pub profiles: BTreeMap<String, SyntheticDriverProfile>,
}

const LEADER_MAX_SPEED: f64 = 24.0;
const MAX_BRAKING: f64 = -8.0;
const MAX_RETRIES: usize = 50;

fn reflect(x: f64, b: Bounds) -> f64 {
    if b.hi <= b.lo {
        return b.lo;
    }
    let mut x = x;
    for _ in 0..8 {
        if x < b.lo {
            x = 2.0 * b.lo - x;
        } else if x > b.hi {
            x = 2.0 * b.hi - x;
        } else {
            return x;
        }
    }
    b.clamp(x)
}

/// Drifting parameter state of one driver.
struct ParamProcess<'a> {
    profile: &'a SyntheticDriverProfile,
    bounds: [Bounds; 6],
    current: [f64; 6],
}

impl ParamProcess<'_> {
    /// Exact mean-reverting transition over `h` seconds, then reflection.
    fn advance(&mut self, h: f64, rng: &mut ChaCha8Rng) {
        let base = self.profile.base.to_array();
        for k in 0..6 {
            let r = self.profile.drift_rates[k];
            let vol = self.profile.drift_volatility[k] * self.bounds[k].width();
            let decay = (-r * h).exp();
            let sd = if r > 0.0 {
                vol * ((1.0 - decay * decay) / (2.0 * r)).sqrt()
            } else {
                vol * h.sqrt()
            };
            let z: f64 = rng.sample(StandardNormal);
            let x = base[k] + (self.current[k] - base[k]) * decay + sd * z;
            self.current[k] = reflect(x, self.bounds[k]);
        }
    }

    fn params(&self) -> IdmParams {
        IdmParams::from_slice(&self.current)
    }
}

fn leader_speeds(n: usize, cfg: &FleetConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dt = cfg.dt;
    let mut v = rng.random_range(3.0..20.0);
    let mut out = Vec::with_capacity(n);
    let mut remaining = 0usize;
    let mut accel = 0.0;
    for _ in 0..n {
        if remaining == 0 {
            let (a, secs) = if rng.random::<f64>() < cfg.hard_brake_prob {
                (rng.random_range(-4.0..-2.5), rng.random_range(1.0..2.5))
            } else {
                (rng.random_range(-cfg.leader_accel..=cfg.leader_accel), rng.random_range(2.0..6.0))
            };
            accel = a;
            remaining = ((secs / dt) as usize).max(1);
        }
        out.push(v);
        v = (v + accel * dt).clamp(0.0, LEADER_MAX_SPEED);
        remaining -= 1;
    }
    out
}

fn simulate_event(
    profile: &SyntheticDriverProfile,
    process: &mut ParamProcess,
    index: usize,
    cfg: &FleetConfig,
    rng: &mut ChaCha8Rng,
) -> CfEvent {
    let n = (cfg.horizon / cfg.dt).round() as usize + 1;
    let driver = &profile.driver_id;
    let event_id = format!("{driver}_E{:03}", index + 1);
    let lv_id = format!("{driver}_L{:03}", index + 1);
    let mut last = None;
    for _ in 0..MAX_RETRIES {
        let vl = leader_speeds(n, cfg, rng);
        let p0 = process.params();
        let vf0 = (vl[0] + rng.random_range(-1.0..1.0)).max(0.0);
        let s_eq = idm_equilibrium_spacing(vf0, &p0);
        let s_init = (s_eq + rng.random_range(-1.0..4.0)).max(p0.s0 + 1.0);
        let mut states: Vec<KinematicState> = vl
            .iter()
            .map(|&v| KinematicState::new(s_init, 0.0, -v, 0.0))
            .collect();
        states[0] = KinematicState::new(s_init, vf0, vf0 - vl[0], 0.0);
        let template = CfEvent::new(driver.clone(), event_id.clone(), lv_id.clone(), cfg.dt, states);

        let start = process.current;
        let sigma = profile.accel_noise_sigma;
        let dt = cfg.dt;
        let mut policy = |history: &[KinematicState], _dt: f64| {
            let mut s = *history.last().expect("history");
            s.spacing = s.spacing.max(0.01);
            let a = idm_acceleration_unchecked(&s, &process.params());
            let z: f64 = rng.sample(StandardNormal);
            process.advance(dt, rng);
            (a + sigma * z).max(MAX_BRAKING)
        };
        let result = rollout(&template, &mut policy, 1).expect("finite IDM rollout");
        let mut event = result.simulated;
        let amp = rng.random_range(0.0..1.5);
        let omega = rng.random_range(0.05..0.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        event.lateral_offset = Some(
            (0..n)
                .map(|k| amp * (omega * k as f64 * dt + phase).sin())
                .collect(),
        );
        event.t0 = index as f64 * (cfg.horizon + cfg.event_gap);
        if !result.collided {
            return event;
        }
        process.current = start;
        last = Some(event);
    }
    last.expect("at least one attempt")
}

fn draw_profile(driver_id: String, cfg: &FleetConfig) -> SyntheticDriverProfile {
    let seed = driver_seed(cfg.seed, &driver_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster = &cfg.clusters[rng.random_range(0..cfg.clusters.len())];
    let bounds = cfg.idm_box.to_array();
    let mut base = cluster.center.to_array();
    for (x, b) in base.iter_mut().zip(bounds) {
        let f = 1.0 + cluster.spread * rng.random_range(-1.0..=1.0);
        *x = b.clamp(*x * f);
    }
    SyntheticDriverProfile {
        driver_id,
        cluster: cluster.name.clone(),
        base: IdmParams::from_slice(&base),
        drift_rates: [cfg.drift_rate; 6],
        drift_volatility: [cfg.drift_volatility; 6],
        accel_noise_sigma: cfg.accel_noise_sigma,
        seed,
    }
}

fn generate_driver(driver_id: String, cfg: &FleetConfig) -> (SyntheticDriverProfile, Vec<CfEvent>) {
    let profile = draw_profile(driver_id, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x5eed);
    let mut process = ParamProcess {
        profile: &profile,
        bounds: cfg.idm_box.to_array(),
        current: profile.base.to_array(),
    };
    let mut events = Vec::with_capacity(cfg.events_per_driver);
    for i in 0..cfg.events_per_driver {
        events.push(simulate_event(&profile, &mut process, i, cfg, &mut rng));
        process.advance(cfg.event_gap, &mut rng);
    }
    (profile, events)
}

/// Synthesizes `n_drivers * events_per_driver` events plus the ground truth.
pub fn generate_fleet(cfg: &FleetConfig) -> Fleet {
    let ids: Vec<String> = (0..cfg.n_drivers).map(|i| format!("D{:03}", i + 1)).collect();
    let per_driver: Vec<(SyntheticDriverProfile, Vec<CfEvent>)> = ids
        .into_par_iter()
        .map(|id| generate_driver(id, cfg))
        .collect();
    let mut events = Vec::new();
    let mut profiles = BTreeMap::new();
    for (p, evs) in per_driver {
        events.extend(evs);
        profiles.insert(p.driver_id.clone(), p);
    }
    Fleet { events, profiles }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCriteria {
    /// Lateral offsets must stay strictly below this, meters.
    pub max_lateral: f64,
    /// Events must last strictly longer than this, seconds.
    pub min_duration: f64,
    pub min_events_per_driver: usize,
    pub require_constant_lv: bool,
}

impl Default for ExtractionCriteria {
    fn default() -> Self {
        Self {
            max_lateral: 2.5,
            min_duration: 15.0,
            min_events_per_driver: 20,
            require_constant_lv: true,
        }
    }
}

/// Durations within this many seconds of the threshold count as equal to it,
/// so sampling-grid rounding cannot push a 15.0 s event over the line.
const DURATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum RejectReason {
    LeaderChanged,
    Lateral { max_abs: f64 },
    TooShort { duration: f64 },
    NonPositiveSpacing { index: usize },
    DriverBelowMinimum { accepted: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub driver_id: String,
    pub event_id: String,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub accepted: Vec<CfEvent>,
    /// Accepted events per retained driver.
    pub counts: BTreeMap<String, usize>,
    pub rejections: Vec<Rejection>,
}

/// First criterion an event fails, if any.
pub fn check_event(event: &CfEvent, c: &ExtractionCriteria) -> Option<RejectReason> {
    if c.require_constant_lv {
        if let Some(track) = &event.lv_track {
            if track.iter().any(|id| *id != event.lv_id) {
                return Some(RejectReason::LeaderChanged);
            }
        }
    }
    if let Some(lat) = &event.lateral_offset {
        let max_abs = lat.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(max_abs < c.max_lateral) {
            return Some(RejectReason::Lateral { max_abs });
        }
    }
    let duration = event.duration();
    if !(duration > c.min_duration + DURATION_TOLERANCE) {
        return Some(RejectReason::TooShort { duration });
    }
    if let Some(index) = event.states.iter().position(|s| !(s.spacing > 0.0)) {
        return Some(RejectReason::NonPositiveSpacing { index });
    }
    None
}

/// Applies the per-event criteria, then drops drivers with too few events.
pub fn extract_events(raw: &[CfEvent], c: &ExtractionCriteria) -> Extraction {
    let mut rejections = Vec::new();
    let mut by_driver: BTreeMap<&str, Vec<&CfEvent>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for e in raw {
        match check_event(e, c) {
            Some(reason) => rejections.push(Rejection {
                driver_id: e.driver_id.clone(),
                event_id: e.event_id.clone(),
                reason,
            }),
            None => {
                let entry = by_driver.entry(e.driver_id.as_str()).or_default();
                if entry.is_empty() {
                    order.push(e.driver_id.as_str());
                }
                entry.push(e);
            }
        }
    }
    let mut accepted = Vec::new();
    let mut counts = BTreeMap::new();
    for d in order {
        let evs = &by_driver[d];
        if evs.len() < c.min_events_per_driver {
            rejections.extend(evs.iter().map(|e| Rejection {
                driver_id: e.driver_id.clone(),
                event_id: e.event_id.clone(),
                reason: RejectReason::DriverBelowMinimum { accepted: evs.len() },
            }));
        } else {
            counts.insert(d.to_string(), evs.len());
            accepted.extend(evs.iter().map(|e| (*e).clone()));
        }
    }
    Extraction {
        accepted,
        counts,
        rejections,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train_drivers: usize,
    pub n_test_drivers: usize,
    /// Share of each driver's events that goes to the support set.
    pub support_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_train_drivers: 33,
            n_test_drivers: 11,
            support_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Support set size for `n` events: the floor of `n * fraction`, kept
/// within `1..n`.
pub fn support_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction + 1e-9).floor() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Event ids of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub driver_id: String,
    pub support: Vec<String>,
    pub query: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub train: Vec<TaskManifest>,
    pub test: Vec<TaskManifest>,
}

/// Partitions drivers into train/test and each driver's events into
/// support/query, both by seed.
pub fn make_split(events: &[CfEvent], spec: &SplitSpec) -> Result<SplitManifest, DataError> {
    if !(spec.support_fraction > 0.0 && spec.support_fraction < 1.0) {
        return Err(DataError::Split("support_fraction must lie in (0, 1)".into()));
    }
    let mut by_driver: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in events {
        by_driver.entry(&e.driver_id).or_default().push(&e.event_id);
    }
    let needed = spec.n_train_drivers + spec.n_test_drivers;
    if by_driver.len() < needed || spec.n_train_drivers == 0 || spec.n_test_drivers == 0 {
        return Err(DataError::TooFewDrivers {
            needed,
            found: by_driver.len(),
        });
    }
    let mut drivers: Vec<&str> = by_driver.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    drivers.shuffle(&mut rng);

    let task = |d: &str| -> Result<TaskManifest, DataError> {
        let mut ids: Vec<String> = by_driver[d].iter().map(|s| s.to_string()).collect();
        if ids.len() < 2 {
            return Err(DataError::TooFewEvents {
                driver_id: d.to_string(),
                count: ids.len(),
            });
        }
        let mut r = ChaCha8Rng::seed_from_u64(driver_seed(spec.seed, d));
        ids.shuffle(&mut r);
        let query = ids.split_off(support_size(ids.len(), spec.support_fraction));
        Ok(TaskManifest {
            driver_id: d.to_string(),
            support: ids,
            query,
        })
    };
    let mut train: Vec<TaskManifest> = drivers[..spec.n_train_drivers]
        .iter()
        .map(|d| task(d))
        .collect::<Result<_, _>>()?;
    let mut test: Vec<TaskManifest> = drivers[spec.n_train_drivers..needed]
        .iter()
        .map(|d| task(d))
        .collect::<Result<_, _>>()?;
    train.sort_by(|a, b| a.driver_id.cmp(&b.driver_id));
    test.sort_by(|a, b| a.driver_id.cmp(&b.driver_id));
    Ok(SplitManifest {
        spec: *spec,
        train,
        test,
    })
}

/// Resolves manifest ids against `events`.
pub fn tasks_from_manifest(events: &[CfEvent], tasks: &[TaskManifest]) -> Result<Vec<DriverTask>, DataError> {
    let index: BTreeMap<&str, &CfEvent> = events.iter().map(|e| (e.event_id.as_str(), e)).collect();
    let get = |ids: &[String]| -> Result<Vec<CfEvent>, DataError> {
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| DataError::UnknownEvent(id.clone()))
            })
            .collect()
    };
    tasks
        .iter()
        .map(|t| {
            Ok(DriverTask {
                driver_id: t.driver_id.clone(),
                support: get(&t.support)?,
                query: get(&t.query)?,
            })
        })
        .collect()
}

/// Train and test tasks in one call.
pub fn make_tasks(events: &[CfEvent], spec: &SplitSpec) -> Result<(Vec<DriverTask>, Vec<DriverTask>), DataError> {
    let m = make_split(events, spec)?;
    Ok((tasks_from_manifest(events, &m.train)?, tasks_from_manifest(events, &m.test)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    driver_id: String,
    event_id: String,
    lv_id: String,
    t: f64,
    spacing_m: f64,
    v_fv_mps: f64,
    v_lv_mps: f64,
    a_fv_mps2: f64,
    lateral_m: Option<f64>,
}

/// Writes events in the trajectory CSV schema, one row per timestep.
pub fn write_csv<W: Write>(events: &[CfEvent], w: W) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    for e in events {
        for (k, s) in e.states.iter().enumerate() {
            out.serialize(Row {
                driver_id: e.driver_id.clone(),
                event_id: e.event_id.clone(),
                lv_id: e
                    .lv_track
                    .as_ref()
                    .map_or_else(|| e.lv_id.clone(), |t| t[k].clone()),
                t: e.time_at(k),
                spacing_m: s.spacing,
                v_fv_mps: s.v_fv,
                v_lv_mps: s.v_lv(),
                a_fv_mps2: s.a_fv,
                lateral_m: e.lateral_offset.as_ref().map(|l| l[k]),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

fn finish_event(rows: Vec<Row>) -> Result<CfEvent, DataError> {
    let first = &rows[0];
    let bad = |reason: String| DataError::BadEvent {
        event_id: first.event_id.clone(),
        reason,
    };
    if rows.len() < 2 {
        return Err(bad("needs at least two rows".into()));
    }
    let n = rows.len();
    let span = rows[n - 1].t - first.t;
    // Rounded to the nanosecond so that grids like 0.1 s come back exactly.
    let dt = (span / (n - 1) as f64 * 1e9).round() / 1e9;
    if !(dt > 0.0) {
        return Err(bad("timestamps must increase".into()));
    }
    for (k, r) in rows.iter().enumerate() {
        if (r.t - first.t - k as f64 * dt).abs() > 1e-6 * (1.0 + r.t.abs()) {
            return Err(bad(format!("irregular timestamp at row {k}")));
        }
        if r.driver_id != first.driver_id {
            return Err(bad("driver_id changes within the event".into()));
        }
    }
    let states = rows
        .iter()
        .map(|r| KinematicState::new(r.spacing_m, r.v_fv_mps, r.v_fv_mps - r.v_lv_mps, r.a_fv_mps2))
        .collect();
    let lateral = if rows.iter().all(|r| r.lateral_m.is_some()) {
        Some(rows.iter().map(|r| r.lateral_m.unwrap_or_default()).collect())
    } else if rows.iter().all(|r| r.lateral_m.is_none()) {
        None
    } else {
        return Err(bad("lateral_m is missing on some rows".into()));
    };
    let lv_track = if rows.iter().any(|r| r.lv_id != first.lv_id) {
        Some(rows.iter().map(|r| r.lv_id.clone()).collect())
    } else {
        None
    };
    let mut e = CfEvent::new(first.driver_id.clone(), first.event_id.clone(), first.lv_id.clone(), dt, states);
    e.t0 = first.t;
    e.lateral_offset = lateral;
    e.lv_track = lv_track;
    Ok(e)
}

/// Reads the trajectory CSV. Rows of one event must be contiguous; lines
/// starting with `#` are skipped.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<CfEvent>, DataError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut events = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Vec<Row> = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        if current.last().is_some_and(|c| c.event_id != row.event_id) {
            let rows = std::mem::take(&mut current);
            events.push(finish_event(rows)?);
        }
        if current.is_empty() && !seen.insert(row.event_id.clone()) {
            return Err(DataError::BadEvent {
                event_id: row.event_id.clone(),
                reason: "rows are not contiguous".into(),
            });
        }
        current.push(row);
    }
    if !current.is_empty() {
        events.push(finish_event(current)?);
    }
    Ok(events)
}
