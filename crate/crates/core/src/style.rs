//! Driving-style analysis: threshold binning into 75 discrete modes, per-gap
//! mode-probability matrices, representative modes, and gamma fits.
//!
//! Bins are closed on the left. A state exactly on an edge belongs to the
//! bin above it, including the top edges.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::types::{CfEvent, KinematicState};

#[derive(Debug, Error, PartialEq)]
pub enum StyleError {
    #[error("gamma fit needs at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("gamma fit needs strictly positive samples")]
    NonPositive,
    #[error("gamma fit needs samples with nonzero variance")]
    ZeroVariance,
    #[error("edges of {0} must be finite and strictly ascending")]
    Edges(&'static str),
}

pub const ACCEL_LABELS: [&str; 5] = [
    "Aggressive positive deceleration",
    "Gentle negative deceleration",
    "Keeping acceleration",
    "Gentle positive acceleration",
    "Aggressive positive acceleration",
];

pub const RELSPEED_LABELS: [&str; 5] = [
    "Aggressive negative relative speed",
    "Gentle negative relative speed",
    "Keeping relative speed",
    "Gentle positive relative speed",
    "Aggressive positive relative speed",
];

pub const GAP_LABELS: [&str; 3] = ["Close gap", "Normal gap", "Long gap"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub accel_edges: [f64; 4],
    /// Edges on `dv = v_fv - v_lv`.
    pub relspeed_edges: [f64; 4],
    pub spacing_edges: [f64; 2],
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self {
            accel_edges: [-0.39, -0.08, 0.16, 0.46],
            relspeed_edges: [-0.82, -0.21, 0.28, 0.89],
            spacing_edges: [10.11, 24.70],
        }
    }
}

fn ascending(e: &[f64]) -> bool {
    e.iter().all(|x| x.is_finite()) && e.windows(2).all(|w| w[0] < w[1])
}

impl ThresholdTable {
    pub fn validate(&self) -> Result<(), StyleError> {
        if !ascending(&self.accel_edges) {
            return Err(StyleError::Edges("accel_edges"));
        }
        if !ascending(&self.relspeed_edges) {
            return Err(StyleError::Edges("relspeed_edges"));
        }
        if !ascending(&self.spacing_edges) {
            return Err(StyleError::Edges("spacing_edges"));
        }
        Ok(())
    }
}

/// Index of the closed-left bin containing `x`.
fn bin(x: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|e| x >= **e).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    pub accel_bin: usize,
    pub relspeed_bin: usize,
    pub gap_bin: usize,
}

impl Mode {
    pub fn id(&self) -> usize {
        self.gap_bin * 25 + self.relspeed_bin * 5 + self.accel_bin
    }

    pub fn from_id(id: usize) -> Self {
        Self {
            gap_bin: id / 25,
            relspeed_bin: (id % 25) / 5,
            accel_bin: id % 5,
        }
    }
}

/// Bins one state. NaN inputs fall into the lowest bin.
pub fn bin_state(s: &KinematicState, table: &ThresholdTable) -> Mode {
    Mode {
        accel_bin: bin(s.a_fv, &table.accel_edges),
        relspeed_bin: bin(s.dv, &table.relspeed_edges),
        gap_bin: bin(s.spacing, &table.spacing_edges),
    }
}

/// Mode counts per gap category, indexed `[gap][relspeed][accel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMatrix {
    pub counts: [[[u64; 5]; 5]; 3],
}

impl ModeMatrix {
    pub fn empty() -> Self {
        Self {
            counts: [[[0; 5]; 5]; 3],
        }
    }

    pub fn add(&mut self, m: Mode) {
        self.counts[m.gap_bin][m.relspeed_bin][m.accel_bin] += 1;
    }

    pub fn merge(&mut self, other: &ModeMatrix) {
        for g in 0..3 {
            for r in 0..5 {
                for a in 0..5 {
                    self.counts[g][r][a] += other.counts[g][r][a];
                }
            }
        }
    }

    pub fn gap_total(&self, gap: usize) -> u64 {
        self.counts[gap].iter().flatten().sum()
    }

    /// Probabilities within one gap category; `None` when it has no samples.
    pub fn probabilities(&self, gap: usize) -> Option<[[f64; 5]; 5]> {
        let total = self.gap_total(gap);
        if total == 0 {
            return None;
        }
        let mut p = [[0.0; 5]; 5];
        for r in 0..5 {
            for a in 0..5 {
                p[r][a] = self.counts[gap][r][a] as f64 / total as f64;
            }
        }
        Some(p)
    }

    /// Three 5x5 blocks, rows are relative-speed bins and columns
    /// acceleration bins.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for g in 0..3 {
            out.push_str(&format!("gap,{},samples,{}\n", GAP_LABELS[g], self.gap_total(g)));
            out.push_str("relspeed_bin\\accel_bin,0,1,2,3,4\n");
            let p = self.probabilities(g).unwrap_or([[0.0; 5]; 5]);
            for (r, row) in p.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                out.push_str(&format!("{r},{}\n", cells.join(",")));
            }
        }
        out
    }
}

pub fn mode_matrices(events: &[CfEvent], table: &ThresholdTable) -> ModeMatrix {
    let mut m = ModeMatrix::empty();
    for e in events {
        for s in &e.states {
            m.add(bin_state(s, table));
        }
    }
    m
}

/// Most probable mode of one gap category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RepresentativeMode {
    Mode {
        gap: String,
        mode_id: usize,
        relspeed_bin: usize,
        accel_bin: usize,
        probability: f64,
    },
    NoData {
        gap: String,
    },
}

/// Argmax cell per gap category; ties go to the smaller mode id.
pub fn representative_modes(m: &ModeMatrix) -> Vec<RepresentativeMode> {
    (0..3)
        .map(|g| {
            let gap = GAP_LABELS[g].to_string();
            let Some(p) = m.probabilities(g) else {
                return RepresentativeMode::NoData { gap };
            };
            let mut best = (0, 0);
            for r in 0..5 {
                for a in 0..5 {
                    if p[r][a] > p[best.0][best.1] {
                        best = (r, a);
                    }
                }
            }
            RepresentativeMode::Mode {
                gap,
                mode_id: Mode {
                    accel_bin: best.1,
                    relspeed_bin: best.0,
                    gap_bin: g,
                }
                .id(),
                relspeed_bin: best.0,
                accel_bin: best.1,
                probability: p[best.0][best.1],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    /// False when the likelihood refinement failed and the moment
    /// estimate is returned.
    pub converged: bool,
}

pub const MIN_GAMMA_SAMPLES: usize = 10;

/// Method-of-moments estimate `(k, scale)` with the unbiased variance.
pub fn gamma_moments(samples: &[f64]) -> Result<(f64, f64), StyleError> {
    let n = samples.len();
    if n < 2 {
        return Err(StyleError::TooFewSamples { needed: 2, found: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(StyleError::ZeroVariance);
    }
    Ok((mean * mean / var, var / mean))
}

/// Maximum-likelihood gamma fit, started from the moment estimate.
///
/// The shape solves `ln k - digamma(k) = ln(mean) - mean(ln x)`; the scale
/// follows as `mean / k`.
pub fn fit_gamma(samples: &[f64]) -> Result<GammaFit, StyleError> {
    if samples.len() < MIN_GAMMA_SAMPLES {
        return Err(StyleError::TooFewSamples {
            needed: MIN_GAMMA_SAMPLES,
            found: samples.len(),
        });
    }
    if samples.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(StyleError::NonPositive);
    }
    let (k0, scale0) = gamma_moments(samples)?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let mean_ln = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let target = mean.ln() - mean_ln;
    let fallback = GammaFit {
        shape: k0,
        scale: scale0,
        converged: false,
    };
    if !(target > 0.0) {
        return Ok(fallback);
    }
    // ln k - digamma(k) decreases monotonically from +inf to 0.
    let f = |k: f64| k.ln() - digamma(k) - target;
    let (mut lo, mut hi) = (k0, k0);
    let mut steps = 0;
    while f(lo) < 0.0 && steps < 200 {
        lo *= 0.5;
        steps += 1;
    }
    while f(hi) > 0.0 && steps < 400 {
        hi *= 2.0;
        steps += 1;
    }
    if !(f(lo) >= 0.0 && f(hi) <= 0.0) {
        return Ok(fallback);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    let shape = 0.5 * (lo + hi);
    if !shape.is_finite() || shape <= 0.0 {
        return Ok(fallback);
    }
    Ok(GammaFit {
        shape,
        scale: mean / shape,
        converged: true,
    })
}

/// Gamma fits on spacing and on the magnitudes of each sign of
/// acceleration and relative speed. Groups too small or degenerate to fit
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFits {
    pub spacing: Option<GammaFit>,
    pub accel_positive: Option<GammaFit>,
    pub accel_negative: Option<GammaFit>,
    pub relspeed_positive: Option<GammaFit>,
    pub relspeed_negative: Option<GammaFit>,
}

pub fn fit_styles(events: &[CfEvent]) -> StyleFits {
    let states = || events.iter().flat_map(|e| e.states.iter());
    let fit = |xs: Vec<f64>| fit_gamma(&xs).ok();
    StyleFits {
        spacing: fit(states().map(|s| s.spacing).filter(|x| *x > 0.0).collect()),
        accel_positive: fit(states().map(|s| s.a_fv).filter(|x| *x > 0.0).collect()),
        accel_negative: fit(states().filter(|s| s.a_fv < 0.0).map(|s| -s.a_fv).collect()),
        relspeed_positive: fit(states().map(|s| s.dv).filter(|x| *x > 0.0).collect()),
        relspeed_negative: fit(states().filter(|s| s.dv < 0.0).map(|s| -s.dv).collect()),
    }
}

pub const MIN_THRESHOLD_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileScheme {
    pub five_bin: [f64; 4],
    pub three_bin: [f64; 2],
}

impl Default for QuantileScheme {
    fn default() -> Self {
        Self {
            five_bin: [0.2, 0.4, 0.6, 0.8],
            three_bin: [1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

/// Linearly interpolated empirical quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Recomputes the edges from empirical quantiles of `events`.
pub fn derive_thresholds(events: &[CfEvent], scheme: &QuantileScheme) -> Result<ThresholdTable, StyleError> {
    let n: usize = events.iter().map(|e| e.states.len()).sum();
    if n < MIN_THRESHOLD_SAMPLES {
        return Err(StyleError::TooFewSamples {
            needed: MIN_THRESHOLD_SAMPLES,
            found: n,
        });
    }
    let sorted = |f: fn(&KinematicState) -> f64| {
        let mut v: Vec<f64> = events.iter().flat_map(|e| e.states.iter().map(f)).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let a = sorted(|s| s.a_fv);
    let r = sorted(|s| s.dv);
    let s = sorted(|s| s.spacing);
    let table = ThresholdTable {
        accel_edges: scheme.five_bin.map(|q| quantile(&a, q)),
        relspeed_edges: scheme.five_bin.map(|q| quantile(&r, q)),
        spacing_edges: scheme.three_bin.map(|q| quantile(&s, q)),
    };
    table.validate()?;
    Ok(table)
}
