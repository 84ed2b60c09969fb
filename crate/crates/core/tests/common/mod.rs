//! Independent brute-force recomputations used as test oracles.
//!
//! Everything here works straight from `UserRecord`s with two-pass sums and
//! shares no code with the library's aggregation or estimators.

#![allow(dead_code)]

use cohort_lte::panel::{Arm, Observation, PanelMode, UserRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FLOOR: f64 = 1e-12;

/// Random log with staggered entry, non-absorbing activity and real metrics.
pub fn random_log(seed: u64, n_users: usize, duration: u32) -> Vec<UserRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_users)
        .map(|i| {
            let arm = if rng.random_bool(0.5) {
                Arm::Treatment
            } else {
                Arm::Control
            };
            let entry = rng.random_range(0..duration);
            let mut observations = Vec::new();
            for day in entry..duration {
                match rng.random_range(0..10) {
                    0 => {}
                    1 => observations.push(Observation {
                        day,
                        metric: 0.0,
                        active: false,
                    }),
                    _ => observations.push(Observation {
                        day,
                        metric: (rng.random::<f64>() * 8.0 * 1000.0).round() / 1000.0,
                        active: true,
                    }),
                }
            }
            UserRecord {
                user_id: format!("user-{i:04}"),
                arm,
                entry_day: entry,
                observations,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct OracleCell {
    pub n: usize,
    pub mean: f64,
    pub var_of_mean: f64,
}

/// Values contributing to cell `(arm, t0, t)`.
pub fn cell_values(records: &[UserRecord], arm: Arm, t0: u32, t: u32, mode: PanelMode) -> Vec<f64> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.arm == arm && r.entry_day == t0) {
        let obs = r.observations.iter().find(|o| o.day == t);
        match mode {
            PanelMode::Metric => {
                if let Some(o) = obs.filter(|o| o.active) {
                    out.push(o.metric);
                }
            }
            PanelMode::Presence => out.push(if obs.is_some_and(|o| o.active) { 1.0 } else { 0.0 }),
        }
    }
    out
}

/// Brute-force cell; `None` when fewer than two users contribute.
pub fn oracle_cell(records: &[UserRecord], arm: Arm, t0: u32, t: u32, mode: PanelMode) -> Option<OracleCell> {
    if t < t0 {
        return None;
    }
    let v = cell_values(records, arm, t0, t, mode);
    let n = v.len();
    if n < 2 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let s2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Some(OracleCell {
        n,
        mean,
        var_of_mean: s2.max(FLOOR) / n as f64,
    })
}

/// `(value, variance)` of the offset-`k` learning estimate, by hand.
pub fn oracle_learning_k(records: &[UserRecord], t: u32, k: u32) -> Option<(f64, f64)> {
    let a = oracle_cell(records, Arm::Treatment, k, t + k, PanelMode::Metric)?;
    let b = oracle_cell(records, Arm::Treatment, t + k, t + k, PanelMode::Metric)?;
    if t == 0 {
        return Some((0.0, FLOOR));
    }
    Some((a.mean - b.mean, (a.var_of_mean + b.var_of_mean).max(FLOOR)))
}

/// `(value, variance)` of the offset-`k` treatment-minus-control estimate.
pub fn oracle_effect_k(records: &[UserRecord], t: u32, k: u32) -> Option<(f64, f64)> {
    let a = oracle_cell(records, Arm::Treatment, k, t + k, PanelMode::Metric)?;
    let b = oracle_cell(records, Arm::Control, k, t + k, PanelMode::Metric)?;
    Some((a.mean - b.mean, (a.var_of_mean + b.var_of_mean).max(FLOOR)))
}

/// Offsets, weights, pooled value and pooled variance at `t`.
pub struct OracleMc {
    pub ks: Vec<u32>,
    pub weights: Vec<f64>,
    pub value: f64,
    pub variance: f64,
}

pub fn oracle_mc(duration: u32, t: u32, term: impl Fn(u32) -> Option<(f64, f64)>) -> Option<OracleMc> {
    let mut ks = Vec::new();
    let mut terms = Vec::new();
    for k in 0..duration - t {
        if let Some(x) = term(k) {
            ks.push(k);
            terms.push(x);
        }
    }
    if terms.is_empty() {
        return None;
    }
    let precision: f64 = terms.iter().map(|(_, v)| 1.0 / v).sum();
    let weights: Vec<f64> = terms.iter().map(|(_, v)| 1.0 / v / precision).collect();
    let value = weights.iter().zip(&terms).map(|(w, (x, _))| w * x).sum();
    Some(OracleMc {
        ks,
        weights,
        value,
        variance: 1.0 / precision,
    })
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
