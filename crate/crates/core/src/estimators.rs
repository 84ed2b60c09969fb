//! Treatment-trajectory estimators over elapsed exposure time.
//!
//! Three estimators of the user-learning curve are provided: the
//! cookie-cookie-day contrast (first cohort vs. the cohort entering today),
//! the first-cohort difference-in-differences, and the multi-cohort estimator
//! that pools every admissible cohort offset `k` by inverse-variance
//! weighting. The multi-cohort machinery is reused for the treatment effect
//! trajectory and for arm-level metric and survival curves.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Arm, CohortCell, CohortPanel, PanelMode, VARIANCE_FLOOR};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

/// What a single cohort-offset estimate contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMode {
    /// Long-exposed treated cohort minus freshly entered treated cohort.
    Learning,
    /// Treated minus control for the same entry cohort.
    Effect,
    /// A single arm's cohort mean.
    ArmLevel(Arm),
}

impl fmt::Display for DiffMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffMode::Learning => f.write_str("learning"),
            DiffMode::Effect => f.write_str("effect"),
            DiffMode::ArmLevel(arm) => write!(f, "arm_level:{}", arm.code()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CCD")]
    Ccd,
    #[serde(rename = "DiD")]
    Did,
    #[serde(rename = "MC")]
    Mc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ccd, Method::Did, Method::Mc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ccd => "CCD",
            Method::Did => "DiD",
            Method::Mc => "MC",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ccd" => Ok(Method::Ccd),
            "did" => Ok(Method::Did),
            "mc" => Ok(Method::Mc),
            other => Err(format!("unknown method `{other}` (expected CCD, DiD or MC)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub variance: f64,
    /// Cohort offsets that contributed.
    pub k_used: Vec<u32>,
}

impl Estimate {
    pub fn std_err(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn ci95(&self) -> (f64, f64) {
        let h = Z95 * self.std_err();
        (self.value - h, self.value + h)
    }

    pub fn covers(&self, x: f64) -> bool {
        let (lo, hi) = self.ci95();
        lo <= x && x <= hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: u32,
    pub estimate: Estimate,
}

/// A series of estimates over elapsed time, in increasing `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub mode: DiffMode,
    pub method: Method,
    pub panel_mode: PanelMode,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Curve name used in CSV output; presence arm-level curves are
    /// survival curves.
    pub fn label(&self) -> String {
        match (self.panel_mode, self.mode) {
            (PanelMode::Presence, DiffMode::ArmLevel(arm)) => format!("survival:{}", arm.code()),
            (_, m) => m.to_string(),
        }
    }

    /// A decay model has three parameters; it needs at least four points.
    pub fn is_fittable(&self) -> bool {
        self.points.len() >= 4
    }

    /// `(t, value, variance)` triples for fitting.
    pub fn fit_points(&self) -> Vec<(f64, f64, f64)> {
        self.points
            .iter()
            .map(|p| (f64::from(p.t), p.estimate.value, p.estimate.variance))
            .collect()
    }

    pub fn at(&self, t: u32) -> Option<&Estimate> {
        self.points.iter().find(|p| p.t == t).map(|p| &p.estimate)
    }

    /// Mean 95% interval width over points with `t >= from`.
    pub fn mean_ci_width(&self, from: u32) -> Option<f64> {
        let widths: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.t >= from)
            .map(|p| 2.0 * Z95 * p.estimate.std_err())
            .collect();
        if widths.is_empty() {
            None
        } else {
            Some(widths.iter().sum::<f64>() / widths.len() as f64)
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_curves_csv(std::slice::from_ref(self), out)
    }
}

/// Writes several curves into one `mode,t,value,variance,ci_lo,ci_hi` table.
pub fn write_curves_csv<W: Write>(curves: &[LearningCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "t", "value", "variance", "ci_lo", "ci_hi"])?;
    for c in curves {
        let mode = c.label();
        for p in &c.points {
            let (lo, hi) = p.estimate.ci95();
            w.write_record([
                mode.clone(),
                p.t.to_string(),
                p.estimate.value.to_string(),
                p.estimate.variance.to_string(),
                lo.to_string(),
                hi.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn need(panel: &CohortPanel, arm: Arm, t0: u32, t: u32) -> Result<&CohortCell> {
    panel.usable_cell(arm, t0, t).ok_or_else(|| Error::Unavailable {
        t,
        reason: format!("cell ({}, {t0}, {t}) has fewer than 2 users", arm.code()),
    })
}

/// Covariance between means of two different entry cohorts. Randomization
/// makes them disjoint user sets, so this is zero.
fn cross_cohort_cov(_a: &CohortCell, _b: &CohortCell) -> f64 {
    0.0
}

fn floored(variance: f64) -> f64 {
    variance.max(VARIANCE_FLOOR)
}

/// The offset-`k` estimate at elapsed time `t`.
pub fn delta_k(panel: &CohortPanel, t: u32, k: u32, mode: DiffMode) -> Result<Estimate> {
    let duration = panel.duration();
    if t.checked_add(k).is_none_or(|s| s >= duration) {
        return Err(Error::OutOfRange { t, k, duration });
    }
    let day = t + k;
    let (value, variance) = match mode {
        DiffMode::Learning => {
            let exposed = need(panel, Arm::Treatment, k, day)?;
            let fresh = need(panel, Arm::Treatment, day, day)?;
            if t == 0 {
                // same cell on both sides
                (0.0, 0.0)
            } else {
                (
                    exposed.mean - fresh.mean,
                    exposed.var_of_mean + fresh.var_of_mean - 2.0 * cross_cohort_cov(exposed, fresh),
                )
            }
        }
        DiffMode::Effect => {
            let treated = need(panel, Arm::Treatment, k, day)?;
            let control = need(panel, Arm::Control, k, day)?;
            (treated.mean - control.mean, treated.var_of_mean + control.var_of_mean)
        }
        DiffMode::ArmLevel(arm) => {
            let c = need(panel, arm, k, day)?;
            (c.mean, c.var_of_mean)
        }
    };
    Ok(Estimate {
        value,
        variance: floored(variance),
        k_used: vec![k],
    })
}

/// Cookie-cookie-day learning: first cohort minus the cohort entering at `t`.
pub fn ccd_learning(panel: &CohortPanel, t: u32) -> Result<Estimate> {
    delta_k(panel, t, 0, DiffMode::Learning)
}

/// First-cohort difference-in-differences learning estimate.
///
/// The two treated (and two control) terms are the same users at two
/// times; their covariance comes from users observed on both days.
pub fn did_learning(panel: &CohortPanel, t: u32) -> Result<Estimate> {
    if t >= panel.duration() {
        return Err(Error::OutOfRange {
            t,
            k: 0,
            duration: panel.duration(),
        });
    }
    let tt = need(panel, Arm::Treatment, 0, t)?;
    let t0 = need(panel, Arm::Treatment, 0, 0)?;
    let ct = need(panel, Arm::Control, 0, t)?;
    let c0 = need(panel, Arm::Control, 0, 0)?;
    let value = (tt.mean - t0.mean) - (ct.mean - c0.mean);
    let variance = if t == 0 {
        0.0
    } else {
        tt.var_of_mean + t0.var_of_mean - 2.0 * tt.cov_with_entry + ct.var_of_mean + c0.var_of_mean
            - 2.0 * ct.cov_with_entry
    };
    Ok(Estimate {
        value,
        variance: floored(variance),
        k_used: vec![0],
    })
}

/// All admissible offsets at `t` with their estimates; unusable offsets are
/// dropped.
pub fn delta_terms(panel: &CohortPanel, t: u32, mode: DiffMode) -> Vec<Estimate> {
    (0..panel.duration().saturating_sub(t))
        .filter_map(|k| delta_k(panel, t, k, mode).ok())
        .collect()
}

/// Inverse-variance weights for `terms`, summing to one.
pub fn inverse_variance_weights(terms: &[Estimate]) -> Vec<f64> {
    let precision: f64 = terms.iter().map(|e| 1.0 / e.variance).sum();
    terms.iter().map(|e| (1.0 / e.variance) / precision).collect()
}

/// Pools unbiased estimates of the same quantity by inverse-variance
/// weighting. Returns `None` for an empty slice.
pub fn combine(terms: &[Estimate]) -> Option<Estimate> {
    match terms {
        [] => return None,
        [only] => return Some(only.clone()),
        _ => {}
    }
    let weights = inverse_variance_weights(terms);
    let value = weights.iter().zip(terms).map(|(w, e)| w * e.value).sum();
    let precision: f64 = terms.iter().map(|e| 1.0 / e.variance).sum();
    // the harmonic bound holds exactly; clamp away rounding above it
    let smallest = terms.iter().map(|e| e.variance).fold(f64::INFINITY, f64::min);
    let mut k_used: Vec<u32> = terms.iter().flat_map(|e| e.k_used.iter().copied()).collect();
    k_used.sort_unstable();
    k_used.dedup();
    Some(Estimate {
        value,
        variance: (1.0 / precision).min(smallest),
        k_used,
    })
}

/// Multi-cohort estimate at `t` over every usable offset.
pub fn multicohort_estimate(panel: &CohortPanel, t: u32, mode: DiffMode) -> Result<Estimate> {
    multicohort_estimate_over(panel, t, mode, 0..panel.duration())
}

/// Multi-cohort estimate restricted to offsets in `ks`.
pub fn multicohort_estimate_over(
    panel: &CohortPanel,
    t: u32,
    mode: DiffMode,
    ks: impl IntoIterator<Item = u32>,
) -> Result<Estimate> {
    let terms: Vec<Estimate> = ks
        .into_iter()
        .filter(|&k| t + k < panel.duration())
        .filter_map(|k| delta_k(panel, t, k, mode).ok())
        .collect();
    combine(&terms).ok_or_else(|| Error::Unavailable {
        t,
        reason: format!("no usable cohort offset for {mode}"),
    })
}

fn series(
    panel: &CohortPanel,
    mode: DiffMode,
    method: Method,
    point: impl Fn(u32) -> Result<Estimate>,
) -> LearningCurve {
    let points = (0..panel.duration())
        .filter_map(|t| point(t).ok().map(|estimate| CurvePoint { t, estimate }))
        .collect();
    LearningCurve {
        mode,
        method,
        panel_mode: panel.mode(),
        points,
    }
}

/// Multi-cohort curve for `t = 0..T-1`, skipping unavailable points.
pub fn multicohort_series(panel: &CohortPanel, mode: DiffMode) -> LearningCurve {
    series(panel, mode, Method::Mc, |t| multicohort_estimate(panel, t, mode))
}

pub fn ccd_series(panel: &CohortPanel) -> LearningCurve {
    series(panel, DiffMode::Learning, Method::Ccd, |t| ccd_learning(panel, t))
}

pub fn did_series(panel: &CohortPanel) -> LearningCurve {
    series(panel, DiffMode::Learning, Method::Did, |t| did_learning(panel, t))
}

/// Learning curve for `method`.
pub fn learning_series(panel: &CohortPanel, method: Method) -> LearningCurve {
    match method {
        Method::Ccd => ccd_series(panel),
        Method::Did => did_series(panel),
        Method::Mc => multicohort_series(panel, DiffMode::Learning),
    }
}

/// Arm-level curve using only the day-0 cohort (no pooling), tagged with the
/// given baseline `method`.
pub fn first_cohort_series(panel: &CohortPanel, arm: Arm, method: Method) -> LearningCurve {
    series(panel, DiffMode::ArmLevel(arm), method, |t| {
        delta_k(panel, t, 0, DiffMode::ArmLevel(arm)).map(|mut e| {
            e.k_used = vec![0];
            e
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{build_panel, Observation, UserRecord};

    /// Cohort with metric values `vals` on day `day`; users are active only
    /// on that day unless they also appear elsewhere.
    fn cohort(prefix: &str, arm: Arm, entry: u32, days: &[(u32, &[f64])]) -> Vec<UserRecord> {
        let n = days[0].1.len();
        (0..n)
            .map(|i| UserRecord {
                user_id: format!("{prefix}{i}"),
                arm,
                entry_day: entry,
                observations: days
                    .iter()
                    .map(|&(day, vals)| Observation {
                        day,
                        metric: vals[i],
                        active: true,
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn ccd_arithmetic() {
        // T_0^2 = 3 and T_2^2 = 1, each with s2 = 1 over two users -> var 0.5
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut recs = cohort("a", Arm::Treatment, 0, &[(2, &[3.0 - h, 3.0 + h])]);
        recs.extend(cohort("b", Arm::Treatment, 2, &[(2, &[1.0 - h, 1.0 + h])]));
        let p = build_panel(&recs, 3, PanelMode::Metric).unwrap();
        let e = ccd_learning(&p, 2).unwrap();
        assert!((e.value - 2.0).abs() < 1e-12);
        assert!((e.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_elapsed_is_exactly_zero() {
        let mut recs = cohort("a", Arm::Treatment, 0, &[(0, &[1.0, 2.0, 4.0]), (1, &[3.0, 1.0, 1.0])]);
        recs.extend(cohort(
            "c",
            Arm::Control,
            0,
            &[(0, &[0.0, 5.0, 2.0]), (1, &[1.0, 1.0, 2.0])],
        ));
        let p = build_panel(&recs, 2, PanelMode::Metric).unwrap();
        assert_eq!(ccd_learning(&p, 0).unwrap().value, 0.0);
        assert_eq!(did_learning(&p, 0).unwrap().value, 0.0);
        assert_eq!(did_learning(&p, 0).unwrap().variance, VARIANCE_FLOOR);
    }

    #[test]
    fn did_arithmetic() {
        // T_0 = {5 at t=0, 7 at t=3}, C_0 = {5, 6}
        let mut recs = cohort("a", Arm::Treatment, 0, &[(0, &[4.0, 6.0]), (3, &[6.0, 8.0])]);
        recs.extend(cohort("c", Arm::Control, 0, &[(0, &[4.0, 6.0]), (3, &[5.0, 7.0])]));
        let p = build_panel(&recs, 4, PanelMode::Metric).unwrap();
        let e = did_learning(&p, 3).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
        // perfectly correlated pairs with equal spread: variance cancels
        assert_eq!(e.variance, VARIANCE_FLOOR);
    }

    #[test]
    fn delta_k_learning_arithmetic() {
        // T_1^3 = 4 (var 0.25): {3.5, 4.5}; T_3^3 = 3 (var 0.75): s2 = 1.5
        let s = (1.5f64 / 2.0).sqrt();
        let mut recs = cohort("a", Arm::Treatment, 1, &[(3, &[3.5, 4.5])]);
        recs.extend(cohort("b", Arm::Treatment, 3, &[(3, &[3.0 - s, 3.0 + s])]));
        let p = build_panel(&recs, 4, PanelMode::Metric).unwrap();
        let e = delta_k(&p, 2, 1, DiffMode::Learning).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
        assert!((e.variance - 1.0).abs() < 1e-12);
        assert!(matches!(
            delta_k(&p, 2, 2, DiffMode::Learning),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            delta_k(&p, 1, 0, DiffMode::Learning),
            Err(Error::Unavailable { .. })
        ));
    }

    #[test]
    fn arm_level_is_the_cell() {
        let recs = cohort("a", Arm::Treatment, 5, &[(5, &[1.0, 2.0, 6.0])]);
        let p = build_panel(&recs, 6, PanelMode::Metric).unwrap();
        let e = delta_k(&p, 0, 5, DiffMode::ArmLevel(Arm::Treatment)).unwrap();
        let c = p.cell(Arm::Treatment, 5, 5).unwrap();
        assert_eq!(e.value, c.mean);
        assert_eq!(e.variance, c.var_of_mean);
    }

    #[test]
    fn two_term_inverse_variance() {
        let terms = [
            Estimate {
                value: 2.0,
                variance: 1.0,
                k_used: vec![0],
            },
            Estimate {
                value: 4.0,
                variance: 4.0,
                k_used: vec![1],
            },
        ];
        let w = inverse_variance_weights(&terms);
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
        let e = combine(&terms).unwrap();
        assert!((e.value - 2.4).abs() < 1e-15);
        assert!((e.variance - 0.8).abs() < 1e-15);
        assert_eq!(e.k_used, vec![0, 1]);
        assert!(combine(&[]).is_none());
    }

    #[test]
    fn equal_variances_give_plain_mean() {
        let terms: Vec<Estimate> = [1.0, 2.0, 6.0, -3.0]
            .iter()
            .enumerate()
            .map(|(k, &v)| Estimate {
                value: v,
                variance: 0.3,
                k_used: vec![k as u32],
            })
            .collect();
        let e = combine(&terms).unwrap();
        assert!((e.value - 1.5).abs() < 1e-14);
        assert!((e.variance - 0.075).abs() < 1e-15);
    }

    #[test]
    fn mode_labels() {
        assert_eq!(DiffMode::ArmLevel(Arm::Control).to_string(), "arm_level:C");
        assert_eq!("did".parse::<Method>().unwrap(), Method::Did);
        assert!("xyz".parse::<Method>().is_err());
    }
}
