//! Decision metrics: short-term effect, long-term effect and incremental
//! expected remaining lifetime value, with bootstrap uncertainty.
//!
//! * STE is the naive treated-minus-control difference over the first days
//!   of calendar time.
//! * LTE is the asymptote of a decay model fitted to the treatment-effect
//!   trajectory (active users only). The baselines fit their learning curve
//!   instead and add the first-day effect of the day-0 cohort.
//! * ΔERLV fits decay models to both arms' metric and survival curves and
//!   sums `f_T * S_T - f_C * S_C` over the horizon. The baselines build
//!   those curves from the day-0 cohort alone.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decay::{fit_exponential_with, DecayFit, Weighting};
use crate::error::{Error, Result};
use crate::estimators::{
    first_cohort_series, learning_series, multicohort_series, DiffMode, LearningCurve, Method, Z95,
};
use crate::exec::Exec;
use crate::panel::{aggregate, Arm, CohortPanel, Dataset, PanelMode};
use crate::simulate::substream;

/// Bootstrap runs with more failed replicates than this are unstable.
pub const MAX_FAILURE_RATE: f64 = 0.2;
pub const MIN_REPLICATES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "STE")]
    Ste,
    #[serde(rename = "LTE")]
    Lte,
    #[serde(rename = "dERLV")]
    Derlv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub name: MetricName,
    pub value: f64,
    pub std: f64,
    pub ci95: (f64, f64),
    /// `None` for STE, which does not depend on the trajectory estimator.
    pub method: Option<Method>,
}

impl MetricEstimate {
    pub fn covers(&self, x: f64) -> bool {
        self.ci95.0 <= x && x <= self.ci95.1
    }
}

/// Per-arm pooled active-user-day mean over calendar days `< window` and
/// its user-clustered variance.
fn pooled_arm_mean(data: &Dataset, arm: Arm, window: u32, mult: Option<&[u32]>) -> Option<(f64, f64)> {
    // (metric sum, active days, multiplicity) per contributing user
    let mut per_user: Vec<(f64, f64, f64)> = Vec::new();
    for (i, u) in data.users().iter().enumerate() {
        if u.arm != arm || u.entry >= window {
            continue;
        }
        let w = mult.map_or(1, |m| m[i]);
        if w == 0 {
            continue;
        }
        let span = (window - u.entry) as usize;
        let (mut sum, mut days) = (0.0, 0.0);
        for (&on, &m) in u.active.iter().zip(&u.metric).take(span) {
            if on {
                sum += m;
                days += 1.0;
            }
        }
        if days > 0.0 {
            per_user.push((sum, days, f64::from(w)));
        }
    }
    let users: f64 = per_user.iter().map(|u| u.2).sum();
    if users == 0.0 {
        return None;
    }
    let total: f64 = per_user.iter().map(|u| u.2 * u.0).sum();
    let days: f64 = per_user.iter().map(|u| u.2 * u.1).sum();
    let mean = total / days;
    let variance = if users < 2.0 {
        0.0
    } else {
        let resid: f64 = per_user.iter().map(|&(s, d, w)| w * (s - mean * d).powi(2)).sum();
        users / (users - 1.0) * resid / (days * days)
    };
    Some((mean, variance))
}

fn ste_value(data: &Dataset, window: u32, mult: Option<&[u32]>) -> Result<(f64, f64)> {
    if window == 0 || window > data.duration() {
        return Err(Error::InvalidConfig(format!(
            "STE window {window} must lie in [1, {}]",
            data.duration()
        )));
    }
    let (t_mean, t_var) = pooled_arm_mean(data, Arm::Treatment, window, mult).ok_or(Error::EmptyArm {
        arm: Arm::Treatment,
        window,
    })?;
    let (c_mean, c_var) = pooled_arm_mean(data, Arm::Control, window, mult).ok_or(Error::EmptyArm {
        arm: Arm::Control,
        window,
    })?;
    Ok((t_mean - c_mean, t_var + c_var))
}

/// Short-term effect over calendar days `0..window`, with a user-clustered
/// analytic standard error.
pub fn estimate_ste(data: &Dataset, window: u32) -> Result<MetricEstimate> {
    let (value, variance) = ste_value(data, window, None)?;
    let std = variance.sqrt();
    Ok(MetricEstimate {
        name: MetricName::Ste,
        value,
        std,
        ci95: (value - Z95 * std, value + Z95 * std),
        method: None,
    })
}

fn fit_curve(curve: &LearningCurve, name: &str, weighting: Weighting) -> Result<DecayFit> {
    if !curve.is_fittable() {
        return Err(Error::Unfittable {
            curve: name.to_string(),
            points: curve.points.len(),
        });
    }
    fit_exponential_with(&curve.fit_points(), weighting).map_err(|e| match e {
        Error::Unfittable { points, .. } => Error::Unfittable {
            curve: name.to_string(),
            points,
        },
        other => other,
    })
}

fn last_t(curve: &LearningCurve) -> f64 {
    curve.points.last().map_or(0.0, |p| f64::from(p.t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LteResult {
    pub value: f64,
    pub fit: DecayFit,
    pub curve: LearningCurve,
    /// First-day effect added to the learning asymptote (baselines only).
    pub first_day_effect: Option<f64>,
}

/// Multi-cohort LTE: long-run level of the fitted treatment-effect
/// trajectory (see [`DecayFit::long_run`]).
pub fn estimate_lte(metric_panel: &CohortPanel) -> Result<LteResult> {
    estimate_lte_with(metric_panel, Weighting::default())
}

pub fn estimate_lte_with(metric_panel: &CohortPanel, weighting: Weighting) -> Result<LteResult> {
    let curve = multicohort_series(metric_panel, DiffMode::Effect);
    let fit = fit_curve(&curve, "effect", weighting)?;
    Ok(LteResult {
        value: fit.long_run(last_t(&curve)),
        fit,
        curve,
        first_day_effect: None,
    })
}

/// CCD / DiD LTE: learning asymptote plus the day-0 cohort's first-day
/// effect. `Method::Mc` delegates to [`estimate_lte_with`].
pub fn baseline_lte(metric_panel: &CohortPanel, method: Method, weighting: Weighting) -> Result<LteResult> {
    if method == Method::Mc {
        return estimate_lte_with(metric_panel, weighting);
    }
    let curve = learning_series(metric_panel, method);
    let fit = fit_curve(&curve, &format!("learning:{method}"), weighting)?;
    let treated = metric_panel.usable_cell(Arm::Treatment, 0, 0);
    let control = metric_panel.usable_cell(Arm::Control, 0, 0);
    let (Some(tr), Some(co)) = (treated, control) else {
        return Err(Error::Unavailable {
            t: 0,
            reason: "day-0 cohort too small for the first-day effect".into(),
        });
    };
    let tau = tr.mean - co.mean;
    Ok(LteResult {
        value: tau + fit.long_run(last_t(&curve)),
        fit,
        curve,
        first_day_effect: Some(tau),
    })
}

/// The four models behind a ΔERLV estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErlvFits {
    pub metric_t: DecayFit,
    pub metric_c: DecayFit,
    pub survival_t: DecayFit,
    pub survival_c: DecayFit,
}

impl ErlvFits {
    /// Treated-minus-control survival-weighted value at elapsed `t`.
    pub fn increment(&self, t: f64) -> f64 {
        let s_t = self.survival_t.predict(t).clamp(0.0, 1.0);
        let s_c = self.survival_c.predict(t).clamp(0.0, 1.0);
        self.metric_t.predict(t) * s_t - self.metric_c.predict(t) * s_c
    }

    /// Sum of increments over elapsed days `start..=horizon`.
    pub fn delta_erlv(&self, start: u32, horizon: u32) -> f64 {
        (start..=horizon).map(|t| self.increment(f64::from(t))).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErlvResult {
    pub value: f64,
    pub fits: ErlvFits,
    /// Metric T, metric C, survival T, survival C.
    pub curves: Vec<LearningCurve>,
}

fn erlv_from_curves(curves: [LearningCurve; 4], weighting: Weighting, start: u32, horizon: u32) -> Result<ErlvResult> {
    let names = ["metric:T", "metric:C", "survival:T", "survival:C"];
    let mut fits = Vec::with_capacity(4);
    for (curve, name) in curves.iter().zip(names) {
        fits.push(fit_curve(curve, name, weighting)?);
    }
    let fits = ErlvFits {
        metric_t: fits[0],
        metric_c: fits[1],
        survival_t: fits[2],
        survival_c: fits[3],
    };
    Ok(ErlvResult {
        value: fits.delta_erlv(start, horizon),
        fits,
        curves: curves.into(),
    })
}

fn check_modes(metric_panel: &CohortPanel, presence_panel: &CohortPanel) -> Result<()> {
    if metric_panel.mode() != PanelMode::Metric || presence_panel.mode() != PanelMode::Presence {
        return Err(Error::InvalidConfig(
            "expected a metric panel and a presence panel".into(),
        ));
    }
    Ok(())
}

/// Multi-cohort ΔERLV summed over elapsed days `start..=horizon`.
pub fn estimate_delta_erlv(
    metric_panel: &CohortPanel,
    presence_panel: &CohortPanel,
    horizon: u32,
    start: u32,
    weighting: Weighting,
) -> Result<ErlvResult> {
    check_modes(metric_panel, presence_panel)?;
    let curves = [
        multicohort_series(metric_panel, DiffMode::ArmLevel(Arm::Treatment)),
        multicohort_series(metric_panel, DiffMode::ArmLevel(Arm::Control)),
        multicohort_series(presence_panel, DiffMode::ArmLevel(Arm::Treatment)),
        multicohort_series(presence_panel, DiffMode::ArmLevel(Arm::Control)),
    ];
    erlv_from_curves(curves, weighting, start, horizon)
}

/// ΔERLV from the day-0 cohort only, as used to extend CCD and DiD.
/// Both baselines share this construction; `method` only labels the curves.
pub fn baseline_delta_erlv(
    metric_panel: &CohortPanel,
    presence_panel: &CohortPanel,
    method: Method,
    horizon: u32,
    start: u32,
    weighting: Weighting,
) -> Result<ErlvResult> {
    if method == Method::Mc {
        return estimate_delta_erlv(metric_panel, presence_panel, horizon, start, weighting);
    }
    check_modes(metric_panel, presence_panel)?;
    let curves = [
        first_cohort_series(metric_panel, Arm::Treatment, method),
        first_cohort_series(metric_panel, Arm::Control, method),
        first_cohort_series(presence_panel, Arm::Treatment, method),
        first_cohort_series(presence_panel, Arm::Control, method),
    ];
    erlv_from_curves(curves, weighting, start, horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Last elapsed day of the ΔERLV sum; `None` means the experiment
    /// duration.
    pub horizon: Option<u32>,
    /// First elapsed day of the ΔERLV sum.
    pub start: u32,
    /// STE window in calendar days.
    pub window: u32,
    pub methods: Vec<Method>,
    pub weighting: Weighting,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            horizon: None,
            start: 0,
            window: 7,
            methods: Method::ALL.to_vec(),
            weighting: Weighting::InverseVariance,
        }
    }
}

impl AnalysisOptions {
    pub fn horizon_for(&self, data: &Dataset) -> u32 {
        self.horizon.unwrap_or(data.duration())
    }
}

/// Everything computed from one (possibly resampled) dataset.
#[derive(Debug, Clone)]
pub struct PointAnalysis {
    pub ste: Result<(f64, f64), String>,
    pub learning: Vec<LearningCurve>,
    pub lte: Vec<(Method, Result<LteResult, String>)>,
    pub derlv: Vec<(Method, Result<ErlvResult, String>)>,
}

impl PointAnalysis {
    pub fn lte_value(&self, method: Method) -> Option<f64> {
        self.lte
            .iter()
            .find(|(m, _)| *m == method)
            .and_then(|(_, r)| r.as_ref().ok().map(|l| l.value))
    }

    pub fn derlv_value(&self, method: Method) -> Option<f64> {
        self.derlv
            .iter()
            .find(|(m, _)| *m == method)
            .and_then(|(_, r)| r.as_ref().ok().map(|e| e.value))
    }

    pub fn learning_curve(&self, method: Method) -> Option<&LearningCurve> {
        self.learning.iter().find(|c| c.method == method)
    }
}

/// Runs the whole pipeline once. `mult` gives per-user multiplicities.
pub fn analyze_point(data: &Dataset, mult: Option<&[u32]>, opts: &AnalysisOptions) -> PointAnalysis {
    let metric = aggregate(data, PanelMode::Metric, mult, Exec::Sequential);
    let presence = aggregate(data, PanelMode::Presence, mult, Exec::Sequential);
    let horizon = opts.horizon_for(data);

    let ste = ste_value(data, opts.window.min(data.duration()), mult).map_err(|e| e.to_string());
    let learning = opts.methods.iter().map(|&m| learning_series(&metric, m)).collect();
    let lte = opts
        .methods
        .iter()
        .map(|&m| (m, baseline_lte(&metric, m, opts.weighting).map_err(|e| e.to_string())))
        .collect();

    // CCD and DiD share the day-0 construction; compute it once
    let mut first_cohort: Option<Result<ErlvResult, String>> = None;
    let derlv = opts
        .methods
        .iter()
        .map(|&m| {
            let r = match m {
                Method::Mc => estimate_delta_erlv(&metric, &presence, horizon, opts.start, opts.weighting)
                    .map_err(|e| e.to_string()),
                baseline => first_cohort
                    .get_or_insert_with(|| {
                        baseline_delta_erlv(&metric, &presence, baseline, horizon, opts.start, opts.weighting)
                            .map_err(|e| e.to_string())
                    })
                    .clone(),
            };
            (m, r)
        })
        .collect();

    PointAnalysis {
        ste,
        learning,
        lte,
        derlv,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub method: Method,
    pub lte: Option<MetricEstimate>,
    pub derlv: Option<MetricEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub duration: u32,
    pub horizon: u32,
    pub window: u32,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub unstable: bool,
    pub ste: Option<MetricEstimate>,
    /// Multi-cohort LTE.
    pub lte: Option<MetricEstimate>,
    /// Multi-cohort ΔERLV.
    pub derlv: Option<MetricEstimate>,
    pub baselines: Vec<BaselineMetrics>,
    pub fits: BTreeMap<String, DecayFit>,
    pub curves: Vec<LearningCurve>,
    pub diagnostics: Vec<String>,
}

impl AnalysisReport {
    /// Every curve that went into the report, for CSV export.
    pub fn curves_for(&self, method: Method) -> Vec<LearningCurve> {
        self.curves.iter().filter(|c| c.method == method).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub exec: Exec,
}

/// Resampled user multiplicities for replicate `index`: users are drawn with
/// replacement within each arm, so arm sizes are preserved.
pub fn resample(arm_indices: &[Vec<usize>; 2], n_users: usize, seed: u64, index: u64) -> Vec<u32> {
    let mut rng = substream(seed, index);
    let mut mult = vec![0u32; n_users];
    for idx in arm_indices {
        if idx.is_empty() {
            continue;
        }
        for _ in 0..idx.len() {
            mult[idx[rng.random_range(0..idx.len())]] += 1;
        }
    }
    mult
}

/// Linear-interpolated sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

struct Summary {
    estimate: Option<MetricEstimate>,
    failures: usize,
}

fn summarize(name: MetricName, method: Option<Method>, point: Option<f64>, draws: &[Option<f64>]) -> Summary {
    let mut ok: Vec<f64> = draws.iter().flatten().copied().collect();
    let failures = draws.len() - ok.len();
    let Some(value) = point else {
        return Summary {
            estimate: None,
            failures,
        };
    };
    if ok.len() < 2 {
        return Summary {
            estimate: None,
            failures,
        };
    }
    ok.sort_by(f64::total_cmp);
    let std = sample_std(&ok);
    // the point value is kept inside its own interval
    let lo = quantile_sorted(&ok, 0.025).min(value);
    let hi = quantile_sorted(&ok, 0.975).max(value);
    Summary {
        estimate: Some(MetricEstimate {
            name,
            value,
            std,
            ci95: (lo, hi),
            method,
        }),
        failures,
    }
}

/// Point estimates from the full data and bootstrap uncertainty from
/// `boot.replicates` user-level resamples.
pub fn bootstrap_report(data: &Dataset, opts: &AnalysisOptions, boot: &BootstrapOptions) -> Result<AnalysisReport> {
    if boot.replicates < MIN_REPLICATES {
        return Err(Error::InvalidConfig(format!(
            "at least {MIN_REPLICATES} bootstrap replicates required, got {}",
            boot.replicates
        )));
    }
    if opts.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods selected".into()));
    }
    let point = analyze_point(data, None, opts);
    let arms = [data.arm_indices(Arm::Treatment), data.arm_indices(Arm::Control)];

    let draws: Vec<PointAnalysis> = boot.exec.map_indices(boot.replicates, |r| {
        let mult = resample(&arms, data.len(), boot.seed, r as u64 + 1);
        analyze_point(data, Some(&mult), opts)
    });

    let mut diagnostics = Vec::new();
    let mut worst_failures = 0usize;
    let mut any_point_failure = false;
    let failed_replicates = draws
        .iter()
        .filter(|d| d.ste.is_err() || d.lte.iter().any(|(_, r)| r.is_err()) || d.derlv.iter().any(|(_, r)| r.is_err()))
        .count();

    let mut track = |s: &Summary, label: &str, point_err: Option<&String>| {
        worst_failures = worst_failures.max(s.failures);
        if let Some(e) = point_err {
            any_point_failure = true;
            diagnostics.push(format!("{label}: {e}"));
        }
    };

    let ste_draws: Vec<Option<f64>> = draws.iter().map(|d| d.ste.as_ref().ok().map(|v| v.0)).collect();
    let ste = summarize(MetricName::Ste, None, point.ste.as_ref().ok().map(|v| v.0), &ste_draws);
    track(&ste, "STE", point.ste.as_ref().err());

    let mut lte = None;
    let mut derlv = None;
    let mut baselines = Vec::new();
    let mut fits = BTreeMap::new();
    let mut curves = Vec::new();
    for &method in &opts.methods {
        let lte_point = point.lte.iter().find(|(m, _)| *m == method).map(|(_, r)| r);
        let erlv_point = point.derlv.iter().find(|(m, _)| *m == method).map(|(_, r)| r);

        let l_draws: Vec<Option<f64>> = draws.iter().map(|d| d.lte_value(method)).collect();
        let l = summarize(MetricName::Lte, Some(method), point.lte_value(method), &l_draws);
        track(&l, &format!("LTE[{method}]"), lte_point.and_then(|r| r.as_ref().err()));

        let e_draws: Vec<Option<f64>> = draws.iter().map(|d| d.derlv_value(method)).collect();
        let e = summarize(MetricName::Derlv, Some(method), point.derlv_value(method), &e_draws);
        track(
            &e,
            &format!("dERLV[{method}]"),
            erlv_point.and_then(|r| r.as_ref().err()),
        );

        if let Some(c) = point.learning_curve(method) {
            curves.push(c.clone());
        }
        if let Some(Ok(r)) = lte_point {
            fits.insert(
                format!("{method}:{}", if method == Method::Mc { "effect" } else { "learning" }),
                r.fit,
            );
            if method == Method::Mc {
                curves.push(r.curve.clone());
            }
        }
        if let Some(Ok(r)) = erlv_point {
            for (name, fit) in [
                ("f_T", r.fits.metric_t),
                ("f_C", r.fits.metric_c),
                ("f_S_T", r.fits.survival_t),
                ("f_S_C", r.fits.survival_c),
            ] {
                fits.insert(format!("{method}:{name}"), fit);
            }
            curves.extend(r.curves.iter().cloned());
        }

        if method == Method::Mc {
            lte = l.estimate;
            derlv = e.estimate;
        } else {
            baselines.push(BaselineMetrics {
                method,
                lte: l.estimate,
                derlv: e.estimate,
            });
        }
    }

    let failure_rate = worst_failures as f64 / boot.replicates as f64;
    if failure_rate > MAX_FAILURE_RATE {
        diagnostics.push(format!(
            "{worst_failures} of {} replicates failed for at least one metric",
            boot.replicates
        ));
    }
    Ok(AnalysisReport {
        seed: boot.seed,
        duration: data.duration(),
        horizon: opts.horizon_for(data),
        window: opts.window.min(data.duration()),
        replicates: boot.replicates,
        failed_replicates,
        unstable: any_point_failure || failure_rate > MAX_FAILURE_RATE,
        ste: ste.estimate,
        lte,
        derlv,
        baselines,
        fits,
        curves,
        diagnostics,
    })
}
