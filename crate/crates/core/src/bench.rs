//! Monte Carlo harness for the two simulation experiments.
//!
//! `Comparison` draws random scenarios, runs CCD, DiD and the multi-cohort
//! estimator on each and reports mean learning-curve interval width and the
//! absolute errors of LTE and ΔERLV against the simulator's ground truth.
//! `NoveltyChurn` fixes a novelty-plus-churn configuration and reports STE, LTE
//! and ΔERLV with bootstrap intervals.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::exec::Exec;
use crate::metrics::{analyze_point, bootstrap_report, sample_std, AnalysisOptions, BootstrapOptions, MetricEstimate};
use crate::simulate::{generate_dataset, substream, true_delta_erlv, true_lte, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Comparison,
    NoveltyChurn,
}

/// Distribution of one scenario parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Fixed(f64),
    Uniform {
        lo: f64,
        hi: f64,
    },
    Normal {
        mean: f64,
        std: f64,
    },
    /// Integer uniform on `lo..=hi`.
    UniformInt {
        lo: u32,
        hi: u32,
    },
}

impl Dist {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Dist::Fixed(v) => v.is_finite(),
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Dist::Normal { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            Dist::UniformInt { lo, hi } => lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid distribution for {name}: {self:?}"
            )))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
            Dist::Normal { mean, std } => Normal::new(mean, std).map_or(mean, |n| n.sample(rng)),
            Dist::UniformInt { lo, hi } => f64::from(rng.random_range(lo..=hi)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDists {
    #[serde(rename = "T")]
    pub duration: Dist,
    pub alpha_eff: Dist,
    pub beta_eff: Dist,
    pub alpha_churn: Dist,
    pub beta_churn: Dist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonPolicy {
    /// Sum up to the (possibly random) experiment duration.
    Duration,
    Fixed(u32),
    /// Duration plus this many extrapolated days.
    Extra(u32),
}

impl HorizonPolicy {
    fn resolve(self, duration: u32) -> u32 {
        match self {
            HorizonPolicy::Duration => duration,
            HorizonPolicy::Fixed(h) => h,
            HorizonPolicy::Extra(e) => duration + e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub experiment: Experiment,
    pub n_sims: usize,
    pub seed: u64,
    pub n_users: usize,
    pub methods: Vec<Method>,
    pub params: ParamDists,
    pub horizon: HorizonPolicy,
    /// Bootstrap replicates per sim (novelty-churn only).
    pub bootstrap: usize,
    pub window: u32,
    /// Baseline rate, retention and arm split; the drawn parameters and the
    /// user count override the matching fields.
    pub base: SimConfig,
}

impl BenchSpec {
    /// Three-method comparison over random scenarios.
    pub fn comparison() -> Self {
        BenchSpec {
            experiment: Experiment::Comparison,
            n_sims: 100,
            seed: 2026,
            n_users: 10_000,
            methods: Method::ALL.to_vec(),
            params: ParamDists {
                duration: Dist::UniformInt { lo: 7, hi: 14 },
                alpha_eff: Dist::Uniform { lo: 0.05, hi: 0.2 },
                beta_eff: Dist::Uniform { lo: 0.1, hi: 0.5 },
                alpha_churn: Dist::Uniform { lo: 0.0, hi: 0.1 },
                beta_churn: Dist::Uniform { lo: 0.05, hi: 0.3 },
            },
            horizon: HorizonPolicy::Duration,
            bootstrap: 0,
            window: 7,
            base: SimConfig::default(),
        }
    }

    /// Novelty boost with treatment-induced churn.
    pub fn novelty_churn() -> Self {
        BenchSpec {
            experiment: Experiment::NoveltyChurn,
            n_sims: 100,
            seed: 2026,
            n_users: 10_000,
            methods: vec![Method::Mc],
            params: ParamDists {
                duration: Dist::Fixed(14.0),
                alpha_eff: Dist::Normal { mean: 0.1, std: 0.07 },
                beta_eff: Dist::Fixed(1.0 / 3.0),
                alpha_churn: Dist::Normal { mean: 0.2, std: 0.07 },
                beta_churn: Dist::Fixed(1.0 / 3.0),
            },
            horizon: HorizonPolicy::Duration,
            bootstrap: 200,
            window: 7,
            base: SimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sims == 0 {
            return Err(Error::InvalidConfig("n_sims must be at least 1".into()));
        }
        if self.n_users == 0 {
            return Err(Error::InvalidConfig("n_users must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods selected".into()));
        }
        let p = &self.params;
        for (name, d) in [
            ("T", p.duration),
            ("alpha_eff", p.alpha_eff),
            ("beta_eff", p.beta_eff),
            ("alpha_churn", p.alpha_churn),
            ("beta_churn", p.beta_churn),
        ] {
            d.validate(name)?;
        }
        if self.experiment == Experiment::NoveltyChurn && self.bootstrap < crate::metrics::MIN_REPLICATES {
            return Err(Error::InvalidConfig(format!(
                "novelty-churn needs at least {} bootstrap replicates",
                crate::metrics::MIN_REPLICATES
            )));
        }
        Ok(())
    }

    /// Simulation config for sim `index`.
    pub fn sim_config(&self, index: usize) -> SimConfig {
        let mut rng = substream(self.seed, index as u64);
        let p = &self.params;
        let duration = p.duration.sample(&mut rng).round().max(0.0) as u32;
        let alpha_eff = p.alpha_eff.sample(&mut rng);
        let beta_eff = p.beta_eff.sample(&mut rng);
        let alpha_churn = p.alpha_churn.sample(&mut rng);
        let beta_churn = p.beta_churn.sample(&mut rng);
        SimConfig {
            duration,
            n_users: self.n_users,
            alpha_eff,
            beta_eff,
            alpha_churn,
            beta_churn,
            seed: rng.random(),
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        MeanStd {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            std: sample_std(xs),
        }
    }

    /// Standard error of the mean over `n` draws.
    pub fn std_err(&self, n: usize) -> f64 {
        self.std / (n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub ci_width: Option<f64>,
    pub lte: Option<f64>,
    pub derlv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub sim: usize,
    #[serde(rename = "T")]
    pub duration: u32,
    pub alpha_eff: f64,
    pub beta_eff: f64,
    pub alpha_churn: f64,
    pub beta_churn: f64,
    pub horizon: u32,
    pub true_lte: f64,
    pub true_derlv: f64,
    pub methods: Vec<MethodRow>,
    pub ste: Option<MetricEstimate>,
    pub lte: Option<MetricEstimate>,
    pub derlv: Option<MetricEstimate>,
    pub unstable: bool,
    pub error: Option<String>,
}

impl SimRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn method(&self, m: Method) -> Option<&MethodRow> {
        self.methods.iter().find(|r| r.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n: usize,
    pub ci_width: MeanStd,
    pub mae_lte: MeanStd,
    pub mae_derlv: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyChurnSummary {
    pub n: usize,
    pub ste: MeanStd,
    pub lte: MeanStd,
    pub derlv: MeanStd,
    pub ste_ci_covers_zero: usize,
    pub lte_ci_covers_zero: usize,
    pub derlv_ci_covers_zero: usize,
    pub unstable: usize,
}

/// Per-elapsed-day means over sims of the multi-cohort arm curves:
/// clicks per active user and clicks weighted by the surviving fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurves {
    pub t: Vec<u32>,
    pub active_t: Vec<f64>,
    pub active_c: Vec<f64>,
    pub weighted_t: Vec<f64>,
    pub weighted_c: Vec<f64>,
}

impl MeanCurves {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "active_T", "active_C", "weighted_T", "weighted_C"])?;
        for i in 0..self.t.len() {
            w.write_record([
                self.t[i].to_string(),
                self.active_t[i].to_string(),
                self.active_c[i].to_string(),
                self.weighted_t[i].to_string(),
                self.weighted_c[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub n_ok: usize,
    pub n_failed: usize,
    pub methods: Vec<MethodSummary>,
    pub novelty_churn: Option<NoveltyChurnSummary>,
    pub mean_curves: Option<MeanCurves>,
    pub rows: Vec<SimRow>,
}

impl BenchReport {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    /// One row per sim.
    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "sim",
            "T",
            "alpha_eff",
            "beta_eff",
            "alpha_churn",
            "beta_churn",
            "horizon",
            "true_lte",
            "true_derlv",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let comparison = self.spec.experiment == Experiment::Comparison;
        if comparison {
            for m in &self.spec.methods {
                for col in ["ci_width", "lte", "derlv"] {
                    header.push(format!("{m}_{col}"));
                }
            }
        } else {
            for metric in ["ste", "lte", "derlv"] {
                for col in ["", "_std", "_lo", "_hi"] {
                    header.push(format!("{metric}{col}"));
                }
            }
            header.push("unstable".into());
        }
        header.push("error".into());
        w.write_record(&header)?;

        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.sim.to_string(),
                r.duration.to_string(),
                r.alpha_eff.to_string(),
                r.beta_eff.to_string(),
                r.alpha_churn.to_string(),
                r.beta_churn.to_string(),
                r.horizon.to_string(),
                r.true_lte.to_string(),
                r.true_derlv.to_string(),
            ];
            if comparison {
                for m in &self.spec.methods {
                    let mr = r.method(*m);
                    rec.push(opt(mr.and_then(|x| x.ci_width)));
                    rec.push(opt(mr.and_then(|x| x.lte)));
                    rec.push(opt(mr.and_then(|x| x.derlv)));
                }
            } else {
                for e in [&r.ste, &r.lte, &r.derlv] {
                    rec.push(opt(e.as_ref().map(|e| e.value)));
                    rec.push(opt(e.as_ref().map(|e| e.std)));
                    rec.push(opt(e.as_ref().map(|e| e.ci95.0)));
                    rec.push(opt(e.as_ref().map(|e| e.ci95.1)));
                }
                rec.push(u8::from(r.unstable).to_string());
            }
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Row plus the scenario-2 arm curves, which are averaged afterwards.
struct SimOutput {
    row: SimRow,
    arm_curves: Option<[Vec<(u32, f64)>; 4]>,
}

fn blank_row(sim: usize, cfg: &SimConfig, horizon: u32) -> SimRow {
    SimRow {
        sim,
        duration: cfg.duration,
        alpha_eff: cfg.alpha_eff,
        beta_eff: cfg.beta_eff,
        alpha_churn: cfg.alpha_churn,
        beta_churn: cfg.beta_churn,
        horizon,
        true_lte: true_lte(cfg),
        true_derlv: true_delta_erlv(cfg, horizon),
        methods: Vec::new(),
        ste: None,
        lte: None,
        derlv: None,
        unstable: false,
        error: None,
    }
}

fn options(spec: &BenchSpec, horizon: u32, methods: Vec<Method>) -> AnalysisOptions {
    AnalysisOptions {
        horizon: Some(horizon),
        window: spec.window,
        methods,
        ..AnalysisOptions::default()
    }
}

fn run_comparison_sim(spec: &BenchSpec, sim: usize) -> SimOutput {
    let cfg = spec.sim_config(sim);
    let horizon = spec.horizon.resolve(cfg.duration);
    let mut row = blank_row(sim, &cfg, horizon);
    let data = match generate_dataset(&cfg, Exec::Sequential) {
        Ok(d) => d,
        Err(e) => {
            row.error = Some(e.to_string());
            return SimOutput { row, arm_curves: None };
        }
    };
    let point = analyze_point(&data, None, &options(spec, horizon, spec.methods.clone()));
    let mut errors = Vec::new();
    for &m in &spec.methods {
        let ci_width = point.learning_curve(m).and_then(|c| c.mean_ci_width(1));
        let lte = point.lte_value(m);
        let derlv = point.derlv_value(m);
        if ci_width.is_none() {
            errors.push(format!("{m}: empty learning curve"));
        }
        for (label, r) in point
            .lte
            .iter()
            .filter(|(x, _)| *x == m)
            .map(|(_, r)| ("LTE", r.as_ref().err()))
        {
            if let Some(e) = r {
                errors.push(format!("{m} {label}: {e}"));
            }
        }
        for (_, r) in point.derlv.iter().filter(|(x, _)| *x == m) {
            if let Err(e) = r {
                errors.push(format!("{m} dERLV: {e}"));
            }
        }
        row.methods.push(MethodRow {
            method: m,
            ci_width,
            lte,
            derlv,
        });
    }
    if !errors.is_empty() {
        row.error = Some(errors.join("; "));
    }
    SimOutput { row, arm_curves: None }
}

fn run_novelty_churn_sim(spec: &BenchSpec, sim: usize) -> SimOutput {
    let cfg = spec.sim_config(sim);
    let horizon = spec.horizon.resolve(cfg.duration);
    let mut row = blank_row(sim, &cfg, horizon);
    let data = match generate_dataset(&cfg, Exec::Sequential) {
        Ok(d) => d,
        Err(e) => {
            row.error = Some(e.to_string());
            return SimOutput { row, arm_curves: None };
        }
    };
    let opts = options(spec, horizon, vec![Method::Mc]);
    let boot = BootstrapOptions {
        replicates: spec.bootstrap,
        seed: cfg.seed,
        exec: Exec::Sequential,
    };
    let report = match bootstrap_report(&data, &opts, &boot) {
        Ok(r) => r,
        Err(e) => {
            row.error = Some(e.to_string());
            return SimOutput { row, arm_curves: None };
        }
    };
    row.unstable = report.unstable;
    row.ste = report.ste.clone();
    row.lte = report.lte.clone();
    row.derlv = report.derlv.clone();
    if row.ste.is_none() || row.lte.is_none() || row.derlv.is_none() {
        row.error = Some(if report.diagnostics.is_empty() {
            "metric unavailable".into()
        } else {
            report.diagnostics.join("; ")
        });
    }

    let mc = report.curves_for(Method::Mc);
    let pick = |label: &str| -> Vec<(u32, f64)> {
        mc.iter()
            .find(|c| c.label() == label)
            .map(|c| c.points.iter().map(|p| (p.t, p.estimate.value)).collect())
            .unwrap_or_default()
    };
    let arm_curves = Some([
        pick("arm_level:T"),
        pick("arm_level:C"),
        pick("survival:T"),
        pick("survival:C"),
    ]);
    SimOutput { row, arm_curves }
}

fn mean_curves(outputs: &[SimOutput]) -> Option<MeanCurves> {
    let ok: Vec<&[Vec<(u32, f64)>; 4]> = outputs
        .iter()
        .filter(|o| o.row.ok())
        .filter_map(|o| o.arm_curves.as_ref())
        .collect();
    let max_t = ok
        .iter()
        .flat_map(|c| c.iter())
        .flat_map(|v| v.iter().map(|p| p.0))
        .max()?;
    let mut out = MeanCurves {
        t: Vec::new(),
        active_t: Vec::new(),
        active_c: Vec::new(),
        weighted_t: Vec::new(),
        weighted_c: Vec::new(),
    };
    let value = |v: &[(u32, f64)], t: u32| v.iter().find(|p| p.0 == t).map(|p| p.1);
    for t in 0..=max_t {
        let mut acc = [0.0; 4];
        let mut n = 0usize;
        for c in &ok {
            if let (Some(mt), Some(mc), Some(st), Some(sc)) =
                (value(&c[0], t), value(&c[1], t), value(&c[2], t), value(&c[3], t))
            {
                acc[0] += mt;
                acc[1] += mc;
                acc[2] += mt * st;
                acc[3] += mc * sc;
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let n = n as f64;
        out.t.push(t);
        out.active_t.push(acc[0] / n);
        out.active_c.push(acc[1] / n);
        out.weighted_t.push(acc[2] / n);
        out.weighted_c.push(acc[3] / n);
    }
    Some(out)
}

fn summarize_methods(spec: &BenchSpec, rows: &[SimRow]) -> Vec<MethodSummary> {
    let ok: Vec<&SimRow> = rows.iter().filter(|r| r.ok()).collect();
    spec.methods
        .iter()
        .map(|&m| {
            let mut widths = Vec::new();
            let mut lte_err = Vec::new();
            let mut derlv_err = Vec::new();
            for r in &ok {
                if let Some(mr) = r.method(m) {
                    widths.extend(mr.ci_width);
                    lte_err.extend(mr.lte.map(|v| (v - r.true_lte).abs()));
                    derlv_err.extend(mr.derlv.map(|v| (v - r.true_derlv).abs()));
                }
            }
            MethodSummary {
                method: m,
                n: ok.len(),
                ci_width: MeanStd::of(&widths),
                mae_lte: MeanStd::of(&lte_err),
                mae_derlv: MeanStd::of(&derlv_err),
            }
        })
        .collect()
}

fn summarize_novelty_churn(rows: &[SimRow]) -> NoveltyChurnSummary {
    let ok: Vec<&SimRow> = rows.iter().filter(|r| r.ok()).collect();
    let values = |f: fn(&SimRow) -> Option<&MetricEstimate>| -> Vec<f64> {
        ok.iter().filter_map(|r| f(r).map(|e| e.value)).collect()
    };
    let covers = |f: fn(&SimRow) -> Option<&MetricEstimate>| -> usize {
        ok.iter().filter(|r| f(r).is_some_and(|e| e.covers(0.0))).count()
    };
    NoveltyChurnSummary {
        n: ok.len(),
        ste: MeanStd::of(&values(|r| r.ste.as_ref())),
        lte: MeanStd::of(&values(|r| r.lte.as_ref())),
        derlv: MeanStd::of(&values(|r| r.derlv.as_ref())),
        ste_ci_covers_zero: covers(|r| r.ste.as_ref()),
        lte_ci_covers_zero: covers(|r| r.lte.as_ref()),
        derlv_ci_covers_zero: covers(|r| r.derlv.as_ref()),
        unstable: ok.iter().filter(|r| r.unstable).count(),
    }
}

fn finish(spec: &BenchSpec, outputs: Vec<SimOutput>) -> BenchReport {
    let curves = match spec.experiment {
        Experiment::NoveltyChurn => mean_curves(&outputs),
        Experiment::Comparison => None,
    };
    let rows: Vec<SimRow> = outputs.into_iter().map(|o| o.row).collect();
    let n_ok = rows.iter().filter(|r| r.ok()).count();
    let (methods, novelty_churn) = match spec.experiment {
        Experiment::Comparison => (summarize_methods(spec, &rows), None),
        Experiment::NoveltyChurn => (Vec::new(), Some(summarize_novelty_churn(&rows))),
    };
    BenchReport {
        spec: spec.clone(),
        n_ok,
        n_failed: rows.len() - n_ok,
        methods,
        novelty_churn,
        mean_curves: curves,
        rows,
    }
}

/// Runs the three-method comparison. Sims run in parallel under `exec`.
pub fn run_comparison(spec: &BenchSpec, exec: Exec) -> Result<BenchReport> {
    spec.validate()?;
    let outputs = exec.map_indices(spec.n_sims, |i| run_comparison_sim(spec, i));
    Ok(finish(spec, outputs))
}

/// Runs the STE / LTE / ΔERLV scenario.
pub fn run_novelty_churn(spec: &BenchSpec, exec: Exec) -> Result<BenchReport> {
    spec.validate()?;
    let outputs = exec.map_indices(spec.n_sims, |i| run_novelty_churn_sim(spec, i));
    Ok(finish(spec, outputs))
}

/// Dispatches on `spec.experiment`.
pub fn run(spec: &BenchSpec, exec: Exec) -> Result<BenchReport> {
    match spec.experiment {
        Experiment::Comparison => run_comparison(spec, exec),
        Experiment::NoveltyChurn => run_novelty_churn(spec, exec),
    }
}
