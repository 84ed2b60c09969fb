//! Weighted least-squares fit of `f(t) = gamma + alpha * exp(-beta * t)`.
//!
//! The model is linear in `(gamma, alpha)` once `beta` is fixed, so the
//! solver profiles `beta` over a log-spaced grid, solves the linear part in
//! closed form at each grid point, and refines the best grid point with a
//! golden-section search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID_POINTS: usize = 200;
const BETA_MIN: f64 = 1e-3;
const BETA_MAX: f64 = 10.0;
/// Golden-section stops once the bracket is this narrow relative to beta.
const REFINE_REL_WIDTH: f64 = 1e-8;
/// `beta * max(t)` below this makes {1, exp(-beta t)} numerically collinear.
const COLLINEAR_LIMIT: f64 = 1e-3;
const CONVERGED_REL_IMPROVEMENT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub weighted_sse: f64,
    pub converged: bool,
    pub degenerate: bool,
}

impl DecayFit {
    pub fn predict(&self, t: f64) -> f64 {
        self.gamma + self.alpha * (-self.beta * t).exp()
    }

    /// Limit of the model as `t` grows without bound.
    pub fn asymptote(&self) -> f64 {
        self.gamma
    }

    /// Whether the data pin down `gamma`: the fitted half-life must fall
    /// inside `0..=t_max`. Slower decays are close to a straight line over
    /// the window and their asymptote is an extrapolation of a slope.
    pub fn asymptote_identified(&self, t_max: f64) -> bool {
        self.degenerate || self.beta * t_max >= std::f64::consts::LN_2
    }

    /// Long-run level: the asymptote when identified, otherwise the fitted
    /// value at `t_max`.
    pub fn long_run(&self, t_max: f64) -> f64 {
        if self.asymptote_identified(t_max) {
            self.asymptote()
        } else {
            self.predict(t_max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight `1 / variance` per point.
    #[default]
    InverseVariance,
    Unit,
}

/// Profile solution at a fixed `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub gamma: f64,
    pub alpha: f64,
    pub sse: f64,
}

struct Series {
    t: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Series {
    fn profile(&self, beta: f64) -> Profile {
        let total: f64 = self.w.iter().sum();
        let z: Vec<f64> = self.t.iter().map(|&t| (-beta * t).exp()).collect();
        let z_bar = self.w.iter().zip(&z).map(|(w, z)| w * z).sum::<f64>() / total;
        let y_bar = self.w.iter().zip(&self.y).map(|(w, y)| w * y).sum::<f64>() / total;
        let mut szz = 0.0;
        let mut szy = 0.0;
        for ((&w, &zi), &yi) in self.w.iter().zip(&z).zip(&self.y) {
            let dz = zi - z_bar;
            szz += w * dz * dz;
            szy += w * dz * (yi - y_bar);
        }
        let alpha = if szz > 0.0 { szy / szz } else { 0.0 };
        let gamma = y_bar - alpha * z_bar;
        let sse = self
            .w
            .iter()
            .zip(&z)
            .zip(&self.y)
            .map(|((w, zi), yi)| {
                let r = yi - gamma - alpha * zi;
                w * r * r
            })
            .sum();
        Profile { gamma, alpha, sse }
    }
}

fn series(points: &[(f64, f64, f64)], weighting: Weighting) -> Result<Series> {
    if points.len() < 4 {
        return Err(Error::Unfittable {
            curve: "decay".into(),
            points: points.len(),
        });
    }
    let mut s = Series {
        t: Vec::with_capacity(points.len()),
        y: Vec::with_capacity(points.len()),
        w: Vec::with_capacity(points.len()),
    };
    for &(t, y, var) in points {
        if !t.is_finite() || t < 0.0 || !y.is_finite() {
            return Err(Error::BadFitInput(format!("non-finite or negative point ({t}, {y})")));
        }
        let w = match weighting {
            Weighting::Unit => 1.0,
            Weighting::InverseVariance => {
                if !(var.is_finite() && var > 0.0) {
                    return Err(Error::BadFitInput(format!("variance {var} at t = {t} is not positive")));
                }
                1.0 / var
            }
        };
        s.t.push(t);
        s.y.push(y);
        s.w.push(w);
    }
    Ok(s)
}

/// The `beta` values the profile scans, ascending.
pub fn beta_grid() -> Vec<f64> {
    let step = (BETA_MAX / BETA_MIN).log10() / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS)
        .map(|i| BETA_MIN * 10f64.powf(step * i as f64))
        .collect()
}

/// Closed-form weighted `(gamma, alpha)` at a fixed `beta`.
pub fn profile_at(points: &[(f64, f64, f64)], weighting: Weighting, beta: f64) -> Result<Profile> {
    Ok(series(points, weighting)?.profile(beta))
}

/// Fits with inverse-variance weights.
pub fn fit_exponential(points: &[(f64, f64, f64)]) -> Result<DecayFit> {
    fit_exponential_with(points, Weighting::InverseVariance)
}

pub fn fit_exponential_with(points: &[(f64, f64, f64)], weighting: Weighting) -> Result<DecayFit> {
    fit_traced(points, weighting).map(|(fit, _)| fit)
}

/// Fits and also returns the best-so-far weighted SSE after the grid scan
/// and after every refinement step.
pub fn fit_traced(points: &[(f64, f64, f64)], weighting: Weighting) -> Result<(DecayFit, Vec<f64>)> {
    let s = series(points, weighting)?;

    let first = s.y[0];
    if s.y.iter().all(|&y| y == first) {
        let fit = DecayFit {
            gamma: first,
            alpha: 0.0,
            beta: 0.0,
            weighted_sse: 0.0,
            converged: true,
            degenerate: true,
        };
        return Ok((fit, vec![0.0]));
    }

    let t_max = s.t.iter().copied().fold(0.0, f64::max);
    let grid: Vec<f64> = beta_grid()
        .into_iter()
        .filter(|b| b * t_max >= COLLINEAR_LIMIT)
        .collect();
    if grid.is_empty() {
        return Err(Error::BadFitInput("time points span too short an interval".into()));
    }

    // strict `<` keeps the smaller beta on ties
    let mut best_i = 0;
    let mut best = s.profile(grid[0]);
    for (i, &b) in grid.iter().enumerate().skip(1) {
        let p = s.profile(b);
        if p.sse < best.sse {
            best = p;
            best_i = i;
        }
    }
    let mut best_beta = grid[best_i];
    let mut trace = vec![best.sse];

    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(grid.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut p1 = s.profile(x1);
    let mut p2 = s.profile(x2);
    let mut last_improvement = 0.0;
    let mut last_prev = best.sse;
    while hi - lo > REFINE_REL_WIDTH * 0.5 * (hi + lo) {
        if p1.sse <= p2.sse {
            hi = x2;
            x2 = x1;
            p2 = p1;
            x1 = hi - inv_phi * (hi - lo);
            p1 = s.profile(x1);
        } else {
            lo = x1;
            x1 = x2;
            p1 = p2;
            x2 = lo + inv_phi * (hi - lo);
            p2 = s.profile(x2);
        }
        let (cand_beta, cand) = if p1.sse <= p2.sse { (x1, p1) } else { (x2, p2) };
        last_prev = best.sse;
        last_improvement = 0.0;
        if cand.sse < best.sse {
            last_improvement = best.sse - cand.sse;
            best = cand;
            best_beta = cand_beta;
        }
        trace.push(best.sse);
    }

    let total_ss = {
        let w: f64 = s.w.iter().sum();
        let y_bar = s.w.iter().zip(&s.y).map(|(w, y)| w * y).sum::<f64>() / w;
        s.w.iter().zip(&s.y).map(|(w, y)| w * (y - y_bar).powi(2)).sum::<f64>()
    };
    let interior = best_i > 0 && best_i + 1 < grid.len();
    let settled = last_improvement <= CONVERGED_REL_IMPROVEMENT * (last_prev + 1e-12 * total_ss);

    let fit = DecayFit {
        gamma: best.gamma,
        alpha: best.alpha,
        beta: best_beta,
        weighted_sse: best.sse,
        converged: interior && settled,
        degenerate: false,
    };
    Ok((fit, trace))
}
