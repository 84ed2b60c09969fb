//! Synthetic staggered-entry A/B logs with user learning and churn.
//!
//! Baseline clicks are Gamma-heterogeneous Poisson counts; treated users get
//! an additive, exponentially decaying boost on their rate. Control users
//! survive each day with probability `p`; treated users survive with a
//! per-day probability chosen so that the expected surviving fraction at
//! elapsed day `x` is `p^x * (1 + alpha_churn * (exp(-beta_churn x) - 1))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::panel::{Arm, CompactUser, Dataset, Observation, UserRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Experiment duration in days.
    #[serde(rename = "T", alias = "duration")]
    pub duration: u32,
    pub n_users: usize,
    pub base_rate_shape: f64,
    pub base_rate_scale: f64,
    /// Daily survival probability of control users.
    pub base_retention: f64,
    pub alpha_eff: f64,
    pub beta_eff: f64,
    pub alpha_churn: f64,
    pub beta_churn: f64,
    pub treatment_share: f64,
    pub seed: u64,
    /// Non-decaying part of the injected effect (zero in both experiments).
    pub persistent_effect: f64,
    /// `false` puts every user in the day-0 cohort.
    pub staggered_entry: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 14,
            n_users: 10_000,
            base_rate_shape: 2.0,
            base_rate_scale: 0.5,
            base_retention: 0.97,
            alpha_eff: 0.1,
            beta_eff: 1.0 / 3.0,
            alpha_churn: 0.2,
            beta_churn: 1.0 / 3.0,
            treatment_share: 0.5,
            seed: 0,
            persistent_effect: 0.0,
            staggered_entry: true,
        }
    }
}

impl SimConfig {
    /// Same configuration with no injected effect and no differential churn.
    pub fn null(mut self) -> Self {
        self.alpha_eff = 0.0;
        self.alpha_churn = 0.0;
        self.persistent_effect = 0.0;
        self
    }

    pub fn mean_base_rate(&self) -> f64 {
        self.base_rate_shape * self.base_rate_scale
    }

    /// Additive effect on a treated user's rate after `x` days of exposure.
    pub fn injected_effect(&self, x: f64) -> f64 {
        self.alpha_eff * (-self.beta_eff * x).exp() + self.persistent_effect
    }

    /// Multiplicative churn factor applied to the treated survival curve.
    pub fn churn_factor(&self, x: f64) -> f64 {
        1.0 + self.alpha_churn * ((-self.beta_churn * x).exp() - 1.0)
    }

    pub fn control_survival(&self, x: f64) -> f64 {
        self.base_retention.powf(x)
    }

    pub fn treated_survival(&self, x: f64) -> f64 {
        self.control_survival(x) * self.churn_factor(x)
    }

    /// Probability that a treated user active on day `x - 1` is still active
    /// on day `x`.
    pub fn treated_retention(&self, x: u32) -> f64 {
        let x = f64::from(x);
        self.base_retention * self.churn_factor(x) / self.churn_factor(x - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let finite = [
            self.base_rate_shape,
            self.base_rate_scale,
            self.base_retention,
            self.alpha_eff,
            self.beta_eff,
            self.alpha_churn,
            self.beta_churn,
            self.treatment_share,
            self.persistent_effect,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all parameters must be finite".into());
        }
        if self.duration < 2 {
            return Err(Error::DurationTooShort(self.duration));
        }
        if self.n_users == 0 {
            return bad("n_users must be positive".into());
        }
        if self.base_rate_shape <= 0.0 || self.base_rate_scale <= 0.0 {
            return bad("base rate shape and scale must be positive".into());
        }
        if !(self.base_retention > 0.0 && self.base_retention <= 1.0) {
            return bad(format!("base_retention {} outside (0, 1]", self.base_retention));
        }
        if self.beta_eff <= 0.0 || self.beta_churn <= 0.0 {
            return bad("beta_eff and beta_churn must be positive".into());
        }
        if self.alpha_churn > 1.0 {
            return bad(format!("alpha_churn {} exceeds 1", self.alpha_churn));
        }
        if !(self.treatment_share > 0.0 && self.treatment_share < 1.0) {
            return bad(format!("treatment_share {} outside (0, 1)", self.treatment_share));
        }
        for day in 1..self.duration {
            let h = self.treated_retention(day);
            if !(0.0..=1.0).contains(&h) || !h.is_finite() {
                return Err(Error::InvalidHazard { day, value: h });
            }
        }
        Ok(())
    }
}

/// One simulated user, indexed by elapsed day.
#[derive(Debug, Clone, PartialEq)]
pub struct SimUser {
    pub arm: Arm,
    pub entry: u32,
    pub rate: f64,
    /// `(metric, active)` for elapsed days `0..duration - entry`.
    pub days: Vec<(f64, bool)>,
}

/// Deterministic RNG for substream `index` of `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    match Poisson::new(rate) {
        Ok(p) => p.sample(rng),
        Err(_) => 0.0,
    }
}

/// Draws user `index`. Depends only on `(config, index)`.
///
/// `config` must already be validated.
pub fn simulate_user(config: &SimConfig, index: u64) -> SimUser {
    let mut rng = substream(config.seed, index);
    let gamma = Gamma::new(config.base_rate_shape, config.base_rate_scale).expect("validated shape/scale");
    let rate: f64 = gamma.sample(&mut rng);
    let entry = if config.staggered_entry {
        rng.random_range(0..config.duration)
    } else {
        0
    };
    let arm = if rng.random_bool(config.treatment_share) {
        Arm::Treatment
    } else {
        Arm::Control
    };

    let span = config.duration - entry;
    let mut days = Vec::with_capacity(span as usize);
    let mut alive = true;
    for x in 0..span {
        if x > 0 && alive {
            let keep = match arm {
                Arm::Control => config.base_retention,
                Arm::Treatment => config.treated_retention(x),
            };
            alive = rng.random::<f64>() < keep;
        }
        if !alive {
            days.push((0.0, false));
            continue;
        }
        let lambda = match arm {
            Arm::Control => rate,
            Arm::Treatment => rate + config.injected_effect(f64::from(x)),
        };
        days.push((poisson(&mut rng, lambda), true));
    }
    SimUser { arm, entry, rate, days }
}

fn user_id(index: usize) -> String {
    format!("u{index:08}")
}

fn to_record(index: usize, u: &SimUser) -> UserRecord {
    let mut observations = Vec::with_capacity(u.days.len());
    for (x, &(metric, active)) in u.days.iter().enumerate() {
        let day = u.entry + x as u32;
        observations.push(Observation { day, metric, active });
        if !active {
            // the churn day is logged once; later days are simply absent
            break;
        }
    }
    UserRecord {
        user_id: user_id(index),
        arm: u.arm,
        entry_day: u.entry,
        observations,
    }
}

/// Event log for `config`.
pub fn generate(config: &SimConfig) -> Result<Vec<UserRecord>> {
    generate_with(config, Exec::default())
}

pub fn generate_with(config: &SimConfig, exec: Exec) -> Result<Vec<UserRecord>> {
    config.validate()?;
    Ok(exec.map_indices(config.n_users, |i| to_record(i, &simulate_user(config, i as u64))))
}

/// Same users as [`generate`], aggregated straight into a [`Dataset`].
pub fn generate_dataset(config: &SimConfig, exec: Exec) -> Result<Dataset> {
    config.validate()?;
    let users = exec.map_indices(config.n_users, |i| {
        let u = simulate_user(config, i as u64);
        CompactUser {
            arm: u.arm,
            entry: u.entry,
            active: u.days.iter().map(|d| d.1).collect(),
            metric: u.days.iter().map(|d| if d.1 { d.0 } else { 0.0 }).collect(),
        }
    });
    Ok(Dataset::from_compact(config.duration, users))
}

/// Long-term effect implied by the generating process.
pub fn true_lte(config: &SimConfig) -> f64 {
    config.persistent_effect
}

/// Incremental remaining value summed over elapsed days `0..=horizon`.
pub fn true_delta_erlv(config: &SimConfig, horizon: u32) -> f64 {
    let mu = config.mean_base_rate();
    (0..=horizon)
        .map(|x| {
            let x = f64::from(x);
            (mu + config.injected_effect(x)) * config.treated_survival(x) - mu * config.control_survival(x)
        })
        .sum()
}

/// Ground-truth sidecar written next to a simulated log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub true_lte: f64,
    pub true_delta_erlv: f64,
    pub horizon: u32,
    pub config: SimConfig,
}

impl Truth {
    pub fn for_config(config: &SimConfig, horizon: u32) -> Self {
        Truth {
            true_lte: true_lte(config),
            true_delta_erlv: true_delta_erlv(config, horizon),
            horizon,
            config: config.clone(),
        }
    }
}
