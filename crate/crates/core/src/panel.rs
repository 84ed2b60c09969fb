//! Cohort-indexed aggregation of user-day logs.
//!
//! Users are grouped by `(arm, entry day)`; every cell `(arm, t0, t)` holds the
//! sample mean of the metric on calendar day `t` together with the variance of
//! that mean. The same grid is built in two modes: *metric* (active users only,
//! churned users are missing) and *presence* (the 0/1 activity indicator over
//! the whole cohort, i.e. the empirical survival curve).

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Sample variances below this are floored before any inverse-variance use.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Users per aggregation chunk. Fixed so that output bits never depend on
/// the thread count.
const CHUNK_USERS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "T")]
    Treatment,
    #[serde(rename = "C")]
    Control,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treatment, Arm::Control];

    pub fn code(self) -> &'static str {
        match self {
            Arm::Treatment => "T",
            Arm::Control => "C",
        }
    }

    fn index(self) -> usize {
        match self {
            Arm::Treatment => 0,
            Arm::Control => 1,
        }
    }

    fn parse(s: &str) -> Option<Arm> {
        match s.trim() {
            "T" | "t" => Some(Arm::Treatment),
            "C" | "c" => Some(Arm::Control),
            _ => None,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub day: u32,
    pub metric: f64,
    pub active: bool,
}

/// One user's arm, entry day and daily observations.
///
/// Days without an observation count as inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub arm: Arm,
    pub entry_day: u32,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelMode {
    Metric,
    Presence,
}

/// Dense per-user view used by every aggregation path.
#[derive(Debug, Clone)]
pub(crate) struct CompactUser {
    pub arm: Arm,
    pub entry: u32,
    /// Indexed by elapsed day `t - entry`, length `duration - entry`.
    pub active: Vec<bool>,
    pub metric: Vec<f64>,
}

/// Validated records in canonical (user id) order.
#[derive(Debug, Clone)]
pub struct Dataset {
    duration: u32,
    users: Vec<CompactUser>,
}

impl Dataset {
    pub fn from_records(records: &[UserRecord], duration: u32) -> Result<Self> {
        if duration < 2 {
            return Err(Error::DurationTooShort(duration));
        }
        if records.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[a].user_id.cmp(&records[b].user_id));
        for pair in order.windows(2) {
            if records[pair[0]].user_id == records[pair[1]].user_id {
                return Err(Error::InvalidRecord {
                    user_id: records[pair[0]].user_id.clone(),
                    reason: "user appears in more than one record".into(),
                });
            }
        }

        let mut users = Vec::with_capacity(records.len());
        for &i in &order {
            let rec = &records[i];
            if rec.entry_day >= duration {
                return Err(Error::InvalidRecord {
                    user_id: rec.user_id.clone(),
                    reason: format!("entry day {} not below duration {}", rec.entry_day, duration),
                });
            }
            let len = (duration - rec.entry_day) as usize;
            let mut active = vec![false; len];
            let mut metric = vec![0.0; len];
            let mut seen = vec![false; len];
            for obs in &rec.observations {
                if obs.day < rec.entry_day || obs.day >= duration {
                    return Err(Error::InvalidRecord {
                        user_id: rec.user_id.clone(),
                        reason: format!("observation day {} outside [{}, {})", obs.day, rec.entry_day, duration),
                    });
                }
                if !obs.metric.is_finite() || obs.metric < 0.0 {
                    return Err(Error::InvalidRecord {
                        user_id: rec.user_id.clone(),
                        reason: format!(
                            "metric {} on day {} is not a finite non-negative value",
                            obs.metric, obs.day
                        ),
                    });
                }
                let x = (obs.day - rec.entry_day) as usize;
                if seen[x] {
                    return Err(Error::DuplicateObservation {
                        user_id: rec.user_id.clone(),
                        day: obs.day,
                    });
                }
                seen[x] = true;
                active[x] = obs.active;
                metric[x] = if obs.active { obs.metric } else { 0.0 };
            }
            users.push(CompactUser {
                arm: rec.arm,
                entry: rec.entry_day,
                active,
                metric,
            });
        }
        Ok(Dataset { duration, users })
    }

    /// Users must already be in canonical order.
    pub(crate) fn from_compact(duration: u32, users: Vec<CompactUser>) -> Self {
        Dataset { duration, users }
    }

    pub fn duration(&self) -> u32 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub(crate) fn users(&self) -> &[CompactUser] {
        &self.users
    }

    /// Same users, observation window cut at `duration` days.
    pub fn truncated(&self, duration: u32) -> Result<Dataset> {
        if duration < 2 {
            return Err(Error::DurationTooShort(duration));
        }
        let users: Vec<CompactUser> = self
            .users
            .iter()
            .filter(|u| u.entry < duration)
            .map(|u| {
                let len = (duration.min(self.duration) - u.entry) as usize;
                CompactUser {
                    arm: u.arm,
                    entry: u.entry,
                    active: u.active[..len].to_vec(),
                    metric: u.metric[..len].to_vec(),
                }
            })
            .collect();
        if users.is_empty() {
            return Err(Error::EmptyPanel);
        }
        Ok(Dataset {
            duration: duration.min(self.duration),
            users,
        })
    }

    /// Keeps only users that entered on day 0.
    pub fn first_cohort(&self) -> Dataset {
        Dataset {
            duration: self.duration,
            users: self.users.iter().filter(|u| u.entry == 0).cloned().collect(),
        }
    }

    /// Indices of users in `arm`, in canonical order.
    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        self.users
            .iter()
            .enumerate()
            .filter(|(_, u)| u.arm == arm)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One `(arm, t0, t)` cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortCell {
    pub arm: Arm,
    pub t0: u32,
    pub t: u32,
    pub n: u64,
    pub mean: f64,
    pub var_of_mean: f64,
    pub usable: bool,
    /// Covariance between this cell's mean and the same cohort's entry-day
    /// mean, estimated from users observed on both days.
    pub cov_with_entry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortPanel {
    duration: u32,
    mode: PanelMode,
    cells: Vec<CohortCell>,
}

impl CohortPanel {
    pub fn duration(&self) -> u32 {
        self.duration
    }

    pub fn mode(&self) -> PanelMode {
        self.mode
    }

    fn slot(duration: u32, arm: Arm, t0: u32, t: u32) -> usize {
        let d = duration as usize;
        arm.index() * d * d + t0 as usize * d + t as usize
    }

    /// The cell at `(arm, t0, t)`, or `None` outside the triangular support.
    pub fn cell(&self, arm: Arm, t0: u32, t: u32) -> Option<&CohortCell> {
        if t0 > t || t >= self.duration {
            return None;
        }
        self.cells.get(Self::slot(self.duration, arm, t0, t))
    }

    /// Like [`cell`](Self::cell) but only for cells with `n >= 2`.
    pub fn usable_cell(&self, arm: Arm, t0: u32, t: u32) -> Option<&CohortCell> {
        self.cell(arm, t0, t).filter(|c| c.usable)
    }

    /// All cells in `(arm, t0, t)` order.
    pub fn cells(&self) -> impl Iterator<Item = &CohortCell> {
        let d = self.duration;
        self.cells.iter().filter(move |c| c.t0 <= c.t && c.t < d)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arm", "t0", "t", "n", "mean", "var_of_mean", "usable"])?;
        for c in self.cells() {
            w.write_record([
                c.arm.code().to_string(),
                c.t0.to_string(),
                c.t.to_string(),
                c.n.to_string(),
                c.mean.to_string(),
                c.var_of_mean.to_string(),
                u8::from(c.usable).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn add(&mut self, x: f64, w: f64) {
        let n = self.n + w;
        let d = x - self.mean;
        self.mean += d * w / n;
        self.m2 += w * d * (x - self.mean);
        self.n = n;
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CoMoments {
    n: f64,
    mean_a: f64,
    mean_b: f64,
    c: f64,
}

impl CoMoments {
    fn add(&mut self, a: f64, b: f64, w: f64) {
        let n = self.n + w;
        let da = a - self.mean_a;
        self.mean_a += da * w / n;
        self.mean_b += (b - self.mean_b) * w / n;
        self.c += w * da * (b - self.mean_b);
        self.n = n;
    }

    fn merge(&mut self, o: &CoMoments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let da = o.mean_a - self.mean_a;
        let db = o.mean_b - self.mean_b;
        self.c += o.c + da * db * self.n * o.n / n;
        self.mean_a += da * o.n / n;
        self.mean_b += db * o.n / n;
        self.n = n;
    }
}

#[derive(Clone)]
struct Partial {
    cells: Vec<Moments>,
    pairs: Vec<CoMoments>,
}

impl Partial {
    fn new(size: usize) -> Self {
        Partial {
            cells: vec![Moments::default(); size],
            pairs: vec![CoMoments::default(); size],
        }
    }

    fn merge(&mut self, o: &Partial) {
        for (a, b) in self.cells.iter_mut().zip(&o.cells) {
            a.merge(b);
        }
        for (a, b) in self.pairs.iter_mut().zip(&o.pairs) {
            a.merge(b);
        }
    }
}

/// Validates `records` and aggregates them into a panel.
pub fn build_panel(records: &[UserRecord], duration: u32, mode: PanelMode) -> Result<CohortPanel> {
    let data = Dataset::from_records(records, duration)?;
    Ok(aggregate(&data, mode, None, Exec::Sequential))
}

/// Aggregates a validated dataset. `multiplicity[i]` (if given) is how many
/// times user `i` is counted, which is how bootstrap replicates are built.
pub fn aggregate(data: &Dataset, mode: PanelMode, multiplicity: Option<&[u32]>, exec: Exec) -> CohortPanel {
    let duration = data.duration;
    let d = duration as usize;
    let size = 2 * d * d;
    let indexed: Vec<(usize, &CompactUser)> = data.users.iter().enumerate().collect();

    let partials = exec.map_chunks(&indexed, CHUNK_USERS, |chunk| {
        let mut p = Partial::new(size);
        for &(i, u) in chunk {
            let w = match multiplicity {
                Some(m) => m[i],
                None => 1,
            };
            if w == 0 {
                continue;
            }
            let w = f64::from(w);
            let base = CohortPanel::slot(duration, u.arm, u.entry, u.entry);
            match mode {
                PanelMode::Metric => {
                    let entry_active = u.active[0];
                    let entry_metric = u.metric[0];
                    for (x, (&on, &m)) in u.active.iter().zip(&u.metric).enumerate() {
                        if !on {
                            continue;
                        }
                        p.cells[base + x].add(m, w);
                        if entry_active {
                            p.pairs[base + x].add(entry_metric, m, w);
                        }
                    }
                }
                PanelMode::Presence => {
                    let entry = f64::from(u8::from(u.active[0]));
                    for (x, &on) in u.active.iter().enumerate() {
                        let v = f64::from(u8::from(on));
                        p.cells[base + x].add(v, w);
                        p.pairs[base + x].add(entry, v, w);
                    }
                }
            }
        }
        p
    });

    let mut total = Partial::new(size);
    for p in &partials {
        total.merge(p);
    }

    let mut cells = Vec::with_capacity(size);
    for arm in Arm::BOTH {
        for t0 in 0..duration {
            for t in 0..duration {
                let slot = CohortPanel::slot(duration, arm, t0, t);
                let m = &total.cells[slot];
                let n = m.n as u64;
                let usable = t0 <= t && n >= 2;
                let (mean, var_of_mean) = if n == 0 {
                    (0.0, 0.0)
                } else if n == 1 {
                    (m.mean, 0.0)
                } else {
                    let s2 = (m.m2 / (m.n - 1.0)).max(VARIANCE_FLOOR);
                    (m.mean, s2 / m.n)
                };
                let entry_n = total.cells[CohortPanel::slot(duration, arm, t0, t0)].n;
                let pair = &total.pairs[slot];
                let cov_with_entry = if usable && pair.n >= 2.0 && entry_n >= 2.0 {
                    if t == t0 {
                        var_of_mean
                    } else {
                        pair.n * (pair.c / (pair.n - 1.0)) / (m.n * entry_n)
                    }
                } else {
                    0.0
                };
                cells.push(CohortCell {
                    arm,
                    t0,
                    t,
                    n,
                    mean,
                    var_of_mean,
                    usable,
                    cov_with_entry,
                });
            }
        }
    }
    CohortPanel { duration, mode, cells }
}

#[derive(Debug, Deserialize)]
struct EventRow {
    user_id: String,
    arm: String,
    entry_day: String,
    day: String,
    metric: String,
    active: String,
}

fn parse_day(s: &str) -> Option<u32> {
    let s = s.trim();
    if let Ok(v) = s.parse::<u32>() {
        return Some(v);
    }
    // sub-day timestamps are truncated to the day index
    let v = s.parse::<f64>().ok()?;
    (v.is_finite() && v >= 0.0 && v < f64::from(u32::MAX)).then(|| v.floor() as u32)
}

/// Reads the `user_id,arm,entry_day,day,metric,active` event log.
///
/// Returns the records (in first-seen order) and the duration implied by the
/// largest day index.
pub fn read_events<R: Read>(input: R) -> Result<(Vec<UserRecord>, u32)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let expected = ["user_id", "arm", "entry_day", "day", "metric", "active"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::MalformedCsv {
            line: 1,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut records: Vec<UserRecord> = Vec::new();
    let mut max_day = 0u32;
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::MalformedCsv { line, reason };
        let ev: EventRow = row.deserialize(Some(&headers)).map_err(|e| bad(e.to_string()))?;
        let arm = Arm::parse(&ev.arm).ok_or_else(|| bad(format!("arm must be T or C, got `{}`", ev.arm)))?;
        let entry = parse_day(&ev.entry_day).ok_or_else(|| bad(format!("bad entry_day `{}`", ev.entry_day)))?;
        let day = parse_day(&ev.day).ok_or_else(|| bad(format!("bad day `{}`", ev.day)))?;
        let metric: f64 = ev
            .metric
            .parse()
            .ok()
            .filter(|m: &f64| m.is_finite() && *m >= 0.0)
            .ok_or_else(|| bad(format!("metric must be a non-negative number, got `{}`", ev.metric)))?;
        let active = match ev.active.as_str() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("active must be 0 or 1, got `{other}`"))),
        };
        if day < entry {
            return Err(bad(format!("day {day} precedes entry_day {entry}")));
        }
        max_day = max_day.max(day);
        let obs = Observation { day, metric, active };
        match index.get(&ev.user_id) {
            Some(&i) => {
                let rec = &mut records[i];
                if rec.arm != arm || rec.entry_day != entry {
                    return Err(bad(format!("user {} changes arm or entry_day", ev.user_id)));
                }
                rec.observations.push(obs);
            }
            None => {
                index.insert(ev.user_id.clone(), records.len());
                records.push(UserRecord {
                    user_id: ev.user_id,
                    arm,
                    entry_day: entry,
                    observations: vec![obs],
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyPanel);
    }
    Ok((records, max_day + 1))
}

/// Writes records in the event-log format, one row per observation.
pub fn write_events<W: Write>(records: &[UserRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "arm", "entry_day", "day", "metric", "active"])?;
    for r in records {
        for o in &r.observations {
            w.write_record([
                r.user_id.clone(),
                r.arm.code().to_string(),
                r.entry_day.to_string(),
                o.day.to_string(),
                o.metric.to_string(),
                u8::from(o.active).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
