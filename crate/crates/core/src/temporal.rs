//! Timestamp decomposition and temporal feature vectors.
//!
//! Every behavior carries an 8-vector `[t − t_s, year, month, day, weekday,
//! hour, minute, second]` (UTC, proleptic Gregorian, Monday = 0). The model
//! consumes a normalized copy in which every component is scaled to `[0, 1]`
//! for timestamps inside the dataset's range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of calendar components.
pub const CALENDAR_DIMS: usize = 7;
/// Relative time plus calendar components.
pub const TIME_DIMS: usize = CALENDAR_DIMS + 1;

pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn seconds(self) -> u64 {
        self.0
    }
}

/// Calendar view of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Calendar {
    pub year: i64,
    pub month: u32,
    pub day: u32,
    /// Monday = 0 … Sunday = 6.
    pub weekday: u32,
    pub hour: u32,
    pub minute: u32,
    pub second: u32,
}

impl Calendar {
    pub fn as_array(&self) -> [f64; CALENDAR_DIMS] {
        [
            self.year as f64,
            self.month as f64,
            self.day as f64,
            self.weekday as f64,
            self.hour as f64,
            self.minute as f64,
            self.second as f64,
        ]
    }
}

// Howard Hinnant's civil-from-days / days-from-civil.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y.rem_euclid(400);
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Splits a timestamp into its seven calendar components.
pub fn decompose(t: Timestamp) -> Calendar {
    let days = (t.0 / SECONDS_PER_DAY) as i64;
    let secs = t.0 % SECONDS_PER_DAY;
    let (year, month, day) = civil_from_days(days);
    Calendar {
        year,
        month,
        day,
        weekday: (days + 3).rem_euclid(7) as u32,
        hour: (secs / 3600) as u32,
        minute: (secs % 3600 / 60) as u32,
        second: (secs % 60) as u32,
    }
}

/// Inverse of [`decompose`] (the weekday is implied by the date).
pub fn compose(c: &Calendar) -> Timestamp {
    let days = days_from_civil(c.year, c.month, c.day);
    let secs = days * SECONDS_PER_DAY as i64
        + c.hour as i64 * 3600
        + c.minute as i64 * 60
        + c.second as i64;
    Timestamp(secs as u64)
}

pub fn hour_of_day(t: Timestamp) -> u32 {
    ((t.0 % SECONDS_PER_DAY) / 3600) as u32
}

/// Dataset-wide time origin `t_s` and extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetClock {
    pub start: Timestamp,
    pub span_seconds: u64,
}

impl DatasetClock {
    /// Clock covering `[min, max]`; the span is at least one second.
    pub fn new(min: Timestamp, max: Timestamp) -> Self {
        Self {
            start: min,
            span_seconds: max.0.saturating_sub(min.0).max(1),
        }
    }

    pub fn from_timestamps(ts: impl IntoIterator<Item = Timestamp>) -> Option<Self> {
        let mut it = ts.into_iter();
        let first = it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
        Some(Self::new(lo, hi))
    }

    pub fn end(&self) -> Timestamp {
        Timestamp(self.start.0 + self.span_seconds)
    }

    fn year_range(&self) -> (i64, f64) {
        let y0 = decompose(self.start).year;
        let y1 = decompose(self.end()).year;
        (y0, (y1 - y0).max(1) as f64)
    }

    /// Recency `(later − earlier) / span`, clamped at zero.
    pub fn scaled_gap(&self, earlier: Timestamp, later: Timestamp) -> f64 {
        later.0.saturating_sub(earlier.0) as f64 / self.span_seconds as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeFeatures {
    /// `[t − t_s (s), year, month, day, weekday, hour, minute, second]`.
    pub raw: [f64; TIME_DIMS],
    pub normalized: [f64; TIME_DIMS],
}

impl TimeFeatures {
    /// Copy with every calendar component replaced by the constant 1.
    pub fn without_time_point(&self) -> Self {
        let mut out = *self;
        for v in &mut out.normalized[1..] {
            *v = 1.0;
        }
        out
    }
}

/// Raw and normalized `[t − t_s, κ(t)]` for `t`.
///
/// Normalized relative time may exceed 1 for timestamps past the clock's
/// range (prediction times after the last logged behavior).
pub fn time_features(t: Timestamp, clock: &DatasetClock) -> Result<TimeFeatures> {
    if t < clock.start {
        return Err(Error::BeforeDatasetStart {
            t: t.0,
            start: clock.start.0,
        });
    }
    let cal = decompose(t);
    let rel = (t.0 - clock.start.0) as f64;
    let c = cal.as_array();
    let mut raw = [0.0; TIME_DIMS];
    raw[0] = rel;
    raw[1..].copy_from_slice(&c);

    let (y0, years) = clock.year_range();
    let normalized = [
        rel / clock.span_seconds as f64,
        (cal.year - y0) as f64 / years,
        (c[1] - 1.0) / 11.0,
        (c[2] - 1.0) / 30.0,
        c[3] / 6.0,
        c[4] / 23.0,
        c[5] / 59.0,
        c[6] / 59.0,
    ];
    Ok(TimeFeatures { raw, normalized })
}

/// Elementwise `|z(t1) − z(t2)|` of the normalized feature vectors.
pub fn sim_features(a: &TimeFeatures, b: &TimeFeatures) -> [f64; TIME_DIMS] {
    let mut out = [0.0; TIME_DIMS];
    for (o, (x, y)) in out.iter_mut().zip(a.normalized.iter().zip(&b.normalized)) {
        *o = (x - y).abs();
    }
    out
}

pub fn sim(t1: Timestamp, t2: Timestamp, clock: &DatasetClock) -> Result<[f64; TIME_DIMS]> {
    Ok(sim_features(
        &time_features(t1, clock)?,
        &time_features(t2, clock)?,
    ))
}
