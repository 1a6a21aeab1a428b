//! Behavior logs with planted periodic and time-point patterns.
//!
//! Every user prefers a few categories. Each preferred category produces its
//! own click stream: a category with a period repeats every `p` days with a
//! gap jitter of ±10% of `p`, and a category with active hours only ever
//! fires inside those hours. The final log is the time-ordered merge of the
//! streams, with a fraction `noise_rate` of clicks moved to items of a
//! category the user does not prefer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EventRecord, RawId};
use crate::error::{Error, Result};
use crate::temporal::{hour_of_day, Timestamp, SECONDS_PER_DAY};

const JITTER: f64 = 0.1;
/// Shortest period compatible with a single active hour: the ±10% gap window
/// must span a whole day.
const MIN_PERIOD_WITH_HOURS: f64 = 5.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryPattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_days: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_hours: Option<Vec<u32>>,
}

impl CategoryPattern {
    pub fn is_patterned(&self) -> bool {
        self.period_days.is_some() || self.active_hours.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// One entry per category.
    pub patterns: Vec<CategoryPattern>,
    pub noise_rate: f64,
    pub seed: u64,
    /// Unix seconds of the earliest possible click.
    pub start: u64,
    pub horizon_days: f64,
    pub min_preferred: usize,
    pub max_preferred: usize,
    /// Share of a category's items in each user's favorite subset.
    pub favorite_fraction: f64,
    /// Zipf exponent of category popularity (item counts and preference).
    pub category_skew: f64,
    /// Mean gap for categories without a period.
    pub mean_gap_days: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::patterned(500, 1000, 20, 0)
    }
}

impl SyntheticSpec {
    /// Every category gets a period from {5, 7, 10, 14} days and two active
    /// hours, both drawn from `seed`.
    pub fn patterned(n_users: usize, n_items: usize, n_categories: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_0000_0001);
        let hours: Vec<u32> = (0..24).collect();
        let patterns = (0..n_categories)
            .map(|_| {
                let mut h: Vec<u32> = hours.choose_multiple(&mut rng, 2).copied().collect();
                h.sort_unstable();
                CategoryPattern {
                    period_days: Some(*[5.0, 7.0, 10.0, 14.0].choose(&mut rng).unwrap()),
                    active_hours: Some(h),
                }
            })
            .collect();
        Self {
            n_users,
            n_items,
            n_categories,
            patterns,
            noise_rate: 0.1,
            seed,
            start: 1_546_300_800, // 2019-01-01T00:00:00Z
            horizon_days: 60.0,
            min_preferred: 2,
            max_preferred: 4,
            favorite_fraction: 0.5,
            category_skew: 1.0,
            mean_gap_days: 7.0,
        }
    }

    /// Spec with no planted patterns at all.
    pub fn plain(n_users: usize, n_items: usize, n_categories: usize, seed: u64) -> Self {
        let mut s = Self::patterned(n_users, n_items, n_categories, seed);
        s.patterns = vec![CategoryPattern::default(); n_categories];
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Synthetic(m));
        if self.n_categories == 0 {
            return err("at least one category is required".into());
        }
        if self.n_users == 0 {
            return err("n_users must be positive".into());
        }
        if self.n_items < self.n_categories {
            return err(format!(
                "n_items ({}) must be at least n_categories ({})",
                self.n_items, self.n_categories
            ));
        }
        if self.patterns.len() != self.n_categories {
            return err(format!(
                "{} patterns given for {} categories",
                self.patterns.len(),
                self.n_categories
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return err(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.min_preferred == 0 || self.min_preferred > self.max_preferred {
            return err("preferred category range must satisfy 1 <= min <= max".into());
        }
        if !(self.favorite_fraction > 0.0 && self.favorite_fraction <= 1.0) {
            return err("favorite_fraction must be in (0, 1]".into());
        }
        if !(self.horizon_days > 0.0 && self.mean_gap_days >= 1.0) {
            return err("horizon_days must be positive and mean_gap_days at least 1".into());
        }
        if !self.category_skew.is_finite() || self.category_skew < 0.0 {
            return err("category_skew must be a non-negative number".into());
        }
        for (c, p) in self.patterns.iter().enumerate() {
            if let Some(days) = p.period_days {
                if !(days.is_finite() && days > 0.0) {
                    return err(format!("category {c}: period must be positive"));
                }
            }
            if let Some(hours) = &p.active_hours {
                if hours.is_empty() || hours.iter().any(|&h| h > 23) {
                    return err(format!(
                        "category {c}: active hours must be a non-empty subset of 0-23"
                    ));
                }
                if let Some(days) = p.period_days {
                    if days < MIN_PERIOD_WITH_HOURS && hours.len() < 24 {
                        return err(format!(
                            "category {c}: period {days} days is too short to honor active hours (needs >= {MIN_PERIOD_WITH_HOURS})"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn popularity(&self) -> Vec<f64> {
        (0..self.n_categories)
            .map(|c| 1.0 / ((c + 1) as f64).powf(self.category_skew))
            .collect()
    }

    /// Item counts per category: one each, the rest split by popularity with
    /// largest-remainder rounding.
    fn category_sizes(&self) -> Vec<usize> {
        let w = self.popularity();
        let total: f64 = w.iter().sum();
        let extra = self.n_items - self.n_categories;
        let shares: Vec<f64> = w.iter().map(|x| x / total * extra as f64).collect();
        let mut sizes: Vec<usize> = shares.iter().map(|s| 1 + s.floor() as usize).collect();
        let mut left = self.n_items - sizes.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..self.n_categories).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for c in order {
            if left == 0 {
                break;
            }
            sizes[c] += 1;
            left -= 1;
        }
        sizes
    }
}

/// Uniform second in `[lo, hi]` whose hour of day is allowed; widens the
/// window a day at a time if it holds no allowed hour.
fn pick_time<R: Rng>(rng: &mut R, lo: u64, hi: u64, hours: Option<&[u32]>) -> u64 {
    let Some(hours) = hours else {
        return rng.gen_range(lo..=hi);
    };
    let mut hi = hi;
    loop {
        let mut slots = Vec::new();
        let mut total = 0u64;
        let mut s = lo - lo % 3600;
        while s <= hi {
            if hours.contains(&hour_of_day(Timestamp(s))) {
                let a = s.max(lo);
                let b = (s + 3599).min(hi);
                if a <= b {
                    slots.push((a, b));
                    total += b - a + 1;
                }
            }
            s += 3600;
        }
        if total > 0 {
            let mut k = rng.gen_range(0..total);
            for (a, b) in slots {
                let len = b - a + 1;
                if k < len {
                    return a + k;
                }
                k -= len;
            }
        }
        hi += SECONDS_PER_DAY;
    }
}

fn stream<R: Rng>(rng: &mut R, spec: &SyntheticSpec, pattern: &CategoryPattern) -> Vec<u64> {
    let day = SECONDS_PER_DAY as f64;
    let end = spec.start + (spec.horizon_days * day) as u64;
    let hours = pattern.active_hours.as_deref();
    let (first_span, lo_f, hi_f) = match pattern.period_days {
        Some(p) => (p, p * (1.0 - JITTER), p * (1.0 + JITTER)),
        None => (
            spec.mean_gap_days,
            spec.mean_gap_days * 0.5,
            spec.mean_gap_days * 1.5,
        ),
    };
    let first_hi = spec.start + (first_span * day) as u64 - 1;
    let mut t = pick_time(rng, spec.start, first_hi, hours);
    let mut out = vec![t];
    loop {
        let lo = t + (lo_f * day).ceil() as u64;
        let hi = t + (hi_f * day).floor() as u64;
        t = pick_time(rng, lo, hi, hours);
        if t > end {
            break;
        }
        out.push(t);
    }
    out
}

fn weighted_without_replacement<R: Rng>(rng: &mut R, weights: &[f64], k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(weights.len()) {
        let total: f64 = pool.iter().map(|&c| weights[c]).sum();
        let mut x = rng.gen::<f64>() * total;
        let mut pos = pool.len() - 1;
        for (i, &c) in pool.iter().enumerate() {
            if x < weights[c] {
                pos = i;
                break;
            }
            x -= weights[c];
        }
        out.push(pool.remove(pos));
    }
    out
}

/// Generates a behavior log; identical specs give identical logs.
///
/// Raw ids are integers: users `0..n_users`, items `0..n_items` assigned to
/// categories in contiguous blocks, categories `0..n_categories` in
/// decreasing popularity.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<EventRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes = spec.category_sizes();
    let mut first_item = Vec::with_capacity(sizes.len());
    let mut next = 0usize;
    for &s in &sizes {
        first_item.push(next);
        next += s;
    }
    let popularity = spec.popularity();

    let mut records = Vec::new();
    for user in 0..spec.n_users {
        let k = rng.gen_range(spec.min_preferred..=spec.max_preferred);
        let mut preferred = weighted_without_replacement(&mut rng, &popularity, k);
        preferred.sort_unstable();
        let others: Vec<usize> = (0..spec.n_categories)
            .filter(|c| !preferred.contains(c))
            .collect();

        let mut events: Vec<(u64, usize, usize)> = Vec::new();
        for &c in &preferred {
            let size = sizes[c];
            let n_fav = ((size as f64 * spec.favorite_fraction).ceil() as usize).clamp(1, size);
            let favorites: Vec<usize> = rand::seq::index::sample(&mut rng, size, n_fav)
                .into_iter()
                .map(|i| first_item[c] + i)
                .collect();
            for t in stream(&mut rng, spec, &spec.patterns[c]) {
                let (cat, item) = if !others.is_empty() && rng.gen::<f64>() < spec.noise_rate {
                    let nc = others[rng.gen_range(0..others.len())];
                    (nc, first_item[nc] + rng.gen_range(0..sizes[nc]))
                } else {
                    (c, favorites[rng.gen_range(0..favorites.len())])
                };
                events.push((t, cat, item));
            }
        }
        events.sort_by_key(|e| e.0);
        records.extend(events.into_iter().map(|(t, cat, item)| EventRecord {
            user: RawId::Int(user as i64),
            item: RawId::Int(item as i64),
            category: RawId::Int(cat as i64),
            ts: t,
        }));
    }
    Ok(records)
}

/// A planted constraint that a generated log breaks.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Hour {
        user: RawId,
        category: usize,
        ts: u64,
    },
    Gap {
        user: RawId,
        category: usize,
        gap_days: f64,
    },
    UnknownCategory(RawId),
}

/// Checks every per-user, per-category stream against its pattern. Only a
/// noise-free log is expected to pass.
pub fn validate_synthetic(spec: &SyntheticSpec, records: &[EventRecord]) -> Vec<Violation> {
    let mut streams: BTreeMap<(RawId, usize), Vec<u64>> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        let cat = match &r.category {
            RawId::Int(c) if (*c as usize) < spec.patterns.len() && *c >= 0 => *c as usize,
            other => {
                out.push(Violation::UnknownCategory(other.clone()));
                continue;
            }
        };
        streams.entry((r.user.clone(), cat)).or_default().push(r.ts);
    }
    let day = SECONDS_PER_DAY as f64;
    for ((user, cat), mut ts) in streams {
        ts.sort_unstable();
        let pattern = &spec.patterns[cat];
        if let Some(hours) = &pattern.active_hours {
            for &t in &ts {
                if !hours.contains(&hour_of_day(Timestamp(t))) {
                    out.push(Violation::Hour {
                        user: user.clone(),
                        category: cat,
                        ts: t,
                    });
                }
            }
        }
        if let Some(p) = pattern.period_days {
            let lo = (p * (1.0 - JITTER) * day).ceil() as u64;
            let hi = (p * (1.0 + JITTER) * day).floor() as u64;
            for w in ts.windows(2) {
                let gap = w[1] - w[0];
                if gap < lo || gap > hi {
                    out.push(Violation::Gap {
                        user: user.clone(),
                        category: cat,
                        gap_days: gap as f64 / day,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weekly_evening(noise: f64) -> SyntheticSpec {
        let mut s = SyntheticSpec::plain(60, 200, 6, 3);
        s.noise_rate = noise;
        s.patterns[0].period_days = Some(7.0);
        s.patterns[1].active_hours = Some(vec![20]);
        s.patterns[2] = CategoryPattern {
            period_days: Some(10.0),
            active_hours: Some(vec![8, 9]),
        };
        s.category_skew = 0.0;
        s.min_preferred = 3;
        s.max_preferred = 4;
        s
    }

    #[test]
    fn period_gaps_within_jitter() {
        let spec = weekly_evening(0.0);
        let recs = generate_synthetic(&spec).unwrap();
        let mut by_user: BTreeMap<RawId, Vec<u64>> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.category == RawId::Int(0)) {
            by_user.entry(r.user.clone()).or_default().push(r.ts);
        }
        assert!(!by_user.is_empty());
        for ts in by_user.values() {
            for w in ts.windows(2) {
                let gap = (w[1] - w[0]) as f64 / 86_400.0;
                assert!((6.3..=7.7).contains(&gap), "gap {gap}");
            }
        }
    }

    #[test]
    fn active_hours_respected() {
        let recs = generate_synthetic(&weekly_evening(0.0)).unwrap();
        let evening: Vec<_> = recs
            .iter()
            .filter(|r| r.category == RawId::Int(1))
            .collect();
        assert!(!evening.is_empty());
        assert!(evening.iter().all(|r| hour_of_day(Timestamp(r.ts)) == 20));
    }

    #[test]
    fn validator_passes_clean_and_flags_noise() {
        let spec = weekly_evening(0.0);
        assert!(validate_synthetic(&spec, &generate_synthetic(&spec).unwrap()).is_empty());
        let noisy = weekly_evening(0.5);
        assert!(!validate_synthetic(&noisy, &generate_synthetic(&noisy).unwrap()).is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::patterned(50, 300, 10, 11);
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let other = SyntheticSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn every_user_present_and_default_valid() {
        let spec = SyntheticSpec::default();
        let recs = generate_synthetic(&spec).unwrap();
        let users: std::collections::BTreeSet<_> = recs.iter().map(|r| r.user.clone()).collect();
        assert_eq!(users.len(), spec.n_users);
        assert!(validate_synthetic(
            &SyntheticSpec {
                noise_rate: 0.0,
                ..spec.clone()
            },
            &generate_synthetic(&SyntheticSpec {
                noise_rate: 0.0,
                ..spec
            })
            .unwrap()
        )
        .is_empty());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = SyntheticSpec::plain(5, 10, 2, 0);
        s.n_categories = 0;
        s.patterns.clear();
        assert!(generate_synthetic(&s).is_err());
        let mut s = SyntheticSpec::plain(5, 10, 2, 0);
        s.patterns[0] = CategoryPattern {
            period_days: Some(2.0),
            active_hours: Some(vec![3]),
        };
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn category_sizes_sum_to_items() {
        let s = SyntheticSpec::patterned(1, 1000, 50, 0);
        let sizes = s.category_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
        assert!(sizes.iter().all(|&n| n >= 1));
        assert!(sizes[0] > sizes[49]);
    }
}
