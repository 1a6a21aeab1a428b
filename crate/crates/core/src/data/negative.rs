use std::collections::HashSet;

use rand::Rng;

use crate::data::{BehaviorSequence, Vocabulary};
use crate::error::{Error, Result};

const REJECTION_TRIES: usize = 64;

/// Negative counterpart of `positive`: the target item is replaced by one
/// drawn uniformly from items that are neither the positive target nor in
/// the user's history. Returns `Ok(None)` when no such item exists.
pub fn sample_negative<R: Rng>(
    positive: &BehaviorSequence,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Option<BehaviorSequence>> {
    let n_items = vocab.items.table_size() - 1;
    if n_items < 2 {
        return Err(Error::Config(format!(
            "negative sampling needs at least 2 items, vocabulary has {n_items}"
        )));
    }
    let mut excluded: HashSet<u32> = positive.history.iter().map(|e| e.item).collect();
    excluded.insert(positive.target_item);

    let mut pick = None;
    for _ in 0..REJECTION_TRIES {
        let cand = rng.gen_range(1..=n_items as u32);
        if !excluded.contains(&cand) {
            pick = Some(cand);
            break;
        }
    }
    if pick.is_none() {
        let allowed: Vec<u32> = (1..=n_items as u32)
            .filter(|i| !excluded.contains(i))
            .collect();
        if allowed.is_empty() {
            log::warn!(
                "user {} has interacted with every item; no negative sampled",
                positive.user
            );
            return Ok(None);
        }
        pick = Some(allowed[rng.gen_range(0..allowed.len())]);
    }
    let item = pick.expect("set above");
    Ok(Some(BehaviorSequence {
        target_item: item,
        target_category: vocab.category_of(item),
        label: 0.0,
        ..positive.clone()
    }))
}

/// Interleaves every positive with one sampled negative.
pub fn with_negatives<R: Rng>(
    positives: &[BehaviorSequence],
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<BehaviorSequence>> {
    let mut out = Vec::with_capacity(positives.len() * 2);
    for p in positives {
        if let Some(n) = sample_negative(p, vocab, rng)? {
            out.push(p.clone());
            out.push(n);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BehaviorEvent, Dataset, EventRecord, RawId};
    use crate::temporal::Timestamp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n_items: i64) -> Vocabulary {
        let recs: Vec<_> = (0..n_items)
            .map(|i| EventRecord {
                user: RawId::Int(0),
                item: RawId::Int(i),
                category: RawId::Int(i % 3),
                ts: i as u64,
            })
            .collect();
        Dataset::from_records(&recs).vocab
    }

    fn seq(history: &[u32], target: u32) -> BehaviorSequence {
        BehaviorSequence {
            user: 1,
            history: history
                .iter()
                .map(|&item| BehaviorEvent {
                    user: 1,
                    item,
                    category: 1,
                    timestamp: Timestamp(0),
                })
                .collect(),
            target_item: target,
            target_category: 1,
            target_time: Timestamp(5),
            label: 1.0,
        }
    }

    #[test]
    fn excludes_target_and_history() {
        let v = vocab(3); // items 1, 2, 3
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = sample_negative(&seq(&[1], 3), &v, &mut rng)
                .unwrap()
                .unwrap();
            assert_eq!(n.target_item, 2);
            assert_eq!(n.target_category, v.category_of(2));
            assert_eq!(n.label, 0.0);
            assert_eq!(n.target_time, Timestamp(5));
        }
    }

    #[test]
    fn exhausted_and_too_small() {
        let v = vocab(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_negative(&seq(&[1, 2], 3), &v, &mut rng)
            .unwrap()
            .is_none());
        assert!(sample_negative(&seq(&[], 1), &vocab(1), &mut rng).is_err());
    }

    #[test]
    fn seeded_determinism() {
        let v = vocab(500);
        let a = sample_negative(&seq(&[4, 5], 9), &v, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_negative(&seq(&[4, 5], 9), &v, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    /// Pearson χ² against the uniform distribution over allowed items.
    #[test]
    fn uniform_over_allowed_items() {
        let v = vocab(51);
        let history = [1, 2, 3, 4, 5];
        let target = 6;
        let allowed = 51 - 6;
        let mut counts = vec![0usize; 52];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        for _ in 0..n {
            let s = sample_negative(&seq(&history, target), &v, &mut rng)
                .unwrap()
                .unwrap();
            counts[s.target_item as usize] += 1;
        }
        assert!(counts[..7].iter().all(|&c| c == 0));
        let expected = n as f64 / allowed as f64;
        let chi2: f64 = counts[7..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // χ²(44) upper 1% quantile
        assert!(chi2 < 68.71, "chi2 = {chi2}");
    }
}
