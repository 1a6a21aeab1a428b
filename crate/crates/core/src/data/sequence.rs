use std::collections::BTreeMap;

use crate::data::BehaviorEvent;
use crate::error::{Error, Result};
use crate::temporal::Timestamp;

/// A user's chronological history and one candidate target.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSequence {
    pub user: u32,
    pub history: Vec<BehaviorEvent>,
    pub target_item: u32,
    pub target_category: u32,
    pub target_time: Timestamp,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBuild {
    pub sequences: Vec<BehaviorSequence>,
    pub dropped_users: usize,
}

/// Groups events per user (ascending user index), each list sorted by
/// timestamp with ties kept in input order.
pub fn group_by_user(events: &[BehaviorEvent]) -> BTreeMap<u32, Vec<BehaviorEvent>> {
    let mut by_user: BTreeMap<u32, Vec<BehaviorEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user).or_default().push(*e);
    }
    for list in by_user.values_mut() {
        list.sort_by_key(|e| e.timestamp);
    }
    by_user
}

fn positive(log: &[BehaviorEvent], target: usize, max_len: usize) -> BehaviorSequence {
    let t = log[target];
    let start = target.saturating_sub(max_len);
    BehaviorSequence {
        user: t.user,
        history: log[start..target].to_vec(),
        target_item: t.item,
        target_category: t.category,
        target_time: t.timestamp,
        label: 1.0,
    }
}

/// Leave-last-out positives: each user's final event is the target and the
/// most recent `max_len` events before it form the history. Users with fewer
/// than `min_len + 1` events are dropped.
pub fn build_sequences(
    events: &[BehaviorEvent],
    max_len: usize,
    min_len: usize,
) -> Result<SequenceBuild> {
    let min_len = min_len.max(1);
    let mut sequences = Vec::new();
    let mut dropped_users = 0;
    for log in group_by_user(events).values() {
        if log.len() < min_len + 1 {
            dropped_users += 1;
            continue;
        }
        sequences.push(positive(log, log.len() - 1, max_len));
    }
    if sequences.is_empty() {
        return Err(Error::NoSequences(format!(
            "{} events, {} users dropped below min_len {}",
            events.len(),
            dropped_users,
            min_len
        )));
    }
    Ok(SequenceBuild {
        sequences,
        dropped_users,
    })
}

/// Training positives that never see a user's final event: targets are the
/// `targets_per_user` events preceding it (latest first), each needing at
/// least `min_len` events of history.
pub fn build_training_sequences(
    events: &[BehaviorEvent],
    max_len: usize,
    min_len: usize,
    targets_per_user: usize,
) -> Result<SequenceBuild> {
    let min_len = min_len.max(1);
    let mut sequences = Vec::new();
    let mut dropped_users = 0;
    for log in group_by_user(events).values() {
        let visible = &log[..log.len() - 1];
        let before = sequences.len();
        for target in (min_len..visible.len()).rev().take(targets_per_user) {
            sequences.push(positive(visible, target, max_len));
        }
        if sequences.len() == before {
            dropped_users += 1;
        }
    }
    if sequences.is_empty() {
        return Err(Error::NoSequences(format!(
            "no user has more than {} events before the held-out target",
            min_len
        )));
    }
    Ok(SequenceBuild {
        sequences,
        dropped_users,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Splits sequences into `(kept, held_out)` by a hash of the user index, so
/// every sequence of a user lands on the same side.
pub fn split_by_user_hash(
    sequences: Vec<BehaviorSequence>,
    held_out_fraction: f64,
) -> (Vec<BehaviorSequence>, Vec<BehaviorSequence>) {
    let threshold = (held_out_fraction.clamp(0.0, 1.0) * 10_000.0) as u64;
    sequences
        .into_iter()
        .partition(|s| splitmix64(s.user as u64) % 10_000 >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: u32, item: u32, ts: u64) -> BehaviorEvent {
        BehaviorEvent {
            user,
            item,
            category: 1,
            timestamp: Timestamp(ts),
        }
    }

    #[test]
    fn last_event_is_target() {
        let events = vec![ev(1, 10, 1), ev(1, 11, 2), ev(1, 12, 3)];
        let b = build_sequences(&events, 100, 1).unwrap();
        assert_eq!(b.sequences.len(), 1);
        let s = &b.sequences[0];
        assert_eq!(
            s.history.iter().map(|e| e.item).collect::<Vec<_>>(),
            vec![10, 11]
        );
        assert_eq!(s.target_item, 12);
        assert_eq!(s.label, 1.0);
    }

    #[test]
    fn single_event_user_dropped() {
        let events = vec![ev(1, 10, 1), ev(2, 10, 1), ev(2, 11, 2)];
        let b = build_sequences(&events, 100, 1).unwrap();
        assert_eq!(b.sequences.len(), 1);
        assert_eq!(b.dropped_users, 1);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let events: Vec<_> = (0..150).map(|i| ev(1, i, i as u64)).collect();
        let b = build_sequences(&events, 100, 1).unwrap();
        let s = &b.sequences[0];
        assert_eq!(s.history.len(), 100);
        assert_eq!(s.history[0].item, 49);
        assert_eq!(s.history[99].item, 148);
        assert_eq!(s.target_item, 149);
    }

    #[test]
    fn ties_keep_input_order() {
        let events = vec![ev(1, 5, 10), ev(1, 6, 10), ev(1, 7, 10)];
        let b = build_sequences(&events, 100, 1).unwrap();
        assert_eq!(b.sequences[0].target_item, 7);
        assert_eq!(b.sequences[0].history[0].item, 5);
    }

    #[test]
    fn training_targets_exclude_final_event() {
        let events: Vec<_> = (0..8).map(|i| ev(1, i, i as u64)).collect();
        let b = build_training_sequences(&events, 100, 3, 2).unwrap();
        let targets: Vec<_> = b.sequences.iter().map(|s| s.target_item).collect();
        assert_eq!(targets, vec![6, 5]);
        assert_eq!(b.sequences[0].history.len(), 6);
        let all = build_training_sequences(&events, 100, 3, 100).unwrap();
        assert_eq!(all.sequences.len(), 4);
    }

    #[test]
    fn hash_split_is_per_user() {
        let seqs: Vec<_> = (0..1000)
            .flat_map(|u| {
                let events = vec![ev(u, 1, 1), ev(u, 2, 2), ev(u, 3, 3)];
                build_training_sequences(&events, 10, 1, 1)
                    .unwrap()
                    .sequences
            })
            .collect();
        let (kept, held) = split_by_user_hash(seqs, 0.1);
        assert!(held.len() > 50 && held.len() < 150, "{}", held.len());
        assert_eq!(kept.len() + held.len(), 1000);
    }
}
