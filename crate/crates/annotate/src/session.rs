use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use mitodiff::data::MAX_ROUNDS;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const DEFAULT_REPEATS: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Closed,
}

/// One annotator's pass over a shuffled, repeated patch queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub annotator_id: String,
    pub seed: u64,
    pub repeats: u32,
    /// Distinct patches per round.
    pub round_len: usize,
    pub queue: Vec<String>,
    pub cursor: usize,
    pub created: DateTime<Utc>,
}

impl Session {
    pub fn status(&self) -> SessionStatus {
        if self.cursor < self.queue.len() {
            SessionStatus::Open
        } else {
            SessionStatus::Closed
        }
    }

    pub fn current(&self) -> Option<&str> {
        self.queue.get(self.cursor).map(String::as_str)
    }

    /// 1-based round of a queue position.
    pub fn round_at(&self, position: usize) -> u32 {
        (position / self.round_len) as u32 + 1
    }
}

/// `repeats` independent shuffles, concatenated. When a round would open
/// with the patch that closed the previous one, that patch is swapped with a
/// random later slot so no patch is shown twice in a row.
pub fn build_queue(patch_ids: &[String], repeats: u32, seed: u64) -> Result<Vec<String>> {
    if patch_ids.is_empty() {
        return Err(ServiceError::validation("session needs at least one patch"));
    }
    if !(1..=MAX_ROUNDS).contains(&repeats) {
        return Err(ServiceError::validation(format!(
            "repeats must be in 1..={MAX_ROUNDS}, got {repeats}"
        )));
    }
    let mut seen = BTreeSet::new();
    for id in patch_ids {
        if !seen.insert(id.as_str()) {
            return Err(ServiceError::validation(format!("patch {id} listed twice")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue: Vec<String> = Vec::with_capacity(patch_ids.len() * repeats as usize);
    for _ in 0..repeats {
        let mut round = patch_ids.to_vec();
        round.shuffle(&mut rng);
        if round.len() > 1 && queue.last() == Some(&round[0]) {
            let j = rng.random_range(1..round.len());
            round.swap(0, j);
        }
        queue.extend(round);
    }
    Ok(queue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn queue_shape() {
        let q = build_queue(&ids(5), 3, 1).unwrap();
        assert_eq!(q.len(), 15);
        let q1 = build_queue(&ids(5), 1, 1).unwrap();
        let mut sorted = q1.clone();
        sorted.sort();
        assert_eq!(sorted, ids(5));
        assert_eq!(build_queue(&ids(5), 3, 9).unwrap(), build_queue(&ids(5), 3, 9).unwrap());
    }

    #[test]
    fn rounds_cover_before_repeating() {
        for seed in 0..200 {
            let p = ids(1 + (seed as usize % 6));
            let q = build_queue(&p, 3, seed).unwrap();
            for round in q.chunks(p.len()) {
                let set: BTreeSet<_> = round.iter().collect();
                assert_eq!(set.len(), p.len());
            }
            if p.len() > 1 {
                assert!(q.windows(2).all(|w| w[0] != w[1]), "seed {seed}: {q:?}");
            }
            let mut counts = BTreeMap::new();
            for id in &q {
                *counts.entry(id).or_insert(0) += 1;
            }
            assert!(counts.values().all(|&c| c == 3));
        }
    }

    #[test]
    fn bad_requests() {
        assert!(build_queue(&[], 3, 0).is_err());
        assert!(build_queue(&ids(3), 0, 0).is_err());
        assert!(build_queue(&ids(3), 4, 0).is_err());
        assert!(build_queue(&["a".into(), "a".into()], 1, 0).is_err());
    }

    #[test]
    fn rounds_by_position() {
        let s = Session {
            session_id: "s".into(),
            annotator_id: "a".into(),
            seed: 0,
            repeats: 3,
            round_len: 4,
            queue: build_queue(&ids(4), 3, 0).unwrap(),
            cursor: 0,
            created: Utc::now(),
        };
        assert_eq!(s.round_at(0), 1);
        assert_eq!(s.round_at(3), 1);
        assert_eq!(s.round_at(4), 2);
        assert_eq!(s.round_at(11), 3);
    }
}
