use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchRecord;
use crate::error::{Error, Result};

/// Cycles through a pool in random order, reshuffling after each pass.
#[derive(Clone, Debug)]
struct Pool<T> {
    items: Vec<T>,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Clone> Pool<T> {
    fn new(items: Vec<T>) -> Self {
        let order = (0..items.len()).collect();
        Self {
            items,
            order,
            cursor: usize::MAX,
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> T {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let item = self.items[self.order[self.cursor]].clone();
        self.cursor += 1;
        item
    }
}

/// Endless stream of batches holding exactly `batch_size / 2` positives and
/// `batch_size / 2` negatives. Each pool is walked in a fresh random order
/// per pass, so the smaller pool repeats sooner.
#[derive(Clone, Debug)]
pub struct BalancedSampler<T> {
    positives: Pool<T>,
    negatives: Pool<T>,
    half: usize,
    rng: ChaCha8Rng,
}

impl<T: Clone> BalancedSampler<T> {
    pub fn new(positives: Vec<T>, negatives: Vec<T>, batch_size: usize, seed: u64) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::validation(format!(
                "balanced sampling needs both classes (got {} positives, {} negatives)",
                positives.len(),
                negatives.len()
            )));
        }
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::validation(format!("batch size {batch_size} must be even and positive")));
        }
        Ok(Self {
            positives: Pool::new(positives),
            negatives: Pool::new(negatives),
            half: batch_size / 2,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Positives first, then negatives, each tagged with its class.
    pub fn next_batch(&mut self) -> Vec<(T, bool)> {
        let mut batch = Vec::with_capacity(2 * self.half);
        for _ in 0..self.half {
            batch.push((self.positives.draw(&mut self.rng), true));
        }
        for _ in 0..self.half {
            batch.push((self.negatives.draw(&mut self.rng), false));
        }
        batch
    }
}

impl<T: Clone> Iterator for BalancedSampler<T> {
    type Item = Vec<(T, bool)>;
    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Spatial hold-out: per slide, records with `y < fraction * height` train,
/// the rest validate.
pub fn split_by_vertical_axis(
    records: &[PatchRecord],
    slide_heights: &BTreeMap<String, f64>,
    fraction: f64,
) -> Result<(Vec<PatchRecord>, Vec<PatchRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("split fraction {fraction} must be in (0, 1)")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        let (_, y) = r
            .center
            .ok_or_else(|| Error::validation(format!("{} has no coordinates", r.patch_id)))?;
        let height = slide_heights.get(&r.slide_id).ok_or_else(|| {
            Error::validation(format!("{}: no height for slide {}", r.patch_id, r.slide_id))
        })?;
        if y < fraction * height {
            train.push(r.clone());
        } else {
            val.push(r.clone());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_balanced() {
        let mut s = BalancedSampler::new(vec![1, 2, 3], (100..1100).collect(), 8, 0).unwrap();
        for _ in 0..50 {
            let b = s.next_batch();
            assert_eq!(b.len(), 8);
            assert_eq!(b.iter().filter(|(_, p)| *p).count(), 4);
            assert!(b.iter().all(|(v, p)| *p == (*v < 100)));
        }
    }

    #[test]
    fn small_pool_repeats_and_cycles_fully() {
        let mut s = BalancedSampler::new(vec![1, 2, 3], (100..1100).collect(), 8, 4).unwrap();
        let first: Vec<i32> = s.next_batch().into_iter().filter(|x| x.1).map(|x| x.0).collect();
        assert_eq!(first.len(), 4);
        let mut seen = first.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![1, 2, 3]);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a: Vec<_> = BalancedSampler::new(vec![1, 2], vec![3, 4, 5], 4, 9).unwrap().take(20).collect();
        let b: Vec<_> = BalancedSampler::new(vec![1, 2], vec![3, 4, 5], 4, 9).unwrap().take(20).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(BalancedSampler::<i32>::new(vec![], vec![1], 4, 0).is_err());
        assert!(BalancedSampler::new(vec![1], vec![], 4, 0).is_err());
        assert!(BalancedSampler::new(vec![1], vec![2], 5, 0).is_err());
        assert!(BalancedSampler::new(vec![1], vec![2], 0, 0).is_err());
    }

    fn rec(id: &str, y: Option<f64>) -> PatchRecord {
        PatchRecord {
            patch_id: id.into(),
            slide_id: "s".into(),
            center: y.map(|y| (5.0, y)),
            image: None,
            votes: vec![],
            label: 1.0,
        }
    }

    #[test]
    fn vertical_split() {
        let heights = BTreeMap::from([("s".to_string(), 100.0)]);
        let recs: Vec<PatchRecord> =
            [10.0, 40.0, 80.0, 90.0].iter().map(|&y| rec(&format!("p{y}"), Some(y))).collect();
        let (train, val) = split_by_vertical_axis(&recs, &heights, 0.75).unwrap();
        let ids = |v: &[PatchRecord]| v.iter().map(|r| r.patch_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), vec!["p10", "p40"]);
        assert_eq!(ids(&val), vec!["p80", "p90"]);

        let zeros = vec![rec("a", Some(0.0)), rec("b", Some(0.0))];
        let (train, val) = split_by_vertical_axis(&zeros, &heights, 0.75).unwrap();
        assert_eq!((train.len(), val.len()), (2, 0));

        assert!(split_by_vertical_axis(&recs, &heights, 1.0).is_err());
        assert!(split_by_vertical_axis(&[rec("x", None)], &heights, 0.75).is_err());
        assert!(split_by_vertical_axis(&recs, &BTreeMap::new(), 0.75).is_err());
    }
}
