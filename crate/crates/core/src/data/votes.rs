use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounds an annotator may score one patch.
pub const MAX_ROUNDS: u32 = 3;

/// One of the three allowed scores: 0, 0.5 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum VoteValue {
    No,
    Unsure,
    Yes,
}

impl VoteValue {
    /// The value in half-units, used for exact aggregation.
    pub fn halves(self) -> u64 {
        match self {
            VoteValue::No => 0,
            VoteValue::Unsure => 1,
            VoteValue::Yes => 2,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.halves() as f64 / 2.0
    }
}

impl TryFrom<f64> for VoteValue {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        if v == 0.0 {
            Ok(VoteValue::No)
        } else if v == 0.5 {
            Ok(VoteValue::Unsure)
        } else if v == 1.0 {
            Ok(VoteValue::Yes)
        } else {
            Err(Error::validation(format!("vote value {v} is not one of 0, 0.5, 1")))
        }
    }
}

impl From<VoteValue> for f64 {
    fn from(v: VoteValue) -> f64 {
        v.as_f64()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub annotator_id: String,
    pub round: u32,
    pub value: VoteValue,
    pub timestamp: Option<DateTime<Utc>>,
}

impl VoteRecord {
    pub fn validate(&self) -> Result<()> {
        if self.annotator_id.trim().is_empty() {
            return Err(Error::validation("vote has an empty annotator id"));
        }
        if !(1..=MAX_ROUNDS).contains(&self.round) {
            return Err(Error::validation(format!(
                "vote round {} outside 1..={MAX_ROUNDS}",
                self.round
            )));
        }
        Ok(())
    }
}

/// Mean over vote values, every annotation instance weighted equally.
/// Computed from integer half-unit counts, so the result is the correctly
/// rounded mean and independent of vote order.
pub fn vote_mean(values: &[VoteValue]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("cannot aggregate an empty vote list"));
    }
    let halves: u64 = values.iter().map(|v| v.halves()).sum();
    Ok(halves as f64 / (2 * values.len()) as f64)
}

pub fn aggregate_votes(votes: &[VoteRecord]) -> Result<f64> {
    vote_mean(&votes.iter().map(|v| v.value).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vals(xs: &[f64]) -> Vec<VoteValue> {
        xs.iter().map(|&x| VoteValue::try_from(x).unwrap()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(vote_mean(&vals(&[1.0, 1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(vote_mean(&vals(&[0.0, 0.5, 1.0])).unwrap(), 0.5);
        let m = vote_mean(&vals(&[0.0, 1.0, 1.0])).unwrap();
        assert!((m - 2.0 / 3.0).abs() <= 1e-9);
        assert_eq!((m * 1000.0).round() / 1000.0, 0.667);
        assert!(vote_mean(&[]).is_err());
    }

    #[test]
    fn value_domain() {
        assert!(VoteValue::try_from(0.3).is_err());
        assert!(VoteValue::try_from(f64::NAN).is_err());
        let v: VoteValue = serde_json::from_str("0.5").unwrap();
        assert_eq!(v, VoteValue::Unsure);
        assert_eq!(serde_json::to_string(&VoteValue::Yes).unwrap(), "1.0");
        assert!(serde_json::from_str::<VoteValue>("0.25").is_err());
    }

    #[test]
    fn round_bounds() {
        let mut v = VoteRecord {
            annotator_id: "a".into(),
            round: 1,
            value: VoteValue::Yes,
            timestamp: None,
        };
        assert!(v.validate().is_ok());
        v.round = 0;
        assert!(v.validate().is_err());
        v.round = 4;
        assert!(v.validate().is_err());
    }

    fn value() -> impl Strategy<Value = VoteValue> {
        prop_oneof![Just(VoteValue::No), Just(VoteValue::Unsure), Just(VoteValue::Yes)]
    }

    proptest! {
        #[test]
        fn mean_is_order_free_and_bounded(mut v in prop::collection::vec(value(), 1..40), seed in any::<u64>()) {
            let m = vote_mean(&v).unwrap();
            let lo = v.iter().map(|x| x.as_f64()).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= m && m <= hi);
            let k = (seed as usize) % v.len();
            v.rotate_left(k);
            v.reverse();
            prop_assert_eq!(vote_mean(&v).unwrap(), m);
        }
    }
}
