//! Accuracy smoothing, rounds-to-target and global loss.

use alloc::vec::Vec;
use core::fmt;

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::models::{Batch, ModelSpec};
use crate::params::ParamVector;

/// Decay used when smoothing test accuracy.
pub const EMA_DECAY: f64 = 0.9;

/// Exponential moving average seeded with the first observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaSeries {
    decay: f64,
    raw: Vec<f64>,
    smoothed: Vec<f64>,
}

impl Default for EmaSeries {
    fn default() -> Self {
        EmaSeries::new(EMA_DECAY)
    }
}

impl EmaSeries {
    pub fn new(decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "ema decay must lie in (0, 1)");
        EmaSeries { decay, raw: Vec::new(), smoothed: Vec::new() }
    }

    /// Appends `value` and returns the new smoothed value.
    pub fn push(&mut self, value: f64) -> f64 {
        let s = match self.smoothed.last() {
            None => value,
            // prev + (1 - decay) * (value - prev) == decay * prev + (1 - decay) * value
            Some(&prev) => prev + (1.0 - self.decay) * (value - prev),
        };
        self.raw.push(value);
        self.smoothed.push(s);
        s
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn smoothed(&self) -> &[f64] {
        &self.smoothed
    }

    pub fn last(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

/// Number of rounds needed to reach a target, or the budget if it never was.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundsToTarget {
    Reached(usize),
    /// Not reached within the limit; renders as `"{limit}+"`.
    Saturated(usize),
}

impl RoundsToTarget {
    pub fn reached(self) -> Option<usize> {
        match self {
            RoundsToTarget::Reached(r) => Some(r),
            RoundsToTarget::Saturated(_) => None,
        }
    }

    /// Rounds, counting a saturated result as its limit.
    pub fn rounds_or_limit(self) -> usize {
        match self {
            RoundsToTarget::Reached(r) | RoundsToTarget::Saturated(r) => r,
        }
    }
}

impl fmt::Display for RoundsToTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundsToTarget::Reached(r) => write!(f, "{r}"),
            RoundsToTarget::Saturated(limit) => write!(f, "{limit}+"),
        }
    }
}

/// 1-based index of the first of the first `limit` values that is `>= target`.
pub fn rounds_to_target(smoothed: &[f64], target: f64, limit: usize) -> RoundsToTarget {
    first_index(smoothed, limit, |v| v >= target)
}

/// 1-based index of the first of the first `limit` values that is `<= target`.
pub fn rounds_to_loss_target(losses: &[f64], target: f64, limit: usize) -> RoundsToTarget {
    first_index(losses, limit, |v| v <= target)
}

fn first_index(values: &[f64], limit: usize, hit: impl Fn(f64) -> bool) -> RoundsToTarget {
    values
        .iter()
        .take(limit)
        .position(|&v| hit(v))
        .map_or(RoundsToTarget::Saturated(limit), |i| RoundsToTarget::Reached(i + 1))
}

/// Unweighted mean over clients of each client's mean data loss (weight decay
/// excluded).
pub fn global_loss(spec: &ModelSpec, params: &ParamVector, partition: &Partition, dataset: &Dataset) -> Result<f64> {
    if partition.client_count() == 0 {
        return Err(Error::Empty("partition"));
    }
    let shards = partition.assignments().iter().map(|s| dataset.batch(s)).collect::<Result<Vec<_>>>()?;
    global_loss_of_shards(spec, params, &shards)
}

/// [`global_loss`] over pre-gathered client shards.
pub fn global_loss_of_shards(spec: &ModelSpec, params: &ParamVector, shards: &[Batch]) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::Empty("partition"));
    }
    let mut total = 0.0;
    for shard in shards {
        total += spec.data_loss(params, shard)?;
    }
    Ok(total / shards.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition_dirichlet, partition_iid};
    use crate::rng::{stream, Purpose};
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn ema_examples() {
        let mut e = EmaSeries::default();
        assert_eq!(e.push(0.5), 0.5);
        assert!((e.push(0.7) - 0.52).abs() < 1e-15);
        let mut c = EmaSeries::default();
        for _ in 0..50 {
            assert_eq!(c.push(0.37), 0.37);
        }
    }

    #[test]
    fn rounds_to_target_examples() {
        assert_eq!(rounds_to_target(&[0.3, 0.5, 0.9], 0.84, 1000), RoundsToTarget::Reached(3));
        let never = vec![0.1; 1000];
        let r = rounds_to_target(&never, 0.84, 1000);
        assert_eq!(r, RoundsToTarget::Saturated(1000));
        assert_eq!(r.to_string(), "1000+");
        assert_eq!(rounds_to_target(&[0.3, 0.5], 0.1, 1000), RoundsToTarget::Reached(1));
        assert_eq!(rounds_to_target(&[0.3, 0.5, 0.9], 0.84, 2), RoundsToTarget::Saturated(2));
        assert_eq!(rounds_to_loss_target(&[2.0, 1.0, 0.5], 0.9, 10), RoundsToTarget::Reached(3));
    }

    #[test]
    fn global_loss_single_client_is_dataset_loss() {
        let d = generate_synthetic(2, 3, 20, 4, 1.0).unwrap();
        let spec = ModelSpec::softmax(4, 3);
        let params = spec.init_params(&mut stream(0, Purpose::Init, 0, 0));
        let p = partition_iid(&d, 1, 0).unwrap();
        let direct = spec.data_loss(&params, &d.to_batch().unwrap()).unwrap();
        let g = global_loss(&spec, &params, &p, &d).unwrap();
        assert!((g - direct).abs() < 1e-14);
    }

    #[test]
    fn global_loss_equal_shards_is_dataset_mean() {
        let d = generate_synthetic(5, 4, 25, 3, 1.5).unwrap();
        let spec = ModelSpec::mlp(3, vec![4], 4).with_weight_decay(0.001);
        let params = spec.init_params(&mut stream(1, Purpose::Init, 0, 0));
        let direct = spec.data_loss(&params, &d.to_batch().unwrap()).unwrap();
        for p in [partition_iid(&d, 10, 3).unwrap(), partition_dirichlet(&d, 20, 0.3, 3).unwrap()] {
            let g = global_loss(&spec, &params, &p, &d).unwrap();
            assert!((g - direct).abs() < 1e-12, "{g} vs {direct}");
        }
    }

    #[test]
    fn global_loss_of_zero_softmax() {
        let d = generate_synthetic(2, 5, 4, 2, 1.0).unwrap();
        let spec = ModelSpec::softmax(2, 5);
        let p = partition_iid(&d, 4, 0).unwrap();
        let g = global_loss(&spec, &ParamVector::zeros(15), &p, &d).unwrap();
        assert!((g - libm::log(5.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ema_stays_within_running_range(values in proptest::collection::vec(-10.0f64..10.0, 1..100)) {
            let mut e = EmaSeries::default();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in &values {
                lo = lo.min(v);
                hi = hi.max(v);
                let s = e.push(v);
                prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            }
            prop_assert_eq!(e.smoothed().len(), values.len());
        }

        #[test]
        fn ema_of_monotone_series_is_monotone(mut values in proptest::collection::vec(0.0f64..1.0, 1..100)) {
            values.sort_by(f64::total_cmp);
            let mut e = EmaSeries::default();
            values.iter().for_each(|&v| { e.push(v); });
            prop_assert!(e.smoothed().windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn relaxing_target_never_needs_more_rounds(
            values in proptest::collection::vec(0.0f64..1.0, 0..60),
            t1 in 0.01f64..0.99, t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = rounds_to_target(&values, lo, 60).rounds_or_limit();
            let b = rounds_to_target(&values, hi, 60).rounds_or_limit();
            prop_assert!(a <= b);
        }
    }
}
