//! Ring-buffer experience replay with uniform or proportional prioritized sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervals::{Interval, IntervalSet};

/// Action representations stored in a transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(f64),
    Discrete(usize),
    /// Bin index plus the parameters of every bin (the chosen one is `params[bin]`).
    Parameterized {
        bin: usize,
        params: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Allowed set at `state`.
    pub allowed: IntervalSet,
    /// Allowed set at `next_state`.
    pub allowed_next: IntervalSet,
    /// Interval the action was produced in (multi-pass agents only).
    pub chosen_interval: Option<Interval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Uniform,
    Prioritized,
}

/// A sampled mini-batch; `weights` are importance-sampling corrections.
#[derive(Debug)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub transitions: Vec<&'a Transition>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    /// Cached `p_i^α`.
    powered: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64, beta: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be > 0".into()));
        }
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be >= 0".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            powered: Vec::with_capacity(capacity.min(1 << 16)),
            alpha,
            beta,
            eps: 1e-6,
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Appends, overwriting the oldest item when full. New items get the running max priority.
    pub fn push(&mut self, tr: Transition) {
        let p = self.max_priority.powf(self.alpha);
        if self.items.len() < self.capacity {
            self.items.push(tr);
            self.powered.push(p);
        } else {
            self.items[self.next] = tr;
            self.powered[self.next] = p;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Sampling distribution `P(i) = p_i^α / Σ_k p_k^α`.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.powered.iter().sum();
        self.powered.iter().map(|p| p / total).collect()
    }

    /// Draws `n` indices with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, mode: SampleMode, rng: &mut R) -> Result<Batch<'_>> {
        let size = self.items.len();
        if size < n || size == 0 {
            return Err(Error::NotEnoughSamples {
                requested: n,
                available: size,
            });
        }
        let (indices, weights) = match mode {
            SampleMode::Uniform => ((0..n).map(|_| rng.random_range(0..size)).collect(), vec![1.0; n]),
            SampleMode::Prioritized => {
                let mut prefix = Vec::with_capacity(size);
                let mut acc = 0.0;
                for p in &self.powered {
                    acc += p;
                    prefix.push(acc);
                }
                let total = acc;
                let indices: Vec<usize> = (0..n)
                    .map(|_| {
                        let u = rng.random::<f64>() * total;
                        prefix.partition_point(|&c| c <= u).min(size - 1)
                    })
                    .collect();
                let mut weights: Vec<f64> = indices
                    .iter()
                    .map(|&i| (size as f64 * self.powered[i] / total).powf(-self.beta))
                    .collect();
                let max = weights.iter().copied().fold(0.0, f64::max);
                weights.iter_mut().for_each(|w| *w /= max);
                (indices, weights)
            }
        };
        let transitions = indices.iter().map(|&i| &self.items[i]).collect();
        Ok(Batch {
            indices,
            transitions,
            weights,
        })
    }

    /// Sets `p_i = |δ_i| + ε` and tracks the maximum priority.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::ShapeMismatch {
                expected: indices.len(),
                got: td_errors.len(),
            });
        }
        for (&i, &d) in indices.iter().zip(td_errors) {
            if i >= self.items.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: self.items.len(),
                });
            }
            let p = d.abs() + self.eps;
            self.max_priority = self.max_priority.max(p);
            self.powered[i] = p.powf(self.alpha);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64) -> Transition {
        Transition {
            state: vec![r],
            action: Action::Discrete(0),
            reward: r,
            next_state: vec![r],
            done: false,
            allowed: IntervalSet::empty(),
            allowed_next: IntervalSet::empty(),
            chosen_interval: None,
        }
    }

    /// Draws `n` indices in batches no larger than the buffer.
    fn draw(b: &ReplayBuffer, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let k = (n - out.len()).min(b.len());
            out.extend(b.sample(k, SampleMode::Prioritized, rng).unwrap().indices);
        }
        out
    }

    fn chi_square(counts: &[usize], probs: &[f64]) -> f64 {
        let n: usize = counts.iter().sum();
        counts
            .iter()
            .zip(probs)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum()
    }

    #[test]
    fn ring_semantics() {
        let mut b = ReplayBuffer::new(3, 0.6, 0.4).unwrap();
        for i in 0..4 {
            b.push(tr(i as f64));
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = b.iter_oldest_first().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn new_items_get_max_priority() {
        let mut b = ReplayBuffer::new(10, 1.0, 0.4).unwrap();
        b.push(tr(0.0));
        assert_eq!(b.probabilities(), vec![1.0]);
        b.update_priorities(&[0], &[-2.0]).unwrap();
        assert_eq!(b.max_priority(), 2.0 + 1e-6);
        b.push(tr(1.0));
        let p = b.probabilities();
        assert!((p[0] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn priority_formula() {
        let mut b = ReplayBuffer::new(10, 1.0, 0.4).unwrap();
        b.push(tr(0.0));
        b.push(tr(1.0));
        b.update_priorities(&[0, 1], &[3.0 - 1e-6, 1.0 - 1e-6]).unwrap();
        let p = b.probabilities();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        b.update_priorities(&[1], &[0.0]).unwrap();
        assert!(b.probabilities()[1] > 0.0);
        assert!(matches!(
            b.update_priorities(&[5], &[1.0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sample_errors_when_short() {
        let b = ReplayBuffer::new(10, 0.6, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            b.sample(1, SampleMode::Uniform, &mut rng),
            Err(Error::NotEnoughSamples { .. })
        ));
    }

    #[test]
    fn alpha_zero_is_uniform() {
        let mut b = ReplayBuffer::new(8, 0.0, 0.4).unwrap();
        for i in 0..8 {
            b.push(tr(i as f64));
        }
        b.update_priorities(&[0, 1, 2], &[10.0, 0.1, 5.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 8];
        for i in draw(&b, 100_000, &mut rng) {
            counts[i] += 1;
        }
        // χ² critical value for 7 degrees of freedom at 0.001.
        assert!(chi_square(&counts, &[0.125; 8]) < 24.32);
    }

    #[test]
    fn beta_zero_gives_unit_weights() {
        let mut b = ReplayBuffer::new(8, 0.6, 0.0).unwrap();
        for i in 0..8 {
            b.push(tr(i as f64));
        }
        b.update_priorities(&[0], &[4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = b.sample(8, SampleMode::Prioritized, &mut rng).unwrap();
        assert!(batch.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn frequencies_match_probabilities() {
        let mut b = ReplayBuffer::new(5, 0.7, 0.4).unwrap();
        for i in 0..5 {
            b.push(tr(i as f64));
        }
        b.update_priorities(&[0, 1, 2, 3, 4], &[0.1, 1.0, 2.0, 0.5, 3.0])
            .unwrap();
        let probs = b.probabilities();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for i in draw(&b, n, &mut rng) {
            counts[i] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?} {probs:?}");
        }
        // Mass shifts towards an updated index.
        b.update_priorities(&[0], &[50.0]).unwrap();
        let mut hits = 0;
        for i in draw(&b, 10_000, &mut rng) {
            hits += usize::from(i == 0);
        }
        assert!(hits > 5_000);
    }

    #[test]
    fn is_weights_normalized_by_batch_max() {
        let mut b = ReplayBuffer::new(4, 1.0, 1.0).unwrap();
        for i in 0..4 {
            b.push(tr(i as f64));
        }
        b.update_priorities(&[0, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = b.sample(4, SampleMode::Prioritized, &mut rng).unwrap();
        let max = batch.weights.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        let p = b.probabilities();
        for (&i, &w) in batch.indices.iter().zip(&batch.weights) {
            let raw = (4.0 * p[i]).powf(-1.0);
            let raw_max = batch
                .indices
                .iter()
                .map(|&j| (4.0 * p[j]).powf(-1.0))
                .fold(0.0, f64::max);
            assert!((w - raw / raw_max).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(ops in prop::collection::vec((0usize..20, -5.0f64..5.0), 1..60), alpha in 0.0f64..1.0) {
            let mut b = ReplayBuffer::new(7, alpha, 0.4).unwrap();
            for (k, (i, d)) in ops.into_iter().enumerate() {
                b.push(tr(k as f64));
                let idx = i % b.len();
                b.update_priorities(&[idx], &[d]).unwrap();
                prop_assert!((b.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn ring_keeps_last_items(k in 0usize..40, cap in 1usize..10) {
            let mut b = ReplayBuffer::new(cap, 0.6, 0.4).unwrap();
            for i in 0..k {
                b.push(tr(i as f64));
            }
            prop_assert!(b.len() <= cap);
            let kept: Vec<f64> = b.iter_oldest_first().map(|t| t.reward).collect();
            let expect: Vec<f64> = (k.saturating_sub(cap)..k).map(|i| i as f64).collect();
            prop_assert_eq!(kept, expect);
        }
    }
}
