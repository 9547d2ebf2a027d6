use rand::seq::index;
use rand::Rng;

use crate::env::PriceAction;
use crate::matrix::Matrix;

pub const DEFAULT_REPLAY_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Matrix,
    pub action: PriceAction,
    pub reward: f64,
    pub next_features: Matrix,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(4096)),
            capacity,
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `batch` distinct transitions drawn uniformly, or `None` while the
    /// buffer holds fewer than `batch`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(
            index::sample(rng, self.items.len(), batch)
                .iter()
                .map(|i| &self.items[i])
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn tr(r: f64) -> Transition {
        Transition {
            features: Matrix::zeros(1, 4),
            action: PriceAction::new(vec![3]).unwrap(),
            reward: r,
            next_features: Matrix::zeros(1, 4),
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..5 {
            buf.push(tr(k as f64));
            assert!(buf.len() <= 3);
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn samples_without_replacement() {
        let mut buf = ReplayBuffer::new(100);
        for k in 0..40 {
            buf.push(tr(k as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(buf.sample(41, &mut rng).is_none());
        let batch = buf.sample(32, &mut rng).unwrap();
        let distinct: HashSet<u64> = batch.iter().map(|t| t.reward.to_bits()).collect();
        assert_eq!(distinct.len(), 32);
    }
}
