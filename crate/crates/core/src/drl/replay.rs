use rand::Rng;

use super::DrlError;

/// One `(s, a, r, s', done)` experience. `done` marks a true terminal state
/// (collision or success); episodes cut by the step limit are stored with
/// `done = false` so their value still bootstraps.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO experience store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), cursor: 0 }
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

    /// Stores a transition, overwriting the oldest one when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// `batch` transitions drawn uniformly with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, batch: usize, rng: &mut R) -> Result<Vec<&'a Transition>, DrlError> {
        if self.items.len() < batch {
            return Err(DrlError::UnderFilled { occupancy: self.items.len(), batch });
        }
        Ok((0..batch).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(i: usize) -> Transition {
        Transition { state: vec![i as f64], action: i % 3, reward: i as f64, next_state: vec![0.0], done: false }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut buf = ReplayBuffer::new(100_000);
        for i in 1..=100_001 {
            buf.push(t(i));
        }
        assert_eq!(buf.len(), 100_000);
        assert!(buf.iter_oldest_first().all(|x| x.reward != 1.0));
        let order: Vec<f64> = buf.iter_oldest_first().map(|x| x.reward).take(2).collect();
        assert_eq!(order, vec![2.0, 3.0]);
        assert_eq!(buf.iter_oldest_first().last().unwrap().reward, 100_001.0);
    }

    #[test]
    fn under_filled_sample_fails() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..31 {
            buf.push(t(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(32, &mut rng), Err(DrlError::UnderFilled { occupancy: 31, batch: 32 })));
        buf.push(t(31));
        assert_eq!(buf.sample(32, &mut rng).unwrap().len(), 32);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..10 {
            buf.push(t(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n / 10 {
            for x in buf.sample(10, &mut rng).unwrap() {
                counts[x.reward as usize] += 1;
            }
        }
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.1).abs() < 3.0 * sigma, "{counts:?}");
        }
    }
}
