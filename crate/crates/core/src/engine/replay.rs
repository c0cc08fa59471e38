//! Fixed-capacity replay memory filled by reservoir sampling.

use rand::seq::index;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    seen: usize,
}

/// One reservoir step for the `seen`-th item (0-based count of items offered
/// before this one): fill while there is room, otherwise keep the item with
/// probability `capacity / (seen + 1)` in a uniformly chosen slot.
pub fn reservoir_insert<T, R: Rng>(items: &mut Vec<T>, capacity: usize, item: T, seen: usize, rng: &mut R) {
    if items.len() < capacity {
        items.push(item);
        return;
    }
    let j = rng.random_range(0..=seen);
    if j < capacity {
        items[j] = item;
    }
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
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

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn insert<R: Rng>(&mut self, item: T, rng: &mut R) {
        reservoir_insert(&mut self.items, self.capacity, item, self.seen, rng);
        self.seen += 1;
    }

    /// Up to `n` distinct stored items, uniformly at random.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        let n = n.min(self.items.len());
        index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}
