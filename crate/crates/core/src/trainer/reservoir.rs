use rand::Rng;

use crate::rng::StreamRng;

/// Fixed-capacity uniform sample of a stream (Vitter's algorithm R).
#[derive(Clone, Debug)]
pub struct Reservoir<T> {
    capacity: usize,
    seen: u64,
    items: Vec<T>,
    rng: StreamRng,
}

impl<T: Clone> Reservoir<T> {
    pub fn new(capacity: usize, rng: StreamRng) -> Self {
        Self {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn insert(&mut self, item: T) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else if self.capacity > 0 {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = T>) {
        for it in items {
            self.insert(it);
        }
    }

    /// `min(m, len)` stored items drawn without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<T> {
        let m = m.min(self.items.len());
        rand::seq::index::sample(rng, self.items.len(), m)
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect()
    }
}
