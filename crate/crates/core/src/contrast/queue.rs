use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::numerics::Tensor;
use crate::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Fixed-capacity FIFO of unit-norm keys. Pushing into a full queue
/// overwrites the oldest entries.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    /// Next slot to write.
    cursor: usize,
    fill: usize,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("queue capacity and dimension must be positive"));
        }
        Ok(KeyQueue {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        })
    }

    /// Rebuilds a queue from its raw ring storage.
    pub fn from_parts(capacity: usize, dim: usize, storage: Vec<f64>, cursor: usize, fill: usize) -> Result<Self> {
        if storage.len() != capacity * dim || cursor >= capacity.max(1) || fill > capacity {
            return Err(Error::invalid(format!(
                "inconsistent queue state: capacity {capacity}, dim {dim}, {} values, cursor {cursor}, fill {fill}",
                storage.len()
            )));
        }
        Ok(KeyQueue {
            capacity,
            dim,
            storage,
            cursor,
            fill,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Raw ring storage, `capacity × dim`.
    pub fn storage(&self) -> &[f64] {
        &self.storage
    }

    /// Occupied rows in storage order (not FIFO order). Empty slots are
    /// always at the end of storage until the first wrap.
    pub fn negatives(&self) -> &[f64] {
        &self.storage[..self.fill * self.dim]
    }

    /// Keys from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        (0..self.fill).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.storage[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Appends the rows of `keys` (`[b, dim]`) in order.
    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        let b = match *keys.shape() {
            [b, d] if d == self.dim => b,
            _ => {
                return Err(Error::shape(
                    "KeyQueue::push",
                    format!("keys {:?} for dimension {}", keys.shape(), self.dim),
                ))
            }
        };
        if b > self.capacity {
            return Err(Error::invalid(format!(
                "batch of {b} keys exceeds queue capacity {}",
                self.capacity
            )));
        }
        for (row, key) in keys.data().chunks_exact(self.dim).enumerate() {
            let norm = math::norm(key);
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::NonUnitKey { row, norm });
            }
        }
        for key in keys.data().chunks_exact(self.dim) {
            let slot = self.cursor;
            self.storage[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(key);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.fill = (self.fill + b).min(self.capacity);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_keys(dim: usize, ids: &[usize]) -> Tensor {
        Tensor::from_fn([ids.len(), dim], |i| {
            if i % dim == ids[i / dim] % dim {
                1.0
            } else {
                0.0
            }
        })
    }

    fn contents(q: &KeyQueue) -> Vec<usize> {
        q.iter().map(|k| k.iter().position(|&v| v == 1.0).unwrap()).collect()
    }

    #[test]
    fn append_in_order() {
        let mut q = KeyQueue::new(8, 8).unwrap();
        q.push(&axis_keys(8, &[3, 1, 4])).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(contents(&q), [3, 1, 4]);
    }

    #[test]
    fn fifo_eviction() {
        let mut q = KeyQueue::new(4, 8).unwrap();
        q.push(&axis_keys(8, &[0, 1, 2])).unwrap();
        q.push(&axis_keys(8, &[3, 4, 5])).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(contents(&q), [2, 3, 4, 5]);
    }

    #[test]
    fn rejects_non_unit_and_oversized_batches() {
        let mut q = KeyQueue::new(2, 2).unwrap();
        let bad = Tensor::new([1, 2], alloc::vec![1.0, 1.0]).unwrap();
        assert!(matches!(q.push(&bad), Err(Error::NonUnitKey { row: 0, .. })));
        assert!(q.push(&axis_keys(2, &[0, 1, 0])).is_err());
        assert!(q.is_empty());
    }
}
