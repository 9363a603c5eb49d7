//! Bounded first-in first-out pool of per-frame entries.

use alloc::collections::VecDeque;

pub trait FrameIndexed {
    fn frame_index(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("frame {pushed} pushed after frame {latest}; indices must increase")]
    OutOfOrder { latest: usize, pushed: usize },
    #[error("memory pool capacity must be at least 1")]
    ZeroCapacity,
}

/// Holds at most `capacity` entries ordered by ascending frame index.
#[derive(Debug, Clone)]
pub struct FifoPool<E> {
    capacity: usize,
    entries: VecDeque<E>,
}

impl<E: FrameIndexed> FifoPool<E> {
    pub fn new(capacity: usize) -> Result<Self, PoolError> {
        if capacity == 0 {
            return Err(PoolError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `entry`, evicting the oldest entry when over capacity.
    /// Returns the evicted entry, if any.
    pub fn push(&mut self, entry: E) -> Result<Option<E>, PoolError> {
        if let Some(last) = self.entries.back() {
            if entry.frame_index() <= last.frame_index() {
                return Err(PoolError::OutOfOrder {
                    latest: last.frame_index(),
                    pushed: entry.frame_index(),
                });
            }
        }
        self.entries.push_back(entry);
        Ok(if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        })
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.entries.iter()
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(FrameIndexed::frame_index)
    }
}
