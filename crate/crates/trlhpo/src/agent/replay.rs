//! Bounded FIFO experience buffer with uniform minibatch sampling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::space::ActionVector;

/// One environment interaction, stored for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: ActionVector,
    pub reward: f64,
    pub next_state: EnvState,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    total_appended: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { items: VecDeque::with_capacity(capacity), capacity, total_appended: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.total_appended += 1;
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

    /// Count of every push ever made, including evicted items.
    pub fn total_appended(&self) -> usize {
        self.total_appended
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Uniform sample of `n` distinct indices; requires `len() >= n`.
    pub fn sample_indices(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        assert!(self.items.len() >= n, "buffer smaller than batch");
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..n {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }
}
