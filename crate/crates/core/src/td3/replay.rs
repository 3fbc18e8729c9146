//! Fixed-capacity ring buffer of transitions.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Column-major minibatch: one transition per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub rewards: DVector<f64>,
    pub next_states: DMatrix<f64>,
    pub dones: DVector<f64>,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Self {
        let b = items.len();
        let d = items[0].state.len();
        let a = items[0].action.len();
        Batch {
            states: DMatrix::from_fn(d, b, |r, c| items[c].state[r]),
            actions: DMatrix::from_fn(a, b, |r, c| items[c].action[r]),
            rewards: DVector::from_fn(b, |c, _| items[c].reward),
            next_states: DMatrix::from_fn(d, b, |r, c| items[c].next_state[r]),
            dones: DVector::from_fn(b, |c, _| items[c].done as u8 as f64),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Invalid("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { capacity, items: Vec::new(), next: 0 })
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

    /// Uniform sample of `size` distinct transitions.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Batch> {
        if size == 0 || size > self.items.len() {
            return Err(Error::Invalid(format!("cannot sample {size} from {} transitions", self.items.len())));
        }
        let picked: Vec<&Transition> = index::sample(rng, self.items.len(), size).iter().map(|i| &self.items[i]).collect();
        Ok(Batch::from_transitions(&picked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: f64) -> Transition {
        Transition { state: vec![v; 2], action: vec![v], reward: v, next_state: vec![v + 1.0; 2], done: false }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for k in 0..5 {
            buf.push(t(k as f64));
        }
        assert_eq!(buf.len(), 3);
        let mut rewards: Vec<f64> = buf.items.iter().map(|x| x.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn batches_have_distinct_members() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for k in 0..50 {
            buf.push(t(k as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let b = buf.sample(50, &mut rng).unwrap();
        let mut r: Vec<f64> = b.rewards.iter().cloned().collect();
        r.sort_by(f64::total_cmp);
        r.dedup();
        assert_eq!(r.len(), 50);
        assert_eq!(b.states.shape(), (2, 50));
        assert!(buf.sample(51, &mut rng).is_err());
    }
}
