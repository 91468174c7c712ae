use rand::seq::index::sample;

use crate::rng::Rng;
use crate::tasks::LabeledSet;

/// Experience-replay memory split evenly across all tasks seen so far.
///
/// After `k` tasks each task owns `capacity / k` slots, and the first
/// `capacity % k` tasks own one extra.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    per_task: Vec<LabeledSet>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, per_task: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_task.iter().map(LabeledSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn task_counts(&self) -> Vec<usize> {
        self.per_task.iter().map(LabeledSet::len).collect()
    }

    pub fn task_samples(&self, task: usize) -> &LabeledSet {
        &self.per_task[task]
    }

    /// Slot quota of every task once `num_tasks` tasks share the buffer.
    pub fn quotas(capacity: usize, num_tasks: usize) -> Vec<usize> {
        (0..num_tasks)
            .map(|j| capacity / num_tasks + usize::from(j < capacity % num_tasks))
            .collect()
    }

    /// Admit a new task: shrink every stored task to its new quota by
    /// uniform random eviction, then fill the new task's quota with rows
    /// drawn uniformly without replacement from `new_task`.
    pub fn rebalance(&mut self, new_task: &LabeledSet, rng: &mut Rng) {
        let quotas = Self::quotas(self.capacity, self.per_task.len() + 1);
        for (stored, &quota) in self.per_task.iter_mut().zip(&quotas) {
            if stored.len() > quota {
                let mut keep = sample(rng, stored.len(), quota).into_vec();
                keep.sort_unstable();
                *stored = stored.select(&keep);
            }
        }
        let quota = *quotas.last().unwrap();
        let take = quota.min(new_task.len());
        let mut rows = sample(rng, new_task.len(), take).into_vec();
        rows.sort_unstable();
        self.per_task.push(if take == 0 { LabeledSet::empty(self.dim) } else { new_task.select(&rows) });
    }

    /// Everything stored, in task order.
    pub fn all(&self) -> LabeledSet {
        LabeledSet::concat(self.dim, &self.per_task)
    }

    /// A uniform minibatch of `n` stored samples, or the whole buffer if it
    /// holds fewer than `n`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> LabeledSet {
        let all = self.all();
        if all.len() <= n {
            return all;
        }
        let mut rows = sample(rng, all.len(), n).into_vec();
        rows.sort_unstable();
        all.select(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::Array2;

    fn task_data(label: usize, n: usize) -> LabeledSet {
        let x = Array2::from_shape_fn((n, 2), |(r, c)| (label * 1000 + r * 2 + c) as f64);
        LabeledSet::new(x, vec![label; n]).unwrap()
    }

    #[test]
    fn capacity_ten_schedule() {
        let mut rng = stream(0, Stream::Replay);
        let mut buf = ReplayBuffer::new(10, 2);
        buf.rebalance(&task_data(0, 50), &mut rng);
        assert_eq!(buf.task_counts(), vec![10]);
        buf.rebalance(&task_data(1, 50), &mut rng);
        assert_eq!(buf.task_counts(), vec![5, 5]);
        buf.rebalance(&task_data(2, 50), &mut rng);
        assert_eq!(buf.task_counts(), vec![4, 3, 3]);
        // Survivors of earlier tasks are original rows of that task.
        assert!(buf.task_samples(0).y.iter().all(|&y| y == 0));
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut rng = stream(0, Stream::Replay);
        let mut buf = ReplayBuffer::new(0, 2);
        for k in 0..4 {
            buf.rebalance(&task_data(k, 5), &mut rng);
            assert!(buf.is_empty());
        }
        assert_eq!(buf.sample(8, &mut rng).len(), 0);
    }

    #[test]
    fn small_buffer_is_replayed_whole() {
        let mut rng = stream(1, Stream::Replay);
        let mut buf = ReplayBuffer::new(6, 2);
        buf.rebalance(&task_data(0, 20), &mut rng);
        buf.rebalance(&task_data(1, 20), &mut rng);
        assert_eq!(buf.sample(64, &mut rng), buf.all());
        let mb = buf.sample(4, &mut rng);
        assert_eq!(mb.len(), 4);
    }

    #[test]
    fn new_task_smaller_than_quota() {
        let mut rng = stream(2, Stream::Replay);
        let mut buf = ReplayBuffer::new(100, 2);
        buf.rebalance(&task_data(0, 7), &mut rng);
        assert_eq!(buf.task_counts(), vec![7]);
    }
}
