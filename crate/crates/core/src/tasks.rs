//! Labeled datasets and class-incremental task sequences.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Rows of flattened samples with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::ShapeMismatch { expected: vec![y.len()], got: vec![x.nrows()] });
        }
        Ok(Self { x, y })
    }

    pub fn empty(dim: usize) -> Self {
        Self { x: Array2::zeros((0, dim)), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self { x: self.x.select(Axis(0), rows), y: rows.iter().map(|&r| self.y[r]).collect() }
    }

    pub fn concat<'a>(dim: usize, parts: impl IntoIterator<Item = &'a LabeledSet>) -> Self {
        let parts: Vec<&LabeledSet> = parts.into_iter().collect();
        if parts.is_empty() {
            return Self::empty(dim);
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.x.view()).collect();
        let x = concatenate(Axis(0), &views).expect("parts share a row width");
        let y = parts.iter().flat_map(|p| p.y.iter().copied()).collect();
        Self { x, y }
    }

    /// Keep only rows whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| classes.contains(&self.y[r])).collect();
        self.select(&rows)
    }
}

/// One task: its class ids and train/test splits restricted to those classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Ordered tasks D_1..D_B over pairwise disjoint class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<Task>,
    num_classes: usize,
    data_shape: Vec<usize>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Task>, num_classes: usize, data_shape: Vec<usize>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Dataset("a task sequence needs at least one task".into()));
        }
        let mut seen = BTreeSet::new();
        for task in &tasks {
            for &c in &task.classes {
                if c >= num_classes {
                    return Err(Error::LabelOutOfRange { label: c, classes: num_classes });
                }
                if !seen.insert(c) {
                    return Err(Error::Dataset(format!("class {c} appears in more than one task")));
                }
            }
        }
        Ok(Self { tasks, num_classes, data_shape })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Task `i`, 1-based.
    pub fn task(&self, i: usize) -> &Task {
        &self.tasks[i - 1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data_shape(&self) -> &[usize] {
        &self.data_shape
    }

    pub fn data_dim(&self) -> usize {
        self.data_shape.iter().product()
    }

    /// Class ids of tasks 1..=i, in task order.
    pub fn classes_seen(&self, i: usize) -> Vec<usize> {
        self.tasks[..i].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    pub fn train_union(&self, i: usize) -> LabeledSet {
        LabeledSet::concat(self.data_dim(), self.tasks[..i].iter().map(|t| &t.train))
    }

    /// Test rows of every class seen up to and including task `i`.
    pub fn test_seen(&self, i: usize) -> LabeledSet {
        LabeledSet::concat(self.data_dim(), self.tasks[..i].iter().map(|t| &t.test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[usize]) -> LabeledSet {
        let x = Array2::from_shape_fn((labels.len(), 2), |(r, c)| (r * 2 + c) as f64);
        LabeledSet::new(x, labels.to_vec()).unwrap()
    }

    fn task(classes: &[usize]) -> Task {
        Task { classes: classes.to_vec(), train: set(classes), test: set(classes) }
    }

    #[test]
    fn rejects_overlapping_classes() {
        let err = TaskSequence::new(vec![task(&[0, 1]), task(&[1, 2])], 3, vec![2]);
        assert!(err.is_err());
        assert!(TaskSequence::new(vec![], 3, vec![2]).is_err());
        assert!(TaskSequence::new(vec![task(&[0, 5])], 3, vec![2]).is_err());
    }

    #[test]
    fn seen_so_far_accumulates() {
        let seq = TaskSequence::new(vec![task(&[3, 1]), task(&[0, 2])], 4, vec![2]).unwrap();
        assert_eq!(seq.classes_seen(1), vec![3, 1]);
        assert_eq!(seq.classes_seen(2), vec![3, 1, 0, 2]);
        assert_eq!(seq.test_seen(2).len(), 4);
        assert_eq!(seq.train_union(1).y, vec![3, 1]);
    }

    #[test]
    fn filter_and_select() {
        let s = set(&[0, 1, 2, 1]);
        let f = s.filter_classes(&[1]);
        assert_eq!(f.y, vec![1, 1]);
        assert_eq!(f.x.row(1).to_vec(), vec![6.0, 7.0]);
        assert!(LabeledSet::new(Array2::zeros((2, 1)), vec![0]).is_err());
    }
}
