use std::collections::{HashSet, VecDeque};

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::filter::SampleId;

/// Fixed-length memory of recent test samples, evicted a whole arrival
/// batch at a time.
#[derive(Clone, Debug)]
pub struct SampleQueue {
    capacity: usize,
    batch_size: usize,
    batches: VecDeque<(Vec<SampleId>, DMatrix<f64>)>,
    arrivals: u64,
}

impl SampleQueue {
    pub fn new(capacity: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || capacity < batch_size || !capacity.is_multiple_of(batch_size) {
            return Err(Error::Config(format!(
                "queue capacity {capacity} must be a positive multiple of batch size {batch_size}"
            )));
        }
        Ok(Self {
            capacity,
            batch_size,
            batches: VecDeque::new(),
            arrivals: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of arrival batches kept.
    pub fn batch_slots(&self) -> usize {
        self.capacity / self.batch_size
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(|(ids, _)| ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Total batches ever pushed.
    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }

    /// Appends a batch and returns the ids that left the queue. Ids already
    /// queued (a revisit in multi-pass mode) are moved to the new batch
    /// rather than duplicated; they are not reported as evicted.
    pub fn push(&mut self, ids: Vec<SampleId>, inputs: DMatrix<f64>) -> Result<Vec<SampleId>> {
        check_dim("queued inputs", ids.len(), inputs.nrows())?;
        if ids.is_empty() {
            return Err(Error::Empty("queue batch"));
        }
        if ids.len() > self.batch_size {
            return Err(Error::Config(format!(
                "batch of {} exceeds batch size {}",
                ids.len(),
                self.batch_size
            )));
        }
        let incoming: HashSet<SampleId> = ids.iter().copied().collect();
        if incoming.len() != ids.len() {
            return Err(Error::Validation("duplicate sample id within one batch".into()));
        }
        for (old_ids, old_inputs) in self.batches.iter_mut() {
            if old_ids.iter().any(|id| incoming.contains(id)) {
                let keep: Vec<usize> = (0..old_ids.len())
                    .filter(|&i| !incoming.contains(&old_ids[i]))
                    .collect();
                *old_inputs = old_inputs.select_rows(&keep);
                *old_ids = keep.iter().map(|&i| old_ids[i]).collect();
            }
        }
        self.batches.retain(|(ids, _)| !ids.is_empty());

        self.batches.push_back((ids, inputs));
        self.arrivals += 1;
        let mut evicted = Vec::new();
        while self.batches.len() > self.batch_slots() {
            let (ids, _) = self.batches.pop_front().expect("non-empty");
            evicted.extend(ids);
        }
        Ok(evicted)
    }

    /// Queued ids, oldest first.
    pub fn ids(&self) -> Vec<SampleId> {
        self.batches.iter().flat_map(|(ids, _)| ids.iter().copied()).collect()
    }

    /// Queued inputs stacked oldest first, row-aligned with [`Self::ids`].
    pub fn inputs(&self) -> Option<DMatrix<f64>> {
        let first = self.batches.front()?;
        let cols = first.1.ncols();
        let n = self.len();
        let mut out = DMatrix::zeros(n, cols);
        let mut r = 0;
        for (_, m) in &self.batches {
            out.rows_mut(r, m.nrows()).copy_from(m);
            r += m.nrows();
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(ids: std::ops::Range<u64>) -> (Vec<u64>, DMatrix<f64>) {
        let v: Vec<u64> = ids.collect();
        let m = DMatrix::from_fn(v.len(), 1, |r, _| v[r] as f64);
        (v, m)
    }

    #[test]
    fn evicts_oldest_batch() {
        let mut q = SampleQueue::new(4, 2).unwrap();
        let (i, m) = batch(0..2);
        assert!(q.push(i, m).unwrap().is_empty());
        let (i, m) = batch(2..4);
        assert!(q.push(i, m).unwrap().is_empty());
        let (i, m) = batch(4..6);
        assert_eq!(q.push(i, m).unwrap(), vec![0, 1]);
        assert_eq!(q.ids(), vec![2, 3, 4, 5]);
        assert_eq!(q.inputs().unwrap().as_slice(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn revisits_move_instead_of_duplicating() {
        let mut q = SampleQueue::new(6, 2).unwrap();
        for r in [0..2, 2..4, 0..2] {
            let (i, m) = batch(r);
            assert!(q.push(i, m).unwrap().is_empty());
        }
        assert_eq!(q.ids(), vec![2, 3, 0, 1]);
        assert_eq!(q.len(), 4);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SampleQueue::new(5, 2).is_err());
        let mut q = SampleQueue::new(4, 2).unwrap();
        let (i, m) = batch(0..3);
        assert!(q.push(i, m).is_err());
        assert!(q.push(vec![1, 1], DMatrix::zeros(2, 1)).is_err());
    }
}
