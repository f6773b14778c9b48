//! Named parameter storage shared by model construction, the optimizer, and
//! checkpointing. Entries keep their insertion order, which fixes the
//! checkpoint layout and the optimizer state alignment.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of one entry in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<S: Scalar> {
    name: String,
    tensor: Tensor<S>,
    /// Non-trainable entries (batch-norm running statistics) are carried in
    /// checkpoints but skipped by the optimizer and the parameter count.
    trainable: bool,
}

#[derive(Clone)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.into(), tensor, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Number of scalar values in trainable entries.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Exponential-moving-average update for a running-statistics entry:
    /// `running = (1 - momentum) * running + momentum * batch_stat`.
    pub fn update_running(&mut self, id: ParamId, batch_stat: &[S], momentum: S) {
        let t = &mut self.entries[id.0].tensor;
        assert_eq!(t.numel(), batch_stat.len(), "running stat size mismatch for {}", self.entries[id.0].name);
        let keep = S::one() - momentum;
        for (r, &b) in t.data_mut().iter_mut().zip(batch_stat) {
            *r = keep * *r + momentum * b;
        }
    }

    /// Convert every tensor to another precision, preserving names, order and
    /// trainability. Used to run the same architecture under f64 for
    /// finite-difference checks.
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_counting() {
        let mut p = ParamSet::<f64>::new();
        let a = p.add("w", Tensor::zeros(vec![2, 3]), true);
        let b = p.add("running_mean", Tensor::zeros(vec![3]), false);
        let c = p.add("b", Tensor::zeros(vec![3]), true);
        assert_eq!(p.name(a), "w");
        assert_eq!(p.name(b), "running_mean");
        assert_eq!(p.count_trainable(), 2 * 3 + 3);
        assert_eq!(p.trainable_ids(), vec![a, c]);
    }

    #[test]
    fn running_update_matches_formula() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("rv", Tensor::filled(vec![2], 1.0), false);
        p.update_running(id, &[3.0, 5.0], 0.1);
        assert!((p.get(id).data()[0] - (0.9 + 0.3)).abs() < 1e-12);
        assert!((p.get(id).data()[1] - (0.9 + 0.5)).abs() < 1e-12);
    }
}
