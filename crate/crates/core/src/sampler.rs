//! Class-balanced (c x k) mini-batch sampling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Per-class sample lists built from a label vector.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    labels: Vec<usize>,
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(labels: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let (classes, members) = by_class.into_iter().unzip();
        Self {
            labels: labels.to_vec(),
            classes,
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub classes: usize,
    pub per_class: usize,
}

impl BatchSpec {
    pub fn new(classes: usize, per_class: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(
                "batch_classes",
                "need at least 2 classes per batch",
            ));
        }
        if per_class < 2 {
            return Err(Error::config(
                "batch_per_class",
                "need at least 2 samples per class",
            ));
        }
        if classes.checked_mul(per_class).is_none() {
            return Err(Error::config("batch_per_class", "batch size overflows"));
        }
        Ok(Self { classes, per_class })
    }

    pub fn batch_size(&self) -> usize {
        self.classes * self.per_class
    }
}

/// Sample indices grouped by class: `per_class` consecutive entries share a label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

fn check(index: &DatasetIndex, spec: BatchSpec) -> Result<()> {
    if index.num_classes() < spec.classes {
        return Err(Error::InsufficientClasses {
            needed: spec.classes,
            found: index.num_classes(),
        });
    }
    Ok(())
}

/// Draws `per_class` members of a class; without replacement when it has enough.
fn draw_members(members: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    if members.len() >= k {
        let mut pool = members.to_vec();
        // Partial Fisher-Yates: the first k slots end up a uniform k-subset.
        for i in 0..k {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    } else {
        (0..k).map(|_| members[rng.below(members.len())]).collect()
    }
}

fn assemble(index: &DatasetIndex, slots: &[usize], spec: BatchSpec, rng: &mut Rng) -> Batch {
    let mut indices = Vec::with_capacity(spec.batch_size());
    let mut labels = Vec::with_capacity(spec.batch_size());
    for &slot in slots {
        let chosen = draw_members(&index.members[slot], spec.per_class, rng);
        labels.extend(std::iter::repeat_n(index.classes[slot], chosen.len()));
        indices.extend(chosen);
    }
    Batch { indices, labels }
}

/// One batch of `classes` distinct classes with `per_class` samples each.
pub fn sample_batch(index: &DatasetIndex, spec: BatchSpec, rng: &mut Rng) -> Result<Batch> {
    check(index, spec)?;
    let mut slots: Vec<usize> = (0..index.num_classes()).collect();
    rng.shuffle(&mut slots);
    slots.truncate(spec.classes);
    Ok(assemble(index, &slots, spec, rng))
}

/// Iterator over one epoch of batches.
///
/// Classes are dealt from a shuffled permutation in cycles of
/// `ceil(C / c)` batches, so every class appears at least once per cycle.
/// The last batch of a cycle is topped up with distinct classes drawn from
/// the rest of the class list.
#[derive(Debug, Clone)]
pub struct EpochIter<'a> {
    index: &'a DatasetIndex,
    spec: BatchSpec,
    rng: Rng,
    remaining: usize,
    cycle: Vec<usize>,
}

impl EpochIter<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.remaining
    }

    fn next_slots(&mut self) -> Vec<usize> {
        if self.cycle.is_empty() {
            self.cycle = (0..self.index.num_classes()).collect();
            self.rng.shuffle(&mut self.cycle);
            self.cycle.reverse();
        }
        let take = self.spec.classes.min(self.cycle.len());
        let mut slots: Vec<usize> = (0..take).filter_map(|_| self.cycle.pop()).collect();
        if slots.len() < self.spec.classes {
            let mut rest: Vec<usize> = (0..self.index.num_classes())
                .filter(|s| !slots.contains(s))
                .collect();
            self.rng.shuffle(&mut rest);
            slots.extend(rest.into_iter().take(self.spec.classes - slots.len()));
        }
        slots
    }
}

impl Iterator for EpochIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let slots = self.next_slots();
        Some(assemble(self.index, &slots, self.spec, &mut self.rng))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for EpochIter<'_> {}

/// `ceil(N / (c k))` full batches covering the class list in shuffled round-robin.
pub fn epoch_iterator(index: &DatasetIndex, spec: BatchSpec, rng: Rng) -> Result<EpochIter<'_>> {
    check(index, spec)?;
    Ok(EpochIter {
        index,
        spec,
        rng,
        remaining: index.len().div_ceil(spec.batch_size()),
        cycle: Vec::new(),
    })
}
