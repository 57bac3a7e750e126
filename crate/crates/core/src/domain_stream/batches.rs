use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DomainSequence;
use crate::error::{validate, Result};

/// One mini-batch per source domain, row-aligned across domains.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    pub features: Vec<Array2<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub domain_indices: Vec<usize>,
}

impl AlignedBatch {
    pub fn num_domains(&self) -> usize {
        self.features.len()
    }

    pub fn batch_size(&self) -> usize {
        self.labels.first().map(|l| l.len()).unwrap_or(0)
    }

    /// All domains stacked into one pooled batch.
    pub fn pooled(&self) -> (Array2<f64>, Vec<usize>) {
        let views: Vec<_> = self.features.iter().map(|x| x.view()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        let y = self.labels.iter().flatten().copied().collect();
        (x, y)
    }
}

/// Yields aligned batches epoch by epoch with deterministic shuffling.
#[derive(Debug, Clone)]
pub struct SequenceBatcher<'a> {
    source: &'a DomainSequence,
    batch_size: usize,
    with_replacement: bool,
    rng: ChaCha8Rng,
}

/// Builds a batcher drawing without replacement.
pub fn sequence_batches(source: &DomainSequence, batch_size: usize, seed: u64) -> Result<SequenceBatcher<'_>> {
    SequenceBatcher::new(source, batch_size, seed, false)
}

impl<'a> SequenceBatcher<'a> {
    pub fn new(
        source: &'a DomainSequence,
        batch_size: usize,
        seed: u64,
        with_replacement: bool,
    ) -> Result<Self> {
        validate(batch_size > 0, || "batch_size must be positive".into())?;
        if !with_replacement {
            for d in &source.domains {
                validate(d.len() >= batch_size, || {
                    format!(
                        "domain {} has {} samples, fewer than batch size {batch_size}",
                        d.t,
                        d.len()
                    )
                })?;
            }
        }
        Ok(Self {
            source,
            batch_size,
            with_replacement,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `ceil(min domain size / batch size)`, so every domain is covered at
    /// least once per epoch.
    pub fn iterations_per_epoch(&self) -> usize {
        self.source.min_domain_size().div_ceil(self.batch_size).max(1)
    }

    /// Batches for the next epoch.
    pub fn epoch(&mut self) -> EpochBatches<'_, 'a> {
        let perms = self
            .source
            .domains
            .iter()
            .map(|d| {
                let mut p: Vec<usize> = (0..d.len()).collect();
                p.shuffle(&mut self.rng);
                p
            })
            .collect();
        EpochBatches {
            iterations: self.iterations_per_epoch(),
            batcher: self,
            perms,
            next: 0,
        }
    }
}

pub struct EpochBatches<'b, 'a> {
    batcher: &'b mut SequenceBatcher<'a>,
    perms: Vec<Vec<usize>>,
    iterations: usize,
    next: usize,
}

impl Iterator for EpochBatches<'_, '_> {
    type Item = AlignedBatch;

    fn next(&mut self) -> Option<AlignedBatch> {
        if self.next >= self.iterations {
            return None;
        }
        let b = self.batcher.batch_size;
        let it = self.next;
        self.next += 1;
        let mut features = Vec::with_capacity(self.perms.len());
        let mut labels = Vec::with_capacity(self.perms.len());
        let mut domain_indices = Vec::with_capacity(self.perms.len());
        for (dom, perm) in self.batcher.source.domains.iter().zip(&self.perms) {
            let idx: Vec<usize> = if self.batcher.with_replacement {
                (0..b)
                    .map(|_| self.batcher.rng.random_range(0..dom.len()))
                    .collect()
            } else {
                // wrap around the permutation so every batch is full
                (0..b).map(|k| perm[(it * b + k) % perm.len()]).collect()
            };
            let (x, y) = dom.gather(&idx);
            features.push(x);
            labels.push(y);
            domain_indices.push(dom.t);
        }
        Some(AlignedBatch {
            features,
            labels,
            domain_indices,
        })
    }
}
