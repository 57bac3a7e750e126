//! Evolving domain sequences: synthetic generators, drift variants, splits,
//! aligned mini-batching, and a plain-text file format.

mod batches;
mod generate;
mod io;
mod split;

pub use batches::{sequence_batches, AlignedBatch, EpochBatches, SequenceBatcher};
pub(crate) use generate::{circle_label, sine_label};
pub use generate::{
    apply_drift_variant, circle_center, circle_center_angle, generate_circle, generate_circle_with, generate_sine,
    generate_sine_with, sine_phase, CircleParams, DriftVariant, SineParams,
};
pub use io::{load_sequence, read_sequence, save_sequence, write_sequence};
pub use split::{split_domains, SplitSpec};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{validate, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub t: usize,
    pub samples: Vec<Sample>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Features as an `n x d` matrix.
    pub fn features(&self) -> Array2<f64> {
        let d = self.samples.first().map(|s| s.features.len()).unwrap_or(0);
        Array2::from_shape_fn((self.samples.len(), d), |(i, j)| self.samples[i].features[j])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Rows selected by `idx`, as features and labels.
    pub fn gather(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let d = self.samples.first().map(|s| s.features.len()).unwrap_or(0);
        let x = Array2::from_shape_fn((idx.len(), d), |(i, j)| self.samples[idx[i]].features[j]);
        let y = idx.iter().map(|&i| self.samples[i].label).collect();
        (x, y)
    }
}

/// Ordered, time-indexed domains sharing a feature dimension and label set.
///
/// Timestamps are consecutive. A freshly generated or loaded full sequence
/// starts at `t = 1`; blocks produced by [`split_domains`] keep their
/// original timestamps so recurrent inference can be resumed across them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSequence {
    pub name: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub domains: Vec<Domain>,
}

impl DomainSequence {
    pub fn new(
        name: impl Into<String>,
        feature_dim: usize,
        num_classes: usize,
        domains: Vec<Domain>,
    ) -> Result<Self> {
        let seq = Self {
            name: name.into(),
            feature_dim,
            num_classes,
            domains,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        validate(!self.domains.is_empty(), || "sequence has no domains".into())?;
        validate(self.feature_dim > 0, || "feature_dim must be positive".into())?;
        validate(self.num_classes > 0, || "num_classes must be positive".into())?;
        let first = self.domains[0].t;
        validate(first >= 1, || "timestamps start at 1 or later".into())?;
        for (k, dom) in self.domains.iter().enumerate() {
            validate(dom.t == first + k, || {
                format!(
                    "timestamps must be consecutive: expected {}, found {}",
                    first + k,
                    dom.t
                )
            })?;
            validate(!dom.samples.is_empty(), || format!("domain {} is empty", dom.t))?;
            for s in &dom.samples {
                validate(s.domain_index == dom.t, || {
                    format!("sample tagged {} inside domain {}", s.domain_index, dom.t)
                })?;
                validate(s.features.len() == self.feature_dim, || {
                    format!(
                        "domain {}: feature length {} != {}",
                        dom.t,
                        s.features.len(),
                        self.feature_dim
                    )
                })?;
                validate(s.label < self.num_classes, || {
                    format!("domain {}: label {} out of range", dom.t, s.label)
                })?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn first_t(&self) -> usize {
        self.domains.first().map(|d| d.t).unwrap_or(1)
    }

    pub fn last_t(&self) -> usize {
        self.domains.last().map(|d| d.t).unwrap_or(0)
    }

    pub fn min_domain_size(&self) -> usize {
        self.domains.iter().map(|d| d.len()).min().unwrap_or(0)
    }

    /// Concatenates two blocks whose timestamps are contiguous.
    pub fn concat(&self, next: &DomainSequence) -> Result<DomainSequence> {
        validate(
            self.feature_dim == next.feature_dim && self.num_classes == next.num_classes,
            || "cannot concatenate sequences with different dimensions".into(),
        )?;
        let mut domains = self.domains.clone();
        domains.extend(next.domains.iter().cloned());
        DomainSequence::new(self.name.clone(), self.feature_dim, self.num_classes, domains)
    }
}
