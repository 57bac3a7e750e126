use serde::{Deserialize, Serialize};

use super::DomainSequence;
use crate::error::{validate, Result};

/// Fractions of the sequence assigned to the source, intermediate
/// (validation) and target blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub source_fraction: f64,
    pub intermediate_fraction: f64,
    pub target_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            source_fraction: 1.0 / 2.0,
            intermediate_fraction: 1.0 / 6.0,
            target_fraction: 1.0 / 3.0,
        }
    }
}

impl SplitSpec {
    /// Block sizes for `total` domains: source and intermediate are rounded
    /// half-up, the target block takes the remainder.
    pub fn counts(&self, total: usize) -> Result<(usize, usize, usize)> {
        let sum = self.source_fraction + self.intermediate_fraction + self.target_fraction;
        validate((sum - 1.0).abs() < 1e-9, || {
            format!("split fractions must sum to 1, got {sum}")
        })?;
        validate(
            [self.source_fraction, self.intermediate_fraction, self.target_fraction]
                .iter()
                .all(|f| *f >= 0.0),
            || "split fractions must be non-negative".into(),
        )?;
        // small epsilon so that exact halves such as 5/6*6 round as intended
        let round = |f: f64| (f * total as f64 + 0.5 + 1e-9).floor() as usize;
        let source = round(self.source_fraction);
        let intermediate = round(self.intermediate_fraction);
        validate(source + intermediate < total, || {
            format!("split of {total} domains leaves no target block")
        })?;
        let target = total - source - intermediate;
        validate(source > 0 && intermediate > 0, || {
            format!("split of {total} domains yields an empty block ({source}/{intermediate}/{target})")
        })?;
        Ok((source, intermediate, target))
    }
}

/// Contiguous, order-preserving partition into source / intermediate / target.
pub fn split_domains(
    seq: &DomainSequence,
    spec: &SplitSpec,
) -> Result<(DomainSequence, DomainSequence, DomainSequence)> {
    let (ns, ni, _) = spec.counts(seq.len())?;
    let block = |range: std::ops::Range<usize>| {
        DomainSequence::new(
            seq.name.clone(),
            seq.feature_dim,
            seq.num_classes,
            seq.domains[range].to_vec(),
        )
    };
    Ok((
        block(0..ns)?,
        block(ns..ns + ni)?,
        block(ns + ni..seq.len())?,
    ))
}
