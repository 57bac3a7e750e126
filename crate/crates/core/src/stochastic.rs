//! Differentiable sampling: Gaussian reparameterization, Gumbel-Softmax
//! categorical draws, and k-hot masks drawn without replacement.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{validate, Result};

/// Offset added to the score of an already selected position.
pub const MASKED_SCORE: f64 = -1e9;

/// Default Gumbel-Softmax temperature.
pub const DEFAULT_TAU_GUMBEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Stochastic,
    /// All noise is zero: Gaussian samples equal the mean and Gumbel draws
    /// reduce to a plain (tempered) softmax.
    Deterministic,
}

/// Source of the Gaussian and Gumbel noise used in a forward pass.
#[derive(Debug, Clone)]
pub struct Noise {
    mode: NoiseMode,
    rng: ChaCha8Rng,
}

impl Noise {
    pub fn new(mode: NoiseMode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn deterministic() -> Self {
        Self::new(NoiseMode::Deterministic, 0)
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn normal(&mut self, shape: (usize, usize)) -> Array2<f64> {
        match self.mode {
            NoiseMode::Deterministic => Array2::zeros(shape),
            NoiseMode::Stochastic => {
                Array2::from_shape_fn(shape, |_| self.rng.sample::<f64, _>(StandardNormal))
            }
        }
    }

    pub fn gumbel(&mut self, shape: (usize, usize)) -> Array2<f64> {
        match self.mode {
            NoiseMode::Deterministic => Array2::zeros(shape),
            NoiseMode::Stochastic => Array2::from_shape_fn(shape, |_| {
                let u: f64 = self.rng.random_range(f64::MIN_POSITIVE..1.0);
                -(-u.ln()).ln()
            }),
        }
    }
}

/// `mu + sqrt(sigma2) * noise`.
pub fn reparameterize_gaussian(mu: &[f64], sigma2: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    validate(mu.len() == sigma2.len() && mu.len() == noise.len(), || {
        "mu, sigma2 and noise must have equal length".into()
    })?;
    validate(sigma2.iter().all(|s| *s > 0.0), || {
        "variance must be strictly positive".into()
    })?;
    Ok(mu
        .iter()
        .zip(sigma2)
        .zip(noise)
        .map(|((m, s), e)| m + s.sqrt() * e)
        .collect())
}

/// Tape version parameterized by log-variance: `mu + exp(logvar / 2) * noise`.
pub fn reparameterize_tape(tape: &mut Tape, mu: Var, logvar: Var, noise: Array2<f64>) -> Var {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(noise);
    let se = tape.mul(std, e);
    tape.add(mu, se)
}

/// A k-hot mask per row.
#[derive(Debug, Clone, PartialEq)]
pub struct KHotMask {
    /// Hardened mask: exactly `k` ones per row.
    pub values: Array2<f64>,
    /// Soft relaxation `max_l softmax((s^l + g^l) / tau)`.
    pub soft: Array2<f64>,
    /// Selected positions per row, in draw order.
    pub selected: Vec<Vec<usize>>,
    pub k: usize,
    pub tau_gumbel: f64,
}

/// Number of kept dimensions for a mask ratio: `round(ratio * n)`, at least 1.
pub fn mask_size(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Output of [`gumbel_khot_tape`].
#[derive(Debug, Clone, Copy)]
pub struct KHotVars {
    /// Mask fed downstream (hard forward / soft backward when straight-through).
    pub mask: Var,
    /// Soft relaxation node.
    pub soft: Var,
}

/// k successive Gumbel-Softmax draws per row of `scores` (`B x N`, read as
/// log-scores); after each draw the winning position is pushed down by
/// [`MASKED_SCORE`]. The soft mask is the elementwise max of the draws.
pub fn gumbel_khot_tape(
    tape: &mut Tape,
    scores: Var,
    k: usize,
    tau_gumbel: f64,
    noise: &mut Noise,
    straight_through: bool,
) -> Result<(KHotVars, KHotMask)> {
    let (rows, n) = tape.shape(scores);
    validate(k >= 1 && k <= n, || format!("k = {k} must lie in [1, {n}]"))?;
    validate(tau_gumbel > 0.0, || "tau_gumbel must be positive".into())?;
    let mut offsets = Array2::<f64>::zeros((rows, n));
    let mut selected = vec![Vec::with_capacity(k); rows];
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let g = noise.gumbel((rows, n));
        let shift = tape.constant(&offsets + &g);
        let shifted = tape.add(scores, shift);
        let tempered = tape.scale(shifted, 1.0 / tau_gumbel);
        let m = tape.softmax_rows(tempered);
        let mv = tape.value(m);
        for (r, sel) in selected.iter_mut().enumerate() {
            let mut best = None::<(usize, f64)>;
            for j in 0..n {
                if sel.contains(&j) {
                    continue;
                }
                let v = mv[[r, j]];
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            let (p, _) = best.expect("k <= n leaves a free position");
            sel.push(p);
            offsets[[r, p]] += MASKED_SCORE;
        }
        draws.push(m);
    }
    let soft = tape.max_of(&draws);
    let mut hard = Array2::zeros((rows, n));
    for (r, sel) in selected.iter().enumerate() {
        for &p in sel {
            hard[[r, p]] = 1.0;
        }
    }
    let mask = if straight_through {
        tape.straight_through(hard.clone(), soft)
    } else {
        soft
    };
    let out = KHotMask {
        values: hard,
        soft: tape.value(soft).clone(),
        selected,
        k,
        tau_gumbel,
    };
    Ok((KHotVars { mask, soft }, out))
}

/// Single-vector k-hot sample.
pub fn gumbel_khot(scores: &[f64], k: usize, tau_gumbel: f64, noise: &mut Noise) -> Result<KHotMask> {
    validate(!scores.is_empty(), || "scores must be non-empty".into())?;
    let mut tape = Tape::detached();
    let s = tape.constant(Array2::from_shape_vec((1, scores.len()), scores.to_vec()).unwrap());
    let (_, mask) = gumbel_khot_tape(&mut tape, s, k, tau_gumbel, noise, true)?;
    Ok(mask)
}

/// Relaxed categorical sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSample {
    /// `softmax((logits + g) / tau)`.
    pub soft: Vec<f64>,
    /// One-hot at the argmax of `soft` (first index on ties).
    pub hard: Vec<f64>,
}

impl CategoricalSample {
    pub fn argmax(&self) -> usize {
        argmax(&self.soft)
    }

    /// The sample as returned to callers: the relaxed vector in stochastic
    /// mode, the one-hot in deterministic mode.
    pub fn value(&self, mode: NoiseMode) -> &[f64] {
        match mode {
            NoiseMode::Stochastic => &self.soft,
            NoiseMode::Deterministic => &self.hard,
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise Gumbel-Softmax on the tape. Returns the relaxed sample node and
/// the per-row one-hot of its argmax.
pub fn gumbel_categorical_tape(
    tape: &mut Tape,
    logits: Var,
    tau_gumbel: f64,
    noise: &mut Noise,
) -> Result<(Var, Array2<f64>)> {
    let (rows, n) = tape.shape(logits);
    validate(n > 0, || "logits must be non-empty".into())?;
    validate(tau_gumbel > 0.0, || "tau_gumbel must be positive".into())?;
    let g = noise.gumbel((rows, n));
    let gv = tape.constant(g);
    let shifted = tape.add(logits, gv);
    let tempered = tape.scale(shifted, 1.0 / tau_gumbel);
    let soft = tape.softmax_rows(tempered);
    let sv = tape.value(soft);
    let mut hard = Array2::zeros((rows, n));
    for (r, row) in sv.outer_iter().enumerate() {
        let row = row.to_vec();
        hard[[r, argmax(&row)]] = 1.0;
    }
    Ok((soft, hard))
}

pub fn gumbel_categorical(logits: &[f64], tau_gumbel: f64, noise: &mut Noise) -> Result<CategoricalSample> {
    validate(!logits.is_empty(), || "logits must be non-empty".into())?;
    let mut tape = Tape::detached();
    let l = tape.constant(Array2::from_shape_vec((1, logits.len()), logits.to_vec()).unwrap());
    let (soft, hard) = gumbel_categorical_tape(&mut tape, l, tau_gumbel, noise)?;
    Ok(CategoricalSample {
        soft: tape.value(soft).iter().copied().collect(),
        hard: hard.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        // stable sort keeps the lower index first on ties
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut top = idx[..k].to_vec();
        top.sort();
        top
    }

    #[test]
    fn reparameterize_identities() {
        let mu = [0.5, -1.0];
        assert_eq!(reparameterize_gaussian(&mu, &[2.0, 3.0], &[0.0, 0.0]).unwrap(), mu);
        let n = [0.3, -0.7];
        assert_eq!(reparameterize_gaussian(&[0.0, 0.0], &[1.0, 1.0], &n).unwrap(), n);
        assert!(reparameterize_gaussian(&mu, &[1.0, 0.0], &n).is_err());
    }

    #[test]
    fn reparameterize_gradient_wrt_mu_is_identity() {
        let eps = 1e-6;
        let f = |m: f64| reparameterize_gaussian(&[m], &[0.7], &[0.4]).unwrap()[0];
        let fd = (f(0.2 + eps) - f(0.2 - eps)) / (2.0 * eps);
        assert!((fd - 1.0).abs() < 1e-8);
        let mut tape = Tape::detached();
        let mu = tape.constant(Array2::from_elem((1, 3), 0.2));
        let lv = tape.constant(Array2::from_elem((1, 3), 0.7f64.ln()));
        let z = reparameterize_tape(&mut tape, mu, lv, Array2::from_elem((1, 3), 0.4));
        let s = tape.sum(z);
        let g = tape.backward(s);
        assert!(g.wrt(mu).unwrap().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn khot_full_selection() {
        let m = gumbel_khot(&[0.3, -2.0, 1.0], 3, 0.5, &mut Noise::new(NoiseMode::Stochastic, 1)).unwrap();
        assert!(m.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn khot_deterministic_top3() {
        let m = gumbel_khot(&[5.0, 1.0, 4.0, 0.0, 3.0, 2.0], 3, 0.5, &mut Noise::deterministic()).unwrap();
        let mut sel = m.selected[0].clone();
        sel.sort();
        assert_eq!(sel, vec![0, 2, 4]);
        assert_eq!(m.values.row(0).to_vec(), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mask_ratio_to_k() {
        assert_eq!(mask_size(0.6, 20), 12);
        assert_eq!(mask_size(0.6, 32), 19);
        assert_eq!(mask_size(0.01, 5), 1);
        assert_eq!(mask_size(1.0, 7), 7);
    }

    #[test]
    fn khot_rejects_bad_k() {
        assert!(gumbel_khot(&[1.0, 2.0], 0, 0.5, &mut Noise::deterministic()).is_err());
        assert!(gumbel_khot(&[1.0, 2.0], 3, 0.5, &mut Noise::deterministic()).is_err());
    }

    #[test]
    fn categorical_deterministic_cases() {
        let mut n = Noise::deterministic();
        let s = gumbel_categorical(&[0.0, 0.0, 0.0], 0.5, &mut n).unwrap();
        assert_eq!(s.value(NoiseMode::Deterministic), &[1.0, 0.0, 0.0]);
        let s = gumbel_categorical(&[10.0, 0.0, 0.0], 0.5, &mut n).unwrap();
        assert_eq!(s.value(NoiseMode::Deterministic), &[1.0, 0.0, 0.0]);
        assert!(gumbel_categorical(&[], 0.5, &mut n).is_err());
    }

    #[test]
    fn soft_mask_gradient_matches_finite_differences() {
        let scores = [0.3, -0.2, 1.1, 0.5, -0.9, 0.05];
        let k = 3;
        let weights = [0.7, -1.3, 0.4, 2.0, -0.5, 1.1];
        let eval = |s: &[f64]| -> f64 {
            let mut noise = Noise::new(NoiseMode::Stochastic, 42);
            let mut tape = Tape::detached();
            let v = tape.constant(Array2::from_shape_vec((1, 6), s.to_vec()).unwrap());
            let (vars, _) = gumbel_khot_tape(&mut tape, v, k, 0.5, &mut noise, false).unwrap();
            tape.value(vars.soft).iter().zip(weights).map(|(m, w)| m * w).sum()
        };
        let mut noise = Noise::new(NoiseMode::Stochastic, 42);
        let mut tape = Tape::detached();
        let v = tape.constant(Array2::from_shape_vec((1, 6), scores.to_vec()).unwrap());
        let (vars, _) = gumbel_khot_tape(&mut tape, v, k, 0.5, &mut noise, false).unwrap();
        let w = tape.constant(Array2::from_shape_vec((1, 6), weights.to_vec()).unwrap());
        let p = tape.mul(vars.soft, w);
        let y = tape.sum(p);
        let g = tape.backward(y);
        let analytic = g.wrt(v).unwrap();
        let eps = 1e-6;
        for j in 0..6 {
            let mut up = scores;
            up[j] += eps;
            let mut dn = scores;
            dn[j] -= eps;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * eps);
            let a = analytic[[0, j]];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "dim {j}: {a} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn khot_cardinality_and_distinctness(
            scores in prop::collection::vec(-5.0f64..5.0, 1..24),
            kfrac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let n = scores.len();
            let k = 1 + ((kfrac * n as f64) as usize).min(n - 1);
            let m = gumbel_khot(&scores, k, 0.5, &mut Noise::new(NoiseMode::Stochastic, seed)).unwrap();
            let ones = m.values.iter().filter(|v| **v == 1.0).count();
            prop_assert_eq!(ones, k);
            prop_assert!(m.values.iter().all(|v| *v == 0.0 || *v == 1.0));
            let mut sel = m.selected[0].clone();
            sel.sort();
            sel.dedup();
            prop_assert_eq!(sel.len(), k);
            let soft_sum: f64 = m.soft.iter().sum();
            prop_assert!(soft_sum <= k as f64 + 1e-9);
        }

        #[test]
        fn khot_deterministic_matches_top_k(
            scores in prop::collection::hash_set(-1000i32..1000, 1..20),
            kfrac in 0.0f64..1.0,
        ) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 100.0).collect();
            let n = scores.len();
            let k = 1 + ((kfrac * n as f64) as usize).min(n - 1);
            let m = gumbel_khot(&scores, k, 0.5, &mut Noise::deterministic()).unwrap();
            let mut sel = m.selected[0].clone();
            sel.sort();
            prop_assert_eq!(sel, top_k_oracle(&scores, k));
        }
    }
}
