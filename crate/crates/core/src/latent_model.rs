//! Network components: static / dynamic / drift encoders, the two learned
//! priors, decoder, causal maskers and the linear classifier.
//!
//! Each component has a tape-level method used by training and a value-level
//! method that runs it once without gradients.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{validate, Error, Result};
use crate::nn::{Linear, LstmCell, Mlp, ParamStore};
use crate::stochastic::{self, gumbel_khot_tape, mask_size, KHotMask, Noise};

/// Bounds applied to every predicted log-variance.
pub const LOGVAR_BOUND: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub drift_states: usize,
    pub hidden_width: usize,
    pub recurrent_width: usize,
    pub mask_ratio: f64,
    pub tau_gumbel: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        validate(
            self.feature_dim > 0
                && self.num_classes > 1
                && self.latent_dim > 0
                && self.drift_states > 0
                && self.hidden_width > 0
                && self.recurrent_width > 0,
            || format!("model dimensions must be positive: {self:?}"),
        )?;
        validate(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0, || {
            format!("mask ratio {} outside (0, 1]", self.mask_ratio)
        })?;
        validate(self.tau_gumbel > 0.0, || "tau_gumbel must be positive".into())
    }

    /// Number of latent dimensions each masker keeps.
    pub fn mask_k(&self) -> usize {
        mask_size(self.mask_ratio, self.latent_dim)
    }

    pub fn classifier_in(&self) -> usize {
        2 * self.latent_dim + self.drift_states
    }
}

/// Diagonal Gaussian, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Array2<f64>,
    pub sigma2: Array2<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Array2<f64>, sigma2: Array2<f64>) -> Result<Self> {
        validate(mu.dim() == sigma2.dim(), || "mu / sigma2 shape mismatch".into())?;
        validate(sigma2.iter().all(|v| *v > 0.0), || {
            "variances must be strictly positive".into()
        })?;
        Ok(Self { mu, sigma2 })
    }

    pub fn from_logvar(mu: Array2<f64>, logvar: &Array2<f64>) -> Self {
        Self {
            mu,
            sigma2: logvar.mapv(f64::exp),
        }
    }

    pub fn standard(rows: usize, dim: usize) -> Self {
        Self {
            mu: Array2::zeros((rows, dim)),
            sigma2: Array2::ones((rows, dim)),
        }
    }

    pub fn logvar(&self) -> Array2<f64> {
        self.sigma2.mapv(f64::ln)
    }

    pub fn batch(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

/// Categorical distribution over drift states, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPosterior {
    pub probs: Array2<f64>,
}

impl CategoricalPosterior {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for row in probs.outer_iter() {
            let s: f64 = row.sum();
            validate(row.iter().all(|p| *p >= 0.0) && (s - 1.0).abs() < 1e-6, || {
                format!("row {row} is not a probability vector")
            })?;
        }
        Ok(Self { probs })
    }
}

/// Hidden and cell state of a recurrent component after consuming
/// `domain_index` domains (0 = initial zero state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
    pub domain_index: usize,
}

impl RecurrentState {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            h: Array2::zeros((rows, width)),
            c: Array2::zeros((rows, width)),
            domain_index: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Single-row state `r`.
    pub fn row(&self, r: usize) -> RecurrentState {
        RecurrentState {
            h: self.h.row(r).to_owned().insert_axis(ndarray::Axis(0)),
            c: self.c.row(r).to_owned().insert_axis(ndarray::Axis(0)),
            domain_index: self.domain_index,
        }
    }

    fn expect_next(&self, t: usize) -> Result<()> {
        if self.domain_index + 1 != t {
            return Err(Error::Sequencing {
                expected: t.saturating_sub(1),
                found: self.domain_index,
            });
        }
        Ok(())
    }
}

/// Tape handles for a Gaussian parameterized by mean and log-variance.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianVars {
    pub fn value(&self, tape: &Tape) -> GaussianPosterior {
        GaussianPosterior::from_logvar(tape.value(self.mu).clone(), tape.value(self.logvar))
    }
}

/// Tape handles for a recurrent state.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

impl StateVars {
    pub fn from_value(tape: &mut Tape, s: &RecurrentState) -> Self {
        Self {
            h: tape.constant(s.h.clone()),
            c: tape.constant(s.c.clone()),
        }
    }

    pub fn value(&self, tape: &Tape, domain_index: usize) -> RecurrentState {
        RecurrentState {
            h: tape.value(self.h).clone(),
            c: tape.value(self.c).clone(),
            domain_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Static,
    Dynamic,
}

/// Gaussian head on top of a shared trunk: outputs `[mu | logvar]`.
#[derive(Debug, Clone)]
struct GaussianHead {
    linear: Linear,
    dim: usize,
}

impl GaussianHead {
    fn forward(&self, tape: &mut Tape, h: Var) -> GaussianVars {
        let out = self.linear.forward(tape, h);
        let mu = tape.slice_cols(out, 0, self.dim);
        let raw = tape.slice_cols(out, self.dim, self.dim);
        let logvar = tape.clamp(raw, -LOGVAR_BOUND, LOGVAR_BOUND);
        GaussianVars { mu, logvar }
    }
}

/// All learned components plus their parameters.
#[derive(Debug, Clone)]
pub struct SyncModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    static_extractor: Mlp,
    static_head: GaussianHead,
    dynamic_extractor: Mlp,
    dynamic_cell: LstmCell,
    dynamic_head: GaussianHead,
    dynamic_prior_cell: LstmCell,
    dynamic_prior_head: GaussianHead,
    drift_cell: LstmCell,
    drift_head: Linear,
    drift_prior_cell: LstmCell,
    drift_prior_head: Linear,
    decoder: Mlp,
    static_masker: Mlp,
    dynamic_masker: Mlp,
    classifier: Linear,
}

impl SyncModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, c, n, k, h, r) = (
            dims.feature_dim,
            dims.num_classes,
            dims.latent_dim,
            dims.drift_states,
            dims.hidden_width,
            dims.recurrent_width,
        );
        let rng = &mut rng;
        let s = &mut store;
        let static_extractor = Mlp::new(s, "static.extractor", &[d, h, h], rng);
        let static_head = GaussianHead {
            linear: Linear::new(s, "static.head", h, 2 * n, rng),
            dim: n,
        };
        let dynamic_extractor = Mlp::new(s, "dynamic.extractor", &[d, h, h], rng);
        let dynamic_cell = LstmCell::new(s, "dynamic.cell", h, r, rng);
        let dynamic_head = GaussianHead {
            linear: Linear::new(s, "dynamic.head", r, 2 * n, rng),
            dim: n,
        };
        let dynamic_prior_cell = LstmCell::new(s, "dynamic_prior.cell", n, r, rng);
        let dynamic_prior_head = GaussianHead {
            linear: Linear::new(s, "dynamic_prior.head", r, 2 * n, rng),
            dim: n,
        };
        let drift_cell = LstmCell::new(s, "drift.cell", c, r, rng);
        let drift_head = Linear::new(s, "drift.head", r, k, rng);
        let drift_prior_cell = LstmCell::new(s, "drift_prior.cell", k, r, rng);
        let drift_prior_head = Linear::new(s, "drift_prior.head", r, k, rng);
        let decoder = Mlp::new(s, "decoder", &[2 * n, h, h, d], rng);
        let static_masker = Mlp::new(s, "static.masker", &[n, h, h, n], rng);
        let dynamic_masker = Mlp::new(s, "dynamic.masker", &[n, h, h, n], rng);
        let classifier = Linear::new(s, "classifier", dims.classifier_in(), c, rng);
        Ok(Self {
            dims,
            store,
            static_extractor,
            static_head,
            dynamic_extractor,
            dynamic_cell,
            dynamic_head,
            dynamic_prior_cell,
            dynamic_prior_head,
            drift_cell,
            drift_head,
            drift_prior_cell,
            drift_prior_head,
            decoder,
            static_masker,
            dynamic_masker,
            classifier,
        })
    }

    fn check_features(&self, x: &Array2<f64>) -> Result<()> {
        validate(x.ncols() == self.dims.feature_dim, || {
            format!(
                "feature dimension {} does not match model ({})",
                x.ncols(),
                self.dims.feature_dim
            )
        })
    }

    // ---- tape-level components ----

    pub fn static_features_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let f = self.static_extractor.forward(tape, x);
        tape.relu(f)
    }

    pub fn encode_static_tape(&self, tape: &mut Tape, x: Var) -> GaussianVars {
        let f = self.static_features_tape(tape, x);
        self.static_head.forward(tape, f)
    }

    pub fn encode_dynamic_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        state: StateVars,
    ) -> (GaussianVars, StateVars) {
        let f = self.dynamic_extractor.forward(tape, x);
        let f = tape.relu(f);
        let (h, c) = self.dynamic_cell.step(tape, f, state.h, state.c);
        (self.dynamic_head.forward(tape, h), StateVars { h, c })
    }

    /// Returns drift logits.
    pub fn encode_drift_tape(
        &self,
        tape: &mut Tape,
        y_onehot: Var,
        state: StateVars,
    ) -> (Var, StateVars) {
        let (h, c) = self.drift_cell.step(tape, y_onehot, state.h, state.c);
        (self.drift_head.forward(tape, h), StateVars { h, c })
    }

    pub fn prior_dynamic_tape(
        &self,
        tape: &mut Tape,
        z_prev: Var,
        state: StateVars,
    ) -> (GaussianVars, StateVars) {
        let (h, c) = self.dynamic_prior_cell.step(tape, z_prev, state.h, state.c);
        (self.dynamic_prior_head.forward(tape, h), StateVars { h, c })
    }

    /// Returns drift prior logits.
    pub fn prior_drift_tape(&self, tape: &mut Tape, z_prev: Var, state: StateVars) -> (Var, StateVars) {
        let (h, c) = self.drift_prior_cell.step(tape, z_prev, state.h, state.c);
        (self.drift_prior_head.forward(tape, h), StateVars { h, c })
    }

    pub fn decode_tape(&self, tape: &mut Tape, z_st: Var, z_dy: Var) -> Var {
        let z = tape.concat_cols(&[z_st, z_dy]);
        self.decoder.forward(tape, z)
    }

    /// Masks `features` (posterior means of the branch) with a k-hot sample
    /// from the branch's score network.
    pub fn mask_causal_tape(
        &self,
        tape: &mut Tape,
        features: Var,
        which: Branch,
        noise: &mut Noise,
        straight_through: bool,
    ) -> Result<(Var, KHotMask)> {
        let masker = match which {
            Branch::Static => &self.static_masker,
            Branch::Dynamic => &self.dynamic_masker,
        };
        let scores = masker.forward(tape, features);
        let (vars, mask) = gumbel_khot_tape(
            tape,
            scores,
            self.dims.mask_k(),
            self.dims.tau_gumbel,
            noise,
            straight_through,
        )?;
        Ok((tape.mul(features, vars.mask), mask))
    }

    pub fn classify_tape(&self, tape: &mut Tape, phi_st: Var, phi_dy: Var, z_d: Var) -> Var {
        let input = tape.concat_cols(&[phi_st, phi_dy, z_d]);
        self.classifier.forward(tape, input)
    }

    // ---- value-level operations ----

    pub fn encode_static(&self, x: &Array2<f64>) -> Result<GaussianPosterior> {
        self.check_features(x)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.constant(x.clone());
        Ok(self.encode_static_tape(&mut tape, xv).value(&tape))
    }

    /// Posterior for domain `t`; `state` must have consumed domain `t - 1`.
    pub fn encode_dynamic(
        &self,
        x: &Array2<f64>,
        t: usize,
        state: &RecurrentState,
    ) -> Result<(GaussianPosterior, RecurrentState)> {
        self.check_features(x)?;
        state.expect_next(t)?;
        validate(state.rows() == x.nrows(), || "state rows must match batch".into())?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.constant(x.clone());
        let sv = StateVars::from_value(&mut tape, state);
        let (post, next) = self.encode_dynamic_tape(&mut tape, xv, sv);
        Ok((post.value(&tape), next.value(&tape, t)))
    }

    pub fn encode_drift(
        &self,
        labels: &[usize],
        t: usize,
        state: &RecurrentState,
    ) -> Result<(CategoricalPosterior, RecurrentState)> {
        state.expect_next(t)?;
        validate(state.rows() == labels.len(), || "state rows must match batch".into())?;
        let y = one_hot(labels, self.dims.num_classes)?;
        let mut tape = Tape::new(&self.store);
        let yv = tape.constant(y);
        let sv = StateVars::from_value(&mut tape, state);
        let (logits, next) = self.encode_drift_tape(&mut tape, yv, sv);
        let probs = tape.softmax_rows(logits);
        Ok((
            CategoricalPosterior {
                probs: tape.value(probs).clone(),
            },
            next.value(&tape, t),
        ))
    }

    /// Prior for `z_t^dy` given the previous sample `z_prev` (zeros at t = 1).
    pub fn prior_dynamic(
        &self,
        z_prev: &Array2<f64>,
        t: usize,
        state: &RecurrentState,
    ) -> Result<(GaussianPosterior, RecurrentState)> {
        state.expect_next(t)?;
        validate(z_prev.ncols() == self.dims.latent_dim, || "latent width mismatch".into())?;
        let mut tape = Tape::new(&self.store);
        let zv = tape.constant(z_prev.clone());
        let sv = StateVars::from_value(&mut tape, state);
        let (prior, next) = self.prior_dynamic_tape(&mut tape, zv, sv);
        Ok((prior.value(&tape), next.value(&tape, t)))
    }

    pub fn prior_drift(
        &self,
        z_prev: &Array2<f64>,
        t: usize,
        state: &RecurrentState,
    ) -> Result<(CategoricalPosterior, RecurrentState)> {
        state.expect_next(t)?;
        validate(z_prev.ncols() == self.dims.drift_states, || "drift width mismatch".into())?;
        let mut tape = Tape::new(&self.store);
        let zv = tape.constant(z_prev.clone());
        let sv = StateVars::from_value(&mut tape, state);
        let (logits, next) = self.prior_drift_tape(&mut tape, zv, sv);
        let probs = tape.softmax_rows(logits);
        Ok((
            CategoricalPosterior {
                probs: tape.value(probs).clone(),
            },
            next.value(&tape, t),
        ))
    }

    pub fn decode(&self, z_st: &Array2<f64>, z_dy: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.dims.latent_dim;
        validate(z_st.ncols() == n && z_dy.ncols() == n, || {
            format!("latents must have width {n}")
        })?;
        validate(z_st.nrows() == z_dy.nrows(), || "latent batch mismatch".into())?;
        let mut tape = Tape::new(&self.store);
        let a = tape.constant(z_st.clone());
        let b = tape.constant(z_dy.clone());
        let out = self.decode_tape(&mut tape, a, b);
        Ok(tape.value(out).clone())
    }

    pub fn mask_causal(
        &self,
        features: &Array2<f64>,
        which: Branch,
        noise: &mut Noise,
    ) -> Result<(Array2<f64>, KHotMask)> {
        validate(features.ncols() == self.dims.latent_dim, || "latent width mismatch".into())?;
        let mut tape = Tape::new(&self.store);
        let f = tape.constant(features.clone());
        let (masked, mask) = self.mask_causal_tape(&mut tape, f, which, noise, true)?;
        Ok((tape.value(masked).clone(), mask))
    }

    pub fn classify(
        &self,
        phi_st: &Array2<f64>,
        phi_dy: &Array2<f64>,
        z_d: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let n = self.dims.latent_dim;
        validate(
            phi_st.ncols() == n && phi_dy.ncols() == n && z_d.ncols() == self.dims.drift_states,
            || "classifier input widths must be (N, N, K_d)".into(),
        )?;
        let mut tape = Tape::new(&self.store);
        let a = tape.constant(phi_st.clone());
        let b = tape.constant(phi_dy.clone());
        let c = tape.constant(z_d.clone());
        let out = self.classify_tape(&mut tape, a, b, c);
        Ok(tape.value(out).clone())
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        validate(y < classes, || format!("label {y} out of range for {classes} classes"))?;
        out[[i, y]] = 1.0;
    }
    Ok(out)
}

/// Convenience re-export for callers that only need plain sampling.
pub use stochastic::NoiseMode;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 2,
            num_classes: 2,
            latent_dim: 20,
            drift_states: 2,
            hidden_width: 16,
            recurrent_width: 12,
            mask_ratio: 0.6,
            tau_gumbel: 0.5,
        }
    }

    fn batch(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(i, j)| (i as f64 * 0.37 + j as f64 * 1.3).sin())
    }

    #[test]
    fn static_encoder_shapes_and_purity() {
        let m = SyncModel::new(dims(), 0).unwrap();
        let x = batch(5);
        let p = m.encode_static(&x).unwrap();
        assert_eq!(p.mu.dim(), (5, 20));
        assert!(p.sigma2.iter().all(|v| *v > 0.0));
        assert_eq!(p, m.encode_static(&x).unwrap());
        assert!(m.encode_static(&Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn static_encoder_ignores_domain_order() {
        let m = SyncModel::new(dims(), 0).unwrap();
        let x = batch(6);
        let p = m.encode_static(&x).unwrap();
        let rev = Array2::from_shape_fn((6, 2), |(i, j)| x[[5 - i, j]]);
        let q = m.encode_static(&rev).unwrap();
        for i in 0..6 {
            assert_eq!(p.mu.row(i), q.mu.row(5 - i));
        }
    }

    #[test]
    fn dynamic_encoder_sequence_and_state_dependence() {
        let m = SyncModel::new(dims(), 1).unwrap();
        let x = batch(4);
        let mut state = RecurrentState::zeros(4, 12);
        let mut posts = vec![];
        for t in 1..=3 {
            let (p, s) = m.encode_dynamic(&x, t, &state).unwrap();
            posts.push(p);
            state = s;
        }
        assert_eq!(posts.len(), 3);
        // same input, different history
        assert_ne!(posts[0].mu, posts[1].mu);
        // stale state rejected
        assert!(matches!(
            m.encode_dynamic(&x, 2, &RecurrentState::zeros(4, 12)),
            Err(Error::Sequencing { .. })
        ));
        // perturbing the carried state changes the output
        let base = RecurrentState::zeros(4, 12);
        let (a, _) = m.encode_dynamic(&x, 1, &base).unwrap();
        let mut bumped = base.clone();
        bumped.h += 0.5;
        let (b, _) = m.encode_dynamic(&x, 1, &bumped).unwrap();
        assert_ne!(a.mu, b.mu);
    }

    #[test]
    fn drift_encoder_and_priors() {
        let m = SyncModel::new(dims(), 2).unwrap();
        let (q, s) = m.encode_drift(&[0, 1, 1], 1, &RecurrentState::zeros(3, 12)).unwrap();
        assert_eq!(q.probs.dim(), (3, 2));
        for row in q.probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.domain_index, 1);

        let zero = RecurrentState::zeros(1, 12);
        let (p1, s1) = m.prior_dynamic(&Array2::zeros((1, 20)), 1, &zero).unwrap();
        assert_eq!(p1.mu.dim(), (1, 20));
        let (p2, _) = m.prior_dynamic(&Array2::ones((1, 20)), 2, &s1).unwrap();
        assert_ne!(p1.mu, p2.mu);
        let (d1, ds1) = m.prior_drift(&Array2::zeros((1, 2)), 1, &zero).unwrap();
        assert_eq!(d1.probs.dim(), (1, 2));
        assert_ne!(ds1.h, zero.h);
    }

    #[test]
    fn decoder_uses_both_halves() {
        let m = SyncModel::new(dims(), 3).unwrap();
        let z0 = Array2::zeros((1, 20));
        let base = m.decode(&z0, &z0).unwrap();
        assert_eq!(base.dim(), (1, 2));
        let mut e = Array2::zeros((1, 20));
        e[[0, 0]] = 1.0;
        assert_ne!(m.decode(&e, &z0).unwrap(), base);
        assert_ne!(m.decode(&z0, &e).unwrap(), base);
    }

    #[test]
    fn mask_keeps_k_dimensions() {
        let mut d = dims();
        d.latent_dim = 32;
        let m = SyncModel::new(d, 4).unwrap();
        let f = Array2::from_elem((3, 32), 1.0);
        let (masked, mask) = m.mask_causal(&f, Branch::Static, &mut Noise::deterministic()).unwrap();
        for row in masked.outer_iter() {
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 19);
        }
        assert_eq!(mask.k, 19);

        d.mask_ratio = 1.0;
        let m = SyncModel::new(d, 4).unwrap();
        let f = Array2::from_shape_fn((2, 32), |(i, j)| (i * 32 + j) as f64 + 0.5);
        let (masked, _) = m.mask_causal(&f, Branch::Dynamic, &mut Noise::deterministic()).unwrap();
        assert_eq!(masked, f);
    }

    #[test]
    fn masked_out_dims_do_not_reach_logits() {
        let m = SyncModel::new(dims(), 5).unwrap();
        let f = Array2::from_shape_fn((1, 20), |(_, j)| 0.1 * j as f64 + 0.3);
        let (masked, mask) = m.mask_causal(&f, Branch::Static, &mut Noise::deterministic()).unwrap();
        let zd = array![[1.0, 0.0]];
        let dy = Array2::zeros((1, 20));
        let logits = m.classify(&masked, &dy, &zd).unwrap();
        let mut perturbed_input = f.clone();
        for j in 0..20 {
            if mask.values[[0, j]] == 0.0 {
                perturbed_input[[0, j]] += 10.0;
            }
        }
        // the score network sees the perturbation, so reuse the original mask
        let perturbed = &perturbed_input * &mask.values;
        assert_eq!(m.classify(&perturbed, &dy, &zd).unwrap(), logits);
    }

    #[test]
    fn classifier_is_affine() {
        let m = SyncModel::new(dims(), 6).unwrap();
        let zeros = (Array2::zeros((1, 20)), Array2::zeros((1, 20)), Array2::zeros((1, 2)));
        let bias = m.classify(&zeros.0, &zeros.1, &zeros.2).unwrap();
        let b = m.store.value(m.classifier.bias).clone();
        assert_eq!(bias, b);
        let a = (
            Array2::from_elem((1, 20), 0.25),
            Array2::from_elem((1, 20), -0.5),
            array![[0.75, 0.25]],
        );
        let c = (
            Array2::from_elem((1, 20), 0.5),
            Array2::from_elem((1, 20), 1.0),
            array![[0.25, 0.75]],
        );
        let fa = m.classify(&a.0, &a.1, &a.2).unwrap();
        let fc = m.classify(&c.0, &c.1, &c.2).unwrap();
        let fac = m.classify(&(&a.0 + &c.0), &(&a.1 + &c.1), &(&a.2 + &c.2)).unwrap();
        let lhs = &fa + &fc - &bias;
        for (x, y) in lhs.iter().zip(fac.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(m.classify(&zeros.0, &zeros.1, &Array2::zeros((1, 3))).is_err());
    }
}
