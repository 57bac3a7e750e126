//! Loss terms: the evolving-pattern ELBO, the MWS mutual-information penalty
//! and the two contrastive causal losses.
//!
//! Training builds every term on a [`Tape`] from one [`SequenceForward`].
//! The value-level functions evaluate single terms without gradients.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Tape, Var};
use crate::domain_stream::AlignedBatch;
use crate::error::{validate, Error, Result};
use crate::latent_model::{
    one_hot, Branch, CategoricalPosterior, GaussianPosterior, GaussianVars, StateVars, SyncModel,
};
use crate::latent_model::RecurrentState;
use crate::stochastic::{gumbel_categorical_tape, reparameterize_tape, Noise};

/// Probability floor used by [`categorical_kl`].
pub const PROB_FLOOR: f64 = 1e-8;

/// Cosine normalizer floor on the tape, keeps all-zero rows finite.
const NORM_FLOOR: f64 = 1e-12;

// ---- closed-form divergences ----

/// Diagonal Gaussian KL, summed over dimensions and averaged over the batch.
pub fn gaussian_kl(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64> {
    validate(q.mu.dim() == p.mu.dim(), || {
        format!("posterior shapes differ: {:?} vs {:?}", q.mu.dim(), p.mu.dim())
    })?;
    validate(
        q.sigma2.iter().chain(p.sigma2.iter()).all(|s| *s > 0.0),
        || "variances must be strictly positive".into(),
    )?;
    let mut total = 0.0;
    for i in 0..q.mu.nrows() {
        for j in 0..q.mu.ncols() {
            let (mq, sq) = (q.mu[[i, j]], q.sigma2[[i, j]]);
            let (mp, sp) = (p.mu[[i, j]], p.sigma2[[i, j]]);
            total += 0.5 * ((sp / sq).ln() + (sq + (mq - mp).powi(2)) / sp - 1.0);
        }
    }
    Ok(total / q.mu.nrows().max(1) as f64)
}

/// `sum q log(q / p)` averaged over rows, with `0 log 0 = 0`. Prior mass below
/// [`PROB_FLOOR`] is clamped and reported with a warning.
pub fn categorical_kl(q: &CategoricalPosterior, p: &CategoricalPosterior) -> Result<f64> {
    validate(q.probs.dim() == p.probs.dim(), || "categorical shapes differ".into())?;
    let mut total = 0.0;
    let mut clamped = false;
    for (qr, pr) in q.probs.outer_iter().zip(p.probs.outer_iter()) {
        for (&qi, &pi) in qr.iter().zip(pr.iter()) {
            if qi <= 0.0 {
                continue;
            }
            if pi < PROB_FLOOR {
                clamped = true;
            }
            total += qi * (qi.ln() - pi.max(PROB_FLOOR).ln());
        }
    }
    if clamped {
        log::warn!("categorical_kl: prior has (near) zero mass where posterior does not; clamped to {PROB_FLOOR}");
    }
    Ok(total / q.probs.nrows().max(1) as f64)
}

// ---- tape-level building blocks ----

pub fn gaussian_kl_tape(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Var {
    // 0.5 * (lv_p - lv_q + exp(lv_q - lv_p) + (mu_q - mu_p)^2 exp(-lv_p) - 1)
    let rows = tape.shape(q.mu).0 as f64;
    let dlv = tape.sub(p.logvar, q.logvar);
    let ndlv = tape.neg(dlv);
    let ratio = tape.exp(ndlv);
    let dm = tape.sub(q.mu, p.mu);
    let dm2 = tape.square(dm);
    let nlp = tape.neg(p.logvar);
    let inv = tape.exp(nlp);
    let quad = tape.mul(dm2, inv);
    let a = tape.add(dlv, ratio);
    let b = tape.add(a, quad);
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5 / rows)
}

/// KL against the fixed standard normal prior.
pub fn standard_normal_kl_tape(tape: &mut Tape, q: GaussianVars) -> Var {
    let rows = tape.shape(q.mu).0 as f64;
    let var = tape.exp(q.logvar);
    let m2 = tape.square(q.mu);
    let a = tape.add(var, m2);
    let b = tape.sub(a, q.logvar);
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5 / rows)
}

/// KL between row-wise categoricals given as logits.
pub fn categorical_kl_tape(tape: &mut Tape, q_logits: Var, p_logits: Var) -> Var {
    let rows = tape.shape(q_logits).0 as f64;
    let lq = tape.log_softmax_rows(q_logits);
    let lp = tape.log_softmax_rows(p_logits);
    let q = tape.exp(lq);
    let d = tape.sub(lq, lp);
    let qd = tape.mul(q, d);
    let s = tape.sum(qd);
    tape.scale(s, 1.0 / rows)
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = tape.shape(logits);
    validate(rows == labels.len(), || "label count does not match logits".into())?;
    let y = tape.constant(one_hot(labels, classes)?);
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.mul(ls, y);
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / rows as f64))
}

/// `0.5 * sum (x_hat - x)^2`, averaged over the batch.
pub fn reconstruction_tape(tape: &mut Tape, x_hat: Var, x: Var) -> Var {
    let rows = tape.shape(x).0 as f64;
    let d = tape.sub(x_hat, x);
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    tape.scale(s, 0.5 / rows)
}

/// `L[i, j] = log q(z_i | x_j)` for diagonal Gaussians, all pairs at once.
pub fn pairwise_log_density_tape(tape: &mut Tape, z: Var, mu: Var, logvar: Var) -> Var {
    let n = tape.shape(z).1 as f64;
    let nlv = tape.neg(logvar);
    let prec = tape.exp(nlv);
    let prec_t = tape.transpose(prec);
    let zz = tape.square(z);
    let a = tape.matmul(zz, prec_t);
    let mp = tape.mul(mu, prec);
    let mp_t = tape.transpose(mp);
    let zm = tape.matmul(z, mp_t);
    let b = tape.scale(zm, -2.0);
    let mu2 = tape.square(mu);
    let mu2p = tape.mul(mu2, prec);
    let cj = tape.add(mu2p, logvar);
    let c = tape.sum_rows(cj);
    let c_t = tape.transpose(c);
    let ab = tape.add(a, b);
    let quad = tape.add(ab, c_t);
    let half = tape.scale(quad, -0.5);
    tape.add_scalar(half, -0.5 * n * (2.0 * PI).ln())
}

/// MWS entropy from a pairwise log-density matrix.
fn entropy_from_log_density(tape: &mut Tape, l: Var, dataset_size: usize) -> Var {
    let b = tape.shape(l).0;
    let lse = tape.logsumexp_rows(l);
    let shifted = tape.add_scalar(lse, -((b * dataset_size) as f64).ln());
    let m = tape.mean(shifted);
    tape.neg(m)
}

pub fn mws_entropy_tape(tape: &mut Tape, z: Var, post: GaussianVars, dataset_size: usize) -> Var {
    let l = pairwise_log_density_tape(tape, z, post.mu, post.logvar);
    entropy_from_log_density(tape, l, dataset_size)
}

/// `H(st) + H(dy) - H(st, dy) - log B'`. The last term cancels the normalizer
/// offset the three entropy estimates leave behind, so independent factors
/// give an estimate near zero.
pub fn mutual_info_tape(
    tape: &mut Tape,
    z_st: Var,
    post_st: GaussianVars,
    z_dy: Var,
    post_dy: GaussianVars,
    dataset_size: usize,
) -> Var {
    let l_st = pairwise_log_density_tape(tape, z_st, post_st.mu, post_st.logvar);
    let l_dy = pairwise_log_density_tape(tape, z_dy, post_dy.mu, post_dy.logvar);
    let l_joint = tape.add(l_st, l_dy);
    let h_st = entropy_from_log_density(tape, l_st, dataset_size);
    let h_dy = entropy_from_log_density(tape, l_dy, dataset_size);
    let h_joint = entropy_from_log_density(tape, l_joint, dataset_size);
    let s = tape.add(h_st, h_dy);
    let d = tape.sub(s, h_joint);
    tape.add_scalar(d, -(dataset_size as f64).ln())
}

fn row_normalize(tape: &mut Tape, a: Var) -> Var {
    let sq = tape.square(a);
    let ss = tape.sum_rows(sq);
    let norm = tape.sqrt(ss);
    let norm = tape.clamp(norm, NORM_FLOOR, f64::INFINITY);
    tape.div(a, norm)
}

/// Label-driven contrastive estimate: every same-label (anchor, target) pair is
/// a positive and all different-label targets are that anchor's negatives.
/// Returns the mean of `log(e^pos / (e^pos + sum e^neg))` over positive pairs
/// whose anchor has at least one negative, or `None` if there are none.
pub fn contrastive_masked_tape(
    tape: &mut Tape,
    anchors: Var,
    targets: Var,
    anchor_labels: &[usize],
    target_labels: &[usize],
    tau: f64,
) -> Option<Var> {
    let (b, m) = (anchor_labels.len(), target_labels.len());
    let mut neg_offset = Array2::zeros((b, m));
    let mut valid = Array2::zeros((b, m));
    let mut count = 0usize;
    for (i, &ya) in anchor_labels.iter().enumerate() {
        let has_neg = target_labels.iter().any(|&yt| yt != ya);
        for (j, &yt) in target_labels.iter().enumerate() {
            if yt == ya {
                neg_offset[[i, j]] = crate::stochastic::MASKED_SCORE;
                if has_neg {
                    valid[[i, j]] = 1.0;
                    count += 1;
                }
            }
        }
    }
    let skipped = anchor_labels
        .iter()
        .filter(|&&ya| !target_labels.contains(&ya))
        .count();
    if skipped > 0 {
        log::debug!("contrastive: {skipped} anchors without a same-label target skipped");
    }
    if count == 0 {
        log::debug!("contrastive: no valid positive pairs, term skipped");
        return None;
    }
    let an = row_normalize(tape, anchors);
    let tn = row_normalize(tape, targets);
    let tn_t = tape.transpose(tn);
    let sim = tape.matmul(an, tn_t);
    let s = tape.scale(sim, 1.0 / tau);
    let off = tape.constant(neg_offset);
    let negs = tape.add(s, off);
    let neg_lse = tape.logsumexp_rows(negs);
    // pos - logaddexp(pos, neg_lse) = d - softplus(d), d = pos - neg_lse
    let d = tape.sub(s, neg_lse);
    let sp = tape.softplus(d);
    let term = tape.sub(d, sp);
    let vm = tape.constant(valid);
    let picked = tape.mul(term, vm);
    let total = tape.sum(picked);
    Some(tape.scale(total, 1.0 / count as f64))
}

// ---- value-level estimators ----

fn check_posterior_batch(z: &Array2<f64>, post: &GaussianPosterior) -> Result<()> {
    validate(z.dim() == post.mu.dim() && post.mu.dim() == post.sigma2.dim(), || {
        format!("sample shape {:?} does not match posterior {:?}", z.dim(), post.mu.dim())
    })?;
    validate(z.nrows() >= 1, || "batch must be non-empty".into())?;
    validate(post.sigma2.iter().all(|s| *s > 0.0), || "variances must be positive".into())
}

/// MWS entropy estimate
/// `-(1/B) sum_i log[(1 / (B' B)) sum_j q(z_i | x_j)]`.
pub fn mws_entropy(samples: &Array2<f64>, post: &GaussianPosterior, dataset_size: usize) -> Result<f64> {
    check_posterior_batch(samples, post)?;
    validate(dataset_size >= samples.nrows(), || {
        format!("dataset size {dataset_size} smaller than batch {}", samples.nrows())
    })?;
    let mut tape = Tape::detached();
    let z = tape.constant(samples.clone());
    let mu = tape.constant(post.mu.clone());
    let logvar = tape.constant(post.logvar());
    let h = mws_entropy_tape(&mut tape, z, GaussianVars { mu, logvar }, dataset_size);
    Ok(tape.scalar(h))
}

/// MI between static and dynamic factors for one domain batch.
pub fn loss_mutual_info(
    post_st: &GaussianPosterior,
    post_dy: &GaussianPosterior,
    samples_st: &Array2<f64>,
    samples_dy: &Array2<f64>,
    dataset_size: usize,
) -> Result<f64> {
    check_posterior_batch(samples_st, post_st)?;
    check_posterior_batch(samples_dy, post_dy)?;
    validate(samples_st.nrows() == samples_dy.nrows(), || "batch sizes differ".into())?;
    validate(dataset_size >= samples_st.nrows(), || "dataset size smaller than batch".into())?;
    let mut tape = Tape::detached();
    let vars = |tape: &mut Tape, p: &GaussianPosterior| GaussianVars {
        mu: tape.constant(p.mu.clone()),
        logvar: tape.constant(p.logvar()),
    };
    let ps = vars(&mut tape, post_st);
    let pd = vars(&mut tape, post_dy);
    let zs = tape.constant(samples_st.clone());
    let zd = tape.constant(samples_dy.clone());
    let mi = mutual_info_tape(&mut tape, zs, ps, zd, pd, dataset_size);
    Ok(tape.scalar(mi))
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    a.dot(&b) / (na * nb)
}

/// Aligned contrastive estimate: row `j` of `anchors` is paired with row `j`
/// of `positives` and row `j` of every entry in `negatives`.
pub fn contrastive_cmi(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    negatives: &[Array2<f64>],
    tau_contrastive: f64,
) -> Result<f64> {
    validate(!negatives.is_empty(), || "at least one negative is required".into())?;
    validate(tau_contrastive > 0.0, || "tau_contrastive must be positive".into())?;
    validate(anchors.nrows() > 0, || "empty anchor batch".into())?;
    for m in std::iter::once(positives).chain(negatives) {
        validate(m.dim() == anchors.dim(), || "representation shapes differ".into())?;
    }
    for m in std::iter::once(anchors).chain(std::iter::once(positives)).chain(negatives) {
        validate(m.outer_iter().all(|r| r.iter().any(|v| *v != 0.0)), || {
            "zero-norm representation: cosine similarity undefined".into()
        })?;
    }
    let mut total = 0.0;
    for j in 0..anchors.nrows() {
        let a = anchors.row(j);
        let pos = cosine(a, positives.row(j)) / tau_contrastive;
        let logits: Vec<f64> = std::iter::once(pos)
            .chain(negatives.iter().map(|n| cosine(a, n.row(j)) / tau_contrastive))
            .collect();
        total += pos - logsumexp(logits.iter().copied());
    }
    Ok(total / anchors.nrows() as f64)
}

// ---- full-sequence forward pass ----

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub tau_contrastive: f64,
    /// `B'` in the MWS estimator.
    pub dataset_size: usize,
    /// Hard masks / one-hot drift samples forward with soft gradients. Off
    /// gives the fully smooth relaxation used by gradient checks.
    pub straight_through: bool,
}

/// Every intermediate of one training forward pass over `T` aligned domains.
#[derive(Debug, Clone)]
pub struct SequenceForward {
    pub x: Vec<Var>,
    pub labels: Vec<Vec<usize>>,
    pub post_st: Vec<GaussianVars>,
    pub post_dy: Vec<GaussianVars>,
    pub prior_dy: Vec<GaussianVars>,
    pub z_st: Vec<Var>,
    pub z_dy: Vec<Var>,
    pub drift_q: Vec<Var>,
    pub drift_p: Vec<Var>,
    pub z_d: Vec<Var>,
    pub x_hat: Vec<Var>,
    pub phi_st: Vec<Var>,
    pub phi_dy: Vec<Var>,
    pub logits: Vec<Var>,
    /// Dynamic-encoder state after the final domain.
    pub final_state: RecurrentState,
}

/// Algorithm-1 forward pass: priors, posteriors, samples, masks and logits
/// for each domain in order, starting from zero states and `z_0 = 0`.
pub fn forward_sequence(
    model: &SyncModel,
    tape: &mut Tape,
    batch: &AlignedBatch,
    opts: &ForwardOptions,
    noise: &mut Noise,
) -> Result<SequenceForward> {
    let dims = model.dims;
    let t_count = batch.num_domains();
    let b = batch.batch_size();
    validate(t_count >= 1 && b >= 1, || "empty batch".into())?;
    for (x, y) in batch.features.iter().zip(&batch.labels) {
        validate(x.dim() == (b, dims.feature_dim) && y.len() == b, || {
            format!("domain batch shape {:?} does not match ({b}, {})", x.dim(), dims.feature_dim)
        })?;
    }
    let r = dims.recurrent_width;
    let zero_state = |tape: &mut Tape| StateVars {
        h: tape.constant(Array2::zeros((b, r))),
        c: tape.constant(Array2::zeros((b, r))),
    };
    let mut s_dy = zero_state(tape);
    let mut s_prior_dy = zero_state(tape);
    let mut s_drift = zero_state(tape);
    let mut s_prior_d = zero_state(tape);
    let mut z_prev_dy = tape.constant(Array2::zeros((b, dims.latent_dim)));
    let mut z_prev_d = tape.constant(Array2::zeros((b, dims.drift_states)));

    let mut f = SequenceForward {
        x: vec![],
        labels: batch.labels.clone(),
        post_st: vec![],
        post_dy: vec![],
        prior_dy: vec![],
        z_st: vec![],
        z_dy: vec![],
        drift_q: vec![],
        drift_p: vec![],
        z_d: vec![],
        x_hat: vec![],
        phi_st: vec![],
        phi_dy: vec![],
        logits: vec![],
        final_state: RecurrentState::zeros(b, r),
    };
    for t in 0..t_count {
        let x = tape.constant(batch.features[t].clone());
        let y = tape.constant(one_hot(&batch.labels[t], dims.num_classes)?);

        let (prior_dy, s) = model.prior_dynamic_tape(tape, z_prev_dy, s_prior_dy);
        s_prior_dy = s;
        let (drift_p, s) = model.prior_drift_tape(tape, z_prev_d, s_prior_d);
        s_prior_d = s;

        let post_st = model.encode_static_tape(tape, x);
        let (post_dy, s) = model.encode_dynamic_tape(tape, x, s_dy);
        s_dy = s;
        let (drift_q, s) = model.encode_drift_tape(tape, y, s_drift);
        s_drift = s;

        let z_st = reparameterize_tape(tape, post_st.mu, post_st.logvar, noise.normal((b, dims.latent_dim)));
        let z_dy = reparameterize_tape(tape, post_dy.mu, post_dy.logvar, noise.normal((b, dims.latent_dim)));
        let (soft_d, hard_d) = gumbel_categorical_tape(tape, drift_q, dims.tau_gumbel, noise)?;
        let z_d = if opts.straight_through {
            tape.straight_through(hard_d, soft_d)
        } else {
            soft_d
        };

        let x_hat = model.decode_tape(tape, z_st, z_dy);
        let (phi_st, _) =
            model.mask_causal_tape(tape, post_st.mu, Branch::Static, noise, opts.straight_through)?;
        let (phi_dy, _) =
            model.mask_causal_tape(tape, post_dy.mu, Branch::Dynamic, noise, opts.straight_through)?;
        let logits = model.classify_tape(tape, phi_st, phi_dy, z_d);

        z_prev_dy = z_dy;
        z_prev_d = z_d;
        f.x.push(x);
        f.post_st.push(post_st);
        f.post_dy.push(post_dy);
        f.prior_dy.push(prior_dy);
        f.z_st.push(z_st);
        f.z_dy.push(z_dy);
        f.drift_q.push(drift_q);
        f.drift_p.push(drift_p);
        f.z_d.push(z_d);
        f.x_hat.push(x_hat);
        f.phi_st.push(phi_st);
        f.phi_dy.push(phi_dy);
        f.logits.push(logits);
    }
    let last_t = batch.domain_indices.last().copied().unwrap_or(t_count);
    f.final_state = s_dy.value(tape, last_t);
    Ok(f)
}

/// Tape handles for every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub kl_static: Var,
    pub kl_dynamic: Var,
    pub kl_drift: Var,
    pub nll_class: Var,
    pub mi_penalty: Var,
    pub static_contrastive: Var,
    pub dynamic_contrastive: Var,
}

fn sum_vars(tape: &mut Tape, vars: impl IntoIterator<Item = Var>) -> Var {
    let mut acc: Option<Var> = None;
    for v in vars {
        acc = Some(match acc {
            Some(a) => tape.add(a, v),
            None => v,
        });
    }
    acc.unwrap_or_else(|| tape.constant_scalar(0.0))
}

/// Recon / static KL / dynamic KL, each summed over domains.
pub fn feature_pattern_tape(tape: &mut Tape, f: &SequenceForward) -> (Var, Var, Var) {
    let n = f.x.len();
    let recon: Vec<_> = (0..n).map(|t| reconstruction_tape(tape, f.x_hat[t], f.x[t])).collect();
    let kls: Vec<_> = (0..n).map(|t| standard_normal_kl_tape(tape, f.post_st[t])).collect();
    let kld: Vec<_> = (0..n)
        .map(|t| gaussian_kl_tape(tape, f.post_dy[t], f.prior_dy[t]))
        .collect();
    (sum_vars(tape, recon), sum_vars(tape, kls), sum_vars(tape, kld))
}

/// Classification NLL and drift KL, each summed over domains.
pub fn mechanism_tape(tape: &mut Tape, f: &SequenceForward) -> Result<(Var, Var)> {
    let mut nll = vec![];
    let mut kl = vec![];
    for t in 0..f.x.len() {
        nll.push(cross_entropy_tape(tape, f.logits[t], &f.labels[t])?);
        kl.push(categorical_kl_tape(tape, f.drift_q[t], f.drift_p[t]));
    }
    Ok((sum_vars(tape, nll), sum_vars(tape, kl)))
}

pub fn mutual_info_sequence_tape(tape: &mut Tape, f: &SequenceForward, dataset_size: usize) -> Var {
    let terms: Vec<_> = (0..f.x.len())
        .map(|t| mutual_info_tape(tape, f.z_st[t], f.post_st[t], f.z_dy[t], f.post_dy[t], dataset_size))
        .collect();
    sum_vars(tape, terms)
}

/// `-sum_{t>=2} I_st(t)`: anchors from domain `t`, targets from `t - 1`.
pub fn static_causal_tape(tape: &mut Tape, f: &SequenceForward, tau: f64) -> Var {
    let mut terms = vec![];
    for t in 1..f.x.len() {
        match contrastive_masked_tape(tape, f.phi_st[t], f.phi_st[t - 1], &f.labels[t], &f.labels[t - 1], tau) {
            Some(v) => terms.push(v),
            None => log::debug!("static causal term for domain pair ({}, {}) skipped", t, t + 1),
        }
    }
    let s = sum_vars(tape, terms);
    tape.neg(s)
}

/// `-sum_t I_dy(t)`: dynamic anchors against stop-gradient static targets of
/// the same domain. `pinned` replaces the targets with fixed values.
pub fn dynamic_causal_tape(
    tape: &mut Tape,
    f: &SequenceForward,
    tau: f64,
    pinned: Option<&[Array2<f64>]>,
) -> Var {
    let mut terms = vec![];
    for t in 0..f.x.len() {
        let targets = match pinned {
            Some(p) => tape.constant(p[t].clone()),
            None => tape.detach(f.phi_st[t]),
        };
        match contrastive_masked_tape(tape, f.phi_dy[t], targets, &f.labels[t], &f.labels[t], tau) {
            Some(v) => terms.push(v),
            None => log::debug!("dynamic causal term for domain {} skipped", t + 1),
        }
    }
    let s = sum_vars(tape, terms);
    tape.neg(s)
}

pub fn loss_vars(tape: &mut Tape, f: &SequenceForward, opts: &ForwardOptions) -> Result<LossVars> {
    loss_vars_pinned(tape, f, opts, None)
}

fn loss_vars_pinned(
    tape: &mut Tape,
    f: &SequenceForward,
    opts: &ForwardOptions,
    pinned: Option<&[Array2<f64>]>,
) -> Result<LossVars> {
    let (recon, kl_static, kl_dynamic) = feature_pattern_tape(tape, f);
    let (nll_class, kl_drift) = mechanism_tape(tape, f)?;
    let dataset_size = opts.dataset_size.max(f.labels[0].len());
    let mi_penalty = mutual_info_sequence_tape(tape, f, dataset_size);
    let static_contrastive = static_causal_tape(tape, f, opts.tau_contrastive);
    let dynamic_contrastive = dynamic_causal_tape(tape, f, opts.tau_contrastive, pinned);
    Ok(LossVars {
        recon,
        kl_static,
        kl_dynamic,
        kl_drift,
        nll_class,
        mi_penalty,
        static_contrastive,
        dynamic_contrastive,
    })
}

/// Weighted total on the tape, summed in the same order as [`total_loss`].
pub fn total_loss_tape(tape: &mut Tape, v: &LossVars, alpha1: f64, alpha2: f64) -> Var {
    let a = tape.add(v.recon, v.kl_static);
    let a = tape.add(a, v.kl_dynamic);
    let b = tape.add(v.nll_class, v.kl_drift);
    let evolve = tape.add(a, b);
    let mi = tape.scale(v.mi_penalty, alpha1);
    let c = tape.add(v.static_contrastive, v.dynamic_contrastive);
    let causal = tape.scale(c, alpha2);
    let s = tape.add(evolve, mi);
    tape.add(s, causal)
}

// ---- breakdown ----

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub kl_static: f64,
    pub kl_dynamic: f64,
    pub kl_drift: f64,
    pub nll_class: f64,
    pub mi_penalty: f64,
    pub static_contrastive: f64,
    pub dynamic_contrastive: f64,
}

impl LossParts {
    pub fn from_tape(tape: &Tape, v: &LossVars) -> Self {
        Self {
            recon: tape.scalar(v.recon),
            kl_static: tape.scalar(v.kl_static),
            kl_dynamic: tape.scalar(v.kl_dynamic),
            kl_drift: tape.scalar(v.kl_drift),
            nll_class: tape.scalar(v.nll_class),
            mi_penalty: tape.scalar(v.mi_penalty),
            static_contrastive: tape.scalar(v.static_contrastive),
            dynamic_contrastive: tape.scalar(v.dynamic_contrastive),
        }
    }

    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("recon", self.recon),
            ("kl_static", self.kl_static),
            ("kl_dynamic", self.kl_dynamic),
            ("kl_drift", self.kl_drift),
            ("nll_class", self.nll_class),
            ("mi_penalty", self.mi_penalty),
            ("static_contrastive", self.static_contrastive),
            ("dynamic_contrastive", self.dynamic_contrastive),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_static: f64,
    pub kl_dynamic: f64,
    pub kl_drift: f64,
    pub nll_class: f64,
    pub mi_penalty: f64,
    pub static_contrastive: f64,
    pub dynamic_contrastive: f64,
    pub total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LossBreakdown {
    pub const CSV_FIELDS: [&'static str; 11] = [
        "recon",
        "kl_static",
        "kl_dynamic",
        "kl_drift",
        "nll_class",
        "mi_penalty",
        "static_contrastive",
        "dynamic_contrastive",
        "total",
        "alpha1",
        "alpha2",
    ];

    pub fn csv_values(&self) -> [f64; 11] {
        [
            self.recon,
            self.kl_static,
            self.kl_dynamic,
            self.kl_drift,
            self.nll_class,
            self.mi_penalty,
            self.static_contrastive,
            self.dynamic_contrastive,
            self.total,
            self.alpha1,
            self.alpha2,
        ]
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            recon: self.recon,
            kl_static: self.kl_static,
            kl_dynamic: self.kl_dynamic,
            kl_drift: self.kl_drift,
            nll_class: self.nll_class,
            mi_penalty: self.mi_penalty,
            static_contrastive: self.static_contrastive,
            dynamic_contrastive: self.dynamic_contrastive,
        }
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            recon: avg(|b| b.recon),
            kl_static: avg(|b| b.kl_static),
            kl_dynamic: avg(|b| b.kl_dynamic),
            kl_drift: avg(|b| b.kl_drift),
            nll_class: avg(|b| b.nll_class),
            mi_penalty: avg(|b| b.mi_penalty),
            static_contrastive: avg(|b| b.static_contrastive),
            dynamic_contrastive: avg(|b| b.dynamic_contrastive),
            total: avg(|b| b.total),
            alpha1: first.alpha1,
            alpha2: first.alpha2,
        })
    }
}

/// `(recon + kl_st + kl_dy) + (nll + kl_d) + a1 * mi + a2 * (stc + dyc)`.
pub fn total_loss(parts: LossParts, alpha1: f64, alpha2: f64) -> Result<LossBreakdown> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name });
        }
    }
    let p = parts;
    let evolve = (p.recon + p.kl_static + p.kl_dynamic) + (p.nll_class + p.kl_drift);
    let total = (evolve + p.mi_penalty * alpha1)
        + (p.static_contrastive + p.dynamic_contrastive) * alpha2;
    Ok(LossBreakdown {
        recon: p.recon,
        kl_static: p.kl_static,
        kl_dynamic: p.kl_dynamic,
        kl_drift: p.kl_drift,
        nll_class: p.nll_class,
        mi_penalty: p.mi_penalty,
        static_contrastive: p.static_contrastive,
        dynamic_contrastive: p.dynamic_contrastive,
        total,
        alpha1,
        alpha2,
    })
}

// ---- value-level sequence losses ----

/// Recon / static KL / dynamic KL for decoded samples, summed over domains.
pub fn loss_feature_pattern(
    model: &SyncModel,
    x_seq: &[Array2<f64>],
    posteriors_st: &[GaussianPosterior],
    posteriors_dy: &[GaussianPosterior],
    priors_dy: &[GaussianPosterior],
    samples_st: &[Array2<f64>],
    samples_dy: &[Array2<f64>],
) -> Result<(f64, f64, f64)> {
    let n = x_seq.len();
    validate(
        [posteriors_st.len(), posteriors_dy.len(), priors_dy.len(), samples_st.len(), samples_dy.len()]
            .iter()
            .all(|&l| l == n),
        || "sequence lengths are misaligned".into(),
    )?;
    let (mut recon, mut kls, mut kld) = (0.0, 0.0, 0.0);
    for t in 0..n {
        let x_hat = model.decode(&samples_st[t], &samples_dy[t])?;
        validate(x_hat.dim() == x_seq[t].dim(), || "batch misaligned with samples".into())?;
        recon += 0.5 * (&x_hat - &x_seq[t]).mapv(|v| v * v).sum() / x_hat.nrows() as f64;
        let std = GaussianPosterior::standard(posteriors_st[t].batch(), posteriors_st[t].dim());
        kls += gaussian_kl(&posteriors_st[t], &std)?;
        kld += gaussian_kl(&posteriors_dy[t], &priors_dy[t])?;
    }
    Ok((recon, kls, kld))
}

/// Classification NLL and drift KL summed over domains.
pub fn loss_mechanism(
    logits_seq: &[Array2<f64>],
    labels_seq: &[Vec<usize>],
    drift_posteriors: &[CategoricalPosterior],
    drift_priors: &[CategoricalPosterior],
) -> Result<(f64, f64)> {
    let n = logits_seq.len();
    validate(
        labels_seq.len() == n && drift_posteriors.len() == n && drift_priors.len() == n,
        || "sequence lengths are misaligned".into(),
    )?;
    let mut nll = 0.0;
    let mut kl = 0.0;
    for t in 0..n {
        let logits = &logits_seq[t];
        validate(logits.nrows() == labels_seq[t].len(), || "label count mismatch".into())?;
        let mut s = 0.0;
        for (row, &y) in logits.outer_iter().zip(&labels_seq[t]) {
            validate(y < row.len(), || format!("label {y} out of range"))?;
            s += logsumexp(row.iter().copied()) - row[y];
        }
        nll += s / logits.nrows() as f64;
        kl += categorical_kl(&drift_posteriors[t], &drift_priors[t])?;
    }
    Ok((nll, kl))
}

fn forward_parts(
    model: &SyncModel,
    batch: &AlignedBatch,
    noise: &mut Noise,
    opts: &ForwardOptions,
) -> Result<LossParts> {
    let mut tape = Tape::new(&model.store);
    let f = forward_sequence(model, &mut tape, batch, opts, noise)?;
    let v = loss_vars(&mut tape, &f, opts)?;
    Ok(LossParts::from_tape(&tape, &v))
}

/// Static causal loss of a freshly run forward pass.
pub fn loss_static_causal(
    model: &SyncModel,
    batch: &AlignedBatch,
    noise: &mut Noise,
    opts: &ForwardOptions,
) -> Result<f64> {
    validate(batch.num_domains() >= 2, || "static causal loss needs T >= 2".into())?;
    Ok(forward_parts(model, batch, noise, opts)?.static_contrastive)
}

/// Dynamic causal loss of a freshly run forward pass.
pub fn loss_dynamic_causal(
    model: &SyncModel,
    batch: &AlignedBatch,
    noise: &mut Noise,
    opts: &ForwardOptions,
) -> Result<f64> {
    Ok(forward_parts(model, batch, noise, opts)?.dynamic_contrastive)
}

/// Full loss breakdown and gradients for one batch.
pub fn evaluate_batch(
    model: &SyncModel,
    batch: &AlignedBatch,
    noise: &mut Noise,
    opts: &ForwardOptions,
    alpha1: f64,
    alpha2: f64,
) -> Result<(LossBreakdown, crate::autodiff::Gradients, RecurrentState)> {
    let mut tape = Tape::new(&model.store);
    let f = forward_sequence(model, &mut tape, batch, opts, noise)?;
    let v = loss_vars(&mut tape, &f, opts)?;
    let total = total_loss_tape(&mut tape, &v, alpha1, alpha2);
    let breakdown = total_loss(LossParts::from_tape(&tape, &v), alpha1, alpha2)?;
    debug_assert_eq!(breakdown.total.to_bits(), tape.scalar(total).to_bits());
    let grads = tape.backward(total);
    Ok((breakdown, grads, f.final_state))
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` per parameter tensor between
/// the tape gradient of the total loss and central finite differences.
///
/// The dynamic causal loss treats its static targets as constants, so the
/// finite differences are taken on the same surrogate: targets stay pinned at
/// their values for the unperturbed parameters.
pub fn gradient_check(
    model: &mut SyncModel,
    batch: &AlignedBatch,
    noise_seed: Option<u64>,
    opts: &ForwardOptions,
    alpha1: f64,
    alpha2: f64,
    eps: f64,
) -> Result<Vec<(String, f64)>> {
    let noise = || match noise_seed {
        Some(s) => Noise::new(crate::stochastic::NoiseMode::Stochastic, s),
        None => Noise::deterministic(),
    };
    let run = |model: &SyncModel, pinned: Option<&[Array2<f64>]>| -> Result<(f64, Vec<Array2<f64>>, Vec<(crate::nn::ParamId, Array2<f64>)>)> {
        let mut tape = Tape::new(&model.store);
        let f = forward_sequence(model, &mut tape, batch, opts, &mut noise())?;
        let v = loss_vars_pinned(&mut tape, &f, opts, pinned)?;
        let total = total_loss_tape(&mut tape, &v, alpha1, alpha2);
        let targets = f.phi_st.iter().map(|p| tape.value(*p).clone()).collect();
        let grads = tape.backward(total);
        let g = grads.params().map(|(id, g)| (id, g.clone())).collect();
        Ok((tape.scalar(total), targets, g))
    };
    let (_, targets, analytic) = run(model, None)?;
    let mut out = Vec::new();
    for id in model.store.ids().collect::<Vec<_>>() {
        let g = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Array2::zeros(model.store.value(id).dim()));
        let mut fd = Array2::zeros(g.dim());
        for r in 0..g.nrows() {
            for c in 0..g.ncols() {
                let orig = model.store.value(id)[[r, c]];
                model.store.value_mut(id)[[r, c]] = orig + eps;
                let hi = run(model, Some(&targets))?.0;
                model.store.value_mut(id)[[r, c]] = orig - eps;
                let lo = run(model, Some(&targets))?.0;
                model.store.value_mut(id)[[r, c]] = orig;
                fd[[r, c]] = (hi - lo) / (2.0 * eps);
            }
        }
        let norm = |a: &Array2<f64>| a.mapv(|v| v * v).sum().sqrt();
        let scale = norm(&g).max(norm(&fd));
        let rel = if scale == 0.0 { 0.0 } else { norm(&(&g - &fd)) / scale };
        out.push((model.store.name(id).to_string(), rel));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_model::ModelDims;
    use crate::stochastic::NoiseMode;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gauss(mu: f64, s2: f64) -> GaussianPosterior {
        GaussianPosterior::new(array![[mu]], array![[s2]]).unwrap()
    }

    fn naive_mws(z: &Array2<f64>, post: &GaussianPosterior, dataset_size: usize) -> f64 {
        let b = z.nrows();
        let mut total = 0.0;
        for i in 0..b {
            let mut acc = 0.0;
            for j in 0..b {
                let mut lp = 0.0;
                for n in 0..z.ncols() {
                    let (m, s2) = (post.mu[[j, n]], post.sigma2[[j, n]]);
                    lp += -0.5 * ((2.0 * PI * s2).ln() + (z[[i, n]] - m).powi(2) / s2);
                }
                acc += lp.exp();
            }
            total += (acc / (b * dataset_size) as f64).ln();
        }
        -total / b as f64
    }

    fn random_posterior(rng: &mut ChaCha8Rng, b: usize, n: usize) -> (Array2<f64>, GaussianPosterior) {
        let mu: Array2<f64> = Array2::from_shape_fn((b, n), |_| rng.random_range(-1.0..1.0));
        let s2: Array2<f64> = Array2::from_shape_fn((b, n), |_| rng.random_range(0.3..2.0));
        let z = Array2::from_shape_fn((b, n), |(i, j)| mu[[i, j]] + s2[[i, j]].sqrt() * rng.random_range(-1.5f64..1.5));
        (z, GaussianPosterior::new(mu, s2).unwrap())
    }

    #[test]
    fn gaussian_kl_oracle_values() {
        assert_eq!(gaussian_kl(&gauss(0.3, 2.0), &gauss(0.3, 2.0)).unwrap(), 0.0);
        assert!((gaussian_kl(&gauss(1.0, 1.0), &gauss(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((gaussian_kl(&gauss(0.0, 4.0), &gauss(0.0, 1.0)).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn gaussian_kl_tape_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, q) = random_posterior(&mut rng, 5, 3);
        let (_, p) = random_posterior(&mut rng, 5, 3);
        let mut tape = Tape::detached();
        let qv = GaussianVars { mu: tape.constant(q.mu.clone()), logvar: tape.constant(q.logvar()) };
        let pv = GaussianVars { mu: tape.constant(p.mu.clone()), logvar: tape.constant(p.logvar()) };
        let k = gaussian_kl_tape(&mut tape, qv, pv);
        assert!((tape.scalar(k) - gaussian_kl(&q, &p).unwrap()).abs() < 1e-12);
        let k0 = standard_normal_kl_tape(&mut tape, qv);
        let std = GaussianPosterior::standard(5, 3);
        assert!((tape.scalar(k0) - gaussian_kl(&q, &std).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn categorical_kl_cases() {
        let u = CategoricalPosterior::new(array![[0.5, 0.5]]).unwrap();
        assert_eq!(categorical_kl(&u, &u).unwrap(), 0.0);
        let one = CategoricalPosterior::new(array![[1.0, 0.0]]).unwrap();
        assert!((categorical_kl(&one, &u).unwrap() - 2f64.ln()).abs() < 1e-12);
        let big = categorical_kl(&u, &one).unwrap();
        assert!(big > 8.0 && big.is_finite());
    }

    #[test]
    fn mws_collapses_for_single_sample() {
        let post = GaussianPosterior::new(array![[0.2, -0.1]], array![[1.5, 0.5]]).unwrap();
        let z = array![[0.7, 0.3]];
        let lq: f64 = (0..2)
            .map(|n| -0.5 * ((2.0 * PI * post.sigma2[[0, n]]).ln() + (z[[0, n]] - post.mu[[0, n]]).powi(2) / post.sigma2[[0, n]]))
            .sum();
        assert!((mws_entropy(&z, &post, 1).unwrap() + lq).abs() < 1e-12);
    }

    #[test]
    fn mws_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..40 {
            let b = 1 + case % 16;
            let n = 1 + case % 5;
            let (z, post) = random_posterior(&mut rng, b, n);
            let fast = mws_entropy(&z, &post, 100).unwrap();
            assert!((fast - naive_mws(&z, &post, 100)).abs() < 1e-6);
        }
    }

    #[test]
    fn mws_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (z, post) = random_posterior(&mut rng, 7, 3);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pz = Array2::from_shape_fn((7, 3), |(i, j)| z[[perm[i], j]]);
        let pm = Array2::from_shape_fn((7, 3), |(i, j)| post.mu[[perm[i], j]]);
        let ps = Array2::from_shape_fn((7, 3), |(i, j)| post.sigma2[[perm[i], j]]);
        let pp = GaussianPosterior::new(pm, ps).unwrap();
        let a = mws_entropy(&z, &post, 50).unwrap();
        let b = mws_entropy(&pz, &pp, 50).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn mi_harness(seed: u64, duplicate: bool, mu_std: f64, s2: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 512;
        let n = 2;
        let normal = rand_distr::StandardNormal;
        let draw = |rng: &mut ChaCha8Rng| {
            let mu = Array2::from_shape_fn((b, n), |_| rng.sample::<f64, _>(normal) * mu_std);
            let var = Array2::from_elem((b, n), s2);
            let z = Array2::from_shape_fn((b, n), |(i, j)| mu[[i, j]] + s2.sqrt() * rng.sample::<f64, _>(normal));
            (z, GaussianPosterior::new(mu, var).unwrap())
        };
        let (zs, ps) = draw(&mut rng);
        let (zd, pd) = if duplicate { (zs.clone(), ps.clone()) } else { draw(&mut rng) };
        loss_mutual_info(&ps, &pd, &zs, &zd, b).unwrap()
    }

    #[test]
    fn mutual_info_independent_near_zero() {
        for seed in 0..5 {
            let mi = mi_harness(seed, false, 1.0, 0.5);
            assert!(mi.abs() < 0.1, "independent MI {mi}");
        }
    }

    #[test]
    fn mutual_info_overestimates_with_sharp_posteriors() {
        // the j = i term dominates the joint density when posteriors are narrow
        // relative to the spread of their means
        let mi = mi_harness(1, false, 2.0, 0.25);
        assert!(mi > 0.3 && mi < 1.0, "sharp-posterior MI {mi}");
    }

    #[test]
    fn mutual_info_duplicated_is_large() {
        for seed in 0..3 {
            let mi = mi_harness(seed, true, 1.0, 0.5);
            assert!(mi > 1.0, "duplicated MI {mi}");
        }
    }

    #[test]
    fn mutual_info_single_sample() {
        let ps = GaussianPosterior::new(array![[0.1, 0.2]], array![[1.0, 0.5]]).unwrap();
        let pd = GaussianPosterior::new(array![[-0.3]], array![[2.0]]).unwrap();
        let zs = array![[0.0, 0.4]];
        let zd = array![[0.5]];
        let mi = loss_mutual_info(&ps, &pd, &zs, &zd, 1).unwrap();
        // joint density factorizes, so the B = 1 collapse gives exactly zero
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn contrastive_uniform_similarity() {
        let a = array![[1.0, 0.0]];
        for m in 1..=8 {
            let negs = vec![a.clone(); m];
            let v = contrastive_cmi(&a, &a, &negs, 0.1).unwrap();
            assert!((v + ((m + 1) as f64).ln()).abs() < 1e-9);
        }
        let v = contrastive_cmi(&a, &a, &vec![a.clone(); 4], 0.5).unwrap();
        assert!((v + 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_saturated_and_monotone() {
        let a = array![[1.0, 0.0]];
        let v = contrastive_cmi(&a, &a, &[array![[-1.0, 0.0]]], 0.1).unwrap();
        assert!(v < 0.0 && v > -1e-8);
        let neg = vec![array![[0.0, 1.0]], array![[-0.3, 1.0]]];
        let mut last = f64::NEG_INFINITY;
        for k in 0..10 {
            let ang = 1.5 - 0.15 * k as f64;
            let pos = array![[ang.cos(), ang.sin()]];
            let v = contrastive_cmi(&a, &pos, &neg, 0.1).unwrap();
            assert!(v > last);
            last = v;
        }
        assert!(contrastive_cmi(&array![[0.0, 0.0]], &a, &[a.clone()], 0.1).is_err());
    }

    #[test]
    fn masked_contrastive_matches_aligned() {
        let a = array![[0.3, 0.9, -0.2]];
        let p = array![[0.5, 0.4, 0.1]];
        let n1 = array![[-0.7, 0.2, 0.3]];
        let n2 = array![[0.1, -0.6, 0.8]];
        let aligned = contrastive_cmi(&a, &p, &[n1.clone(), n2.clone()], 0.2).unwrap();
        let mut tape = Tape::detached();
        let av = tape.constant(a);
        let targets = ndarray::concatenate(ndarray::Axis(0), &[p.view(), n1.view(), n2.view()]).unwrap();
        let tv = tape.constant(targets);
        let v = contrastive_masked_tape(&mut tape, av, tv, &[0], &[0, 1, 1], 0.2).unwrap();
        assert!((tape.scalar(v) - aligned).abs() < 1e-12);
        // no negatives available
        assert!(contrastive_masked_tape(&mut tape, av, tv, &[0], &[0, 0, 0], 0.2).is_none());
    }

    proptest! {
        #[test]
        fn contrastive_scale_invariant(
            vals in proptest::collection::vec(0.1f64..2.0, 12),
            signs in proptest::collection::vec(any::<bool>(), 12),
            scale_pow in -4i32..5,
            which in 0usize..4,
        ) {
            let v: Vec<f64> = vals.iter().zip(&signs).map(|(x, s)| if *s { *x } else { -*x }).collect();
            let row = |k: usize| Array2::from_shape_vec((1, 3), v[3 * k..3 * k + 3].to_vec()).unwrap();
            let (a, p, n1, n2) = (row(0), row(1), row(2), row(3));
            let base = contrastive_cmi(&a, &p, &[n1.clone(), n2.clone()], 0.1).unwrap();
            let c = 2f64.powi(scale_pow);
            let mut mats = [a, p, n1, n2];
            mats[which] *= c;
            let scaled = contrastive_cmi(&mats[0], &mats[1], &[mats[2].clone(), mats[3].clone()], 0.1).unwrap();
            prop_assert_eq!(base, scaled);
        }
    }

    fn toy() -> (SyncModel, AlignedBatch) {
        let dims = ModelDims {
            feature_dim: 2,
            num_classes: 2,
            latent_dim: 4,
            drift_states: 2,
            hidden_width: 6,
            recurrent_width: 5,
            mask_ratio: 0.5,
            tau_gumbel: 0.5,
        };
        let model = SyncModel::new(dims, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = AlignedBatch {
            features: (0..2)
                .map(|_| Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)))
                .collect(),
            labels: vec![vec![0, 1, 0, 1], vec![1, 1, 0, 0]],
            domain_indices: vec![1, 2],
        };
        (model, batch)
    }

    fn opts(straight_through: bool) -> ForwardOptions {
        ForwardOptions {
            tau_contrastive: 0.1,
            dataset_size: 8,
            straight_through,
        }
    }

    #[test]
    fn total_is_weighted_sum_exactly() {
        let (model, batch) = toy();
        let mut noise = Noise::new(NoiseMode::Stochastic, 1);
        let (b, _, _) = evaluate_batch(&model, &batch, &mut noise, &opts(true), 1.0, 0.02).unwrap();
        let again = total_loss(b.parts(), 1.0, 0.02).unwrap();
        assert_eq!(b.total.to_bits(), again.total.to_bits());
        assert!(b.kl_static >= -1e-6 && b.kl_dynamic >= -1e-6 && b.kl_drift >= -1e-6);
        let zero = total_loss(b.parts(), 0.0, 0.0).unwrap();
        let evolve = (b.recon + b.kl_static + b.kl_dynamic) + (b.nll_class + b.kl_drift);
        assert_eq!(zero.total, evolve);
    }

    #[test]
    fn non_finite_part_is_named() {
        let parts = LossParts { mi_penalty: f64::NAN, ..Default::default() };
        match total_loss(parts, 1.0, 1.0) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "mi_penalty"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mechanism_trivial_cases() {
        let logits = vec![Array2::zeros((3, 4))];
        let labels = vec![vec![0, 1, 3]];
        let q = vec![CategoricalPosterior::new(array![[0.3, 0.7]]).unwrap()];
        let (nll, kl) = loss_mechanism(&logits, &labels, &q, &q).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
        assert_eq!(kl, 0.0);
        let sharp = vec![array![[60.0, 0.0], [0.0, 60.0]]];
        let (nll, _) = loss_mechanism(&sharp, &[vec![0, 1]], &q, &q).unwrap();
        assert!(nll < 1e-20);
        assert!(loss_mechanism(&logits, &[vec![0, 1, 4]], &q, &q).is_err());
    }

    #[test]
    fn causal_losses_need_two_domains_and_classes() {
        let (model, batch) = toy();
        let single = AlignedBatch {
            features: vec![batch.features[0].clone()],
            labels: vec![batch.labels[0].clone()],
            domain_indices: vec![1],
        };
        let o = opts(true);
        assert!(loss_static_causal(&model, &single, &mut Noise::deterministic(), &o).is_err());
        assert!(loss_dynamic_causal(&model, &single, &mut Noise::deterministic(), &o).is_ok());
        let one_class = AlignedBatch {
            labels: vec![vec![1; 4]],
            ..single
        };
        let v = loss_dynamic_causal(&model, &one_class, &mut Noise::deterministic(), &o).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn feature_pattern_zero_when_posterior_matches_prior() {
        let (model, _) = toy();
        let x = vec![Array2::zeros((2, 2))];
        let p = GaussianPosterior::standard(2, 4);
        let z = vec![Array2::zeros((2, 4))];
        let (_, kls, kld) =
            loss_feature_pattern(&model, &x, &[p.clone()], &[p.clone()], &[p], &z, &z).unwrap();
        assert_eq!((kls, kld), (0.0, 0.0));
    }

    #[test]
    fn gradient_check_on_toy_model() {
        let (mut model, batch) = toy();
        let report = gradient_check(&mut model, &batch, None, &opts(false), 1.0, 0.02, 1e-5).unwrap();
        assert_eq!(report.len(), model.store.len());
        for (name, rel) in report {
            assert!(rel < 1e-4, "{name}: relative error {rel}");
        }
    }
}

