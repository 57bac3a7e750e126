//! Training loop (one optimizer step per aligned batch over all source
//! domains), hidden-state bank bookkeeping, model selection and the ERM
//! baseline.

use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::domain_stream::{write_sequence, DomainSequence, SequenceBatcher};
use crate::error::{Error, Result};
use crate::latent_model::{GaussianPosterior, ModelDims, RecurrentState, StateVars, SyncModel};
use crate::nn::{Adam, Linear, Mlp, ParamStore};
use crate::objectives::{evaluate_batch, loss_mutual_info, ForwardOptions, LossBreakdown, LossParts};
use crate::predictor::{predict_sequence, PredictionRecord};
use crate::stochastic::{argmax, Noise, NoiseMode, DEFAULT_TAU_GUMBEL};

/// Mixes a stream tag into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_NOISE: u64 = 1 << 32;

/// Learning rate used by the built-in presets. See the README for why it
/// differs from the published values.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub mask_ratio: f64,
    pub latent_dim: usize,
    /// Defaults to the number of classes.
    pub drift_states: Option<usize>,
    pub hidden_width: usize,
    pub recurrent_width: usize,
    pub tau_gumbel: f64,
    pub tau_contrastive: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub sample_with_replacement: bool,
    /// Samples per domain in the fixed slice used for the MI curve.
    pub mi_monitor_samples: usize,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::circle()
    }
}

impl TrainConfig {
    pub fn circle() -> Self {
        Self {
            dataset: "circle".into(),
            batch_size: 64,
            epochs: 30,
            learning_rate: DEFAULT_LEARNING_RATE,
            alpha1: 1.0,
            alpha2: 0.02,
            mask_ratio: 0.6,
            latent_dim: 20,
            drift_states: None,
            hidden_width: 64,
            recurrent_width: 64,
            tau_gumbel: DEFAULT_TAU_GUMBEL,
            tau_contrastive: 0.1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(10.0),
            sample_with_replacement: false,
            mi_monitor_samples: 512,
            device: "cpu".into(),
        }
    }

    pub fn sine() -> Self {
        Self {
            dataset: "sine".into(),
            epochs: 50,
            alpha2: 0.001,
            latent_dim: 32,
            ..Self::circle()
        }
    }

    /// Built-in defaults for a dataset name; unknown names fall back to the
    /// circle preset with the name kept.
    pub fn for_dataset(name: &str) -> Self {
        match name {
            "sine" => Self::sine(),
            "circle" => Self::circle(),
            other => Self {
                dataset: other.into(),
                ..Self::circle()
            },
        }
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_string());
            }
        };
        need(self.batch_size > 0, "batch_size must be positive");
        need(self.epochs > 0, "epochs must be positive");
        need(self.learning_rate > 0.0, "learning_rate must be positive");
        need(self.alpha1 >= 0.0, "alpha1 must be non-negative");
        need(self.alpha2 >= 0.0, "alpha2 must be non-negative");
        need(
            self.mask_ratio > 0.0 && self.mask_ratio <= 1.0,
            "mask_ratio must lie in (0, 1]",
        );
        need(self.latent_dim > 0, "latent_dim must be positive");
        need(self.drift_states != Some(0), "drift_states must be positive");
        need(self.hidden_width > 0, "hidden_width must be positive");
        need(self.recurrent_width > 0, "recurrent_width must be positive");
        need(self.tau_gumbel > 0.0, "tau_gumbel must be positive");
        need(self.tau_contrastive > 0.0, "tau_contrastive must be positive");
        need(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "adam betas must lie in [0, 1)",
        );
        need(self.adam_eps > 0.0, "adam_eps must be positive");
        need(self.grad_clip.is_none_or(|c| c > 0.0), "grad_clip must be positive");
        need(self.mi_monitor_samples > 0, "mi_monitor_samples must be positive");
        need(self.device == "cpu", "device must be \"cpu\"");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn model_dims(&self, seq: &DomainSequence) -> ModelDims {
        ModelDims {
            feature_dim: seq.feature_dim,
            num_classes: seq.num_classes,
            latent_dim: self.latent_dim,
            drift_states: self.drift_states.unwrap_or(seq.num_classes),
            hidden_width: self.hidden_width,
            recurrent_width: self.recurrent_width,
            mask_ratio: self.mask_ratio,
            tau_gumbel: self.tau_gumbel,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Dynamic-encoder states from the final source domain, plus the drift
/// prior's state rolled forward to the same domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateBank {
    pub entries: Vec<RecurrentState>,
    pub drift_state: RecurrentState,
    /// Last drift sample (one-hot, `1 x K_d`).
    pub drift_sample: Array2<f64>,
    /// Index of the last domain the states have consumed.
    pub domain_index: usize,
}

impl HiddenStateBank {
    pub fn new(dims: &ModelDims) -> Self {
        Self {
            entries: Vec::new(),
            drift_state: RecurrentState::zeros(1, dims.recurrent_width),
            drift_sample: Array2::zeros((1, dims.drift_states)),
            domain_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of stored single-sample states.
    pub fn num_states(&self) -> usize {
        self.entries.iter().map(|e| e.rows()).sum()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, state: RecurrentState) {
        self.domain_index = state.domain_index;
        self.entries.push(state);
    }

    /// Runs the drift prior on its own one-hot samples through domains
    /// `1..=last_t`, leaving it ready for domain `last_t + 1`.
    pub fn roll_drift_prior(&mut self, model: &SyncModel, last_t: usize) -> Result<()> {
        let mut state = RecurrentState::zeros(1, model.dims.recurrent_width);
        let mut z = Array2::zeros((1, model.dims.drift_states));
        for t in 1..=last_t {
            let (p, next) = model.prior_drift(&z, t, &state)?;
            z = Array2::zeros((1, model.dims.drift_states));
            z[[0, argmax(&p.probs.row(0).to_vec())]] = 1.0;
            state = next;
        }
        self.drift_state = state;
        self.drift_sample = z;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub intermediate_avg: f64,
    pub intermediate_wst: f64,
    /// MI between static and dynamic posterior means on the monitor slice.
    pub mi_estimate: Option<f64>,
    pub bank_size: usize,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub data_hash: String,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_intermediate_avg: f64,
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
    pub checkpoint_paths: Vec<String>,
}

impl RunManifest {
    fn new(method: &str, config: &TrainConfig, source: &DomainSequence, intermediate: &DomainSequence) -> Result<Self> {
        Ok(Self {
            method: method.into(),
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            data_hash: data_hash(&[source, intermediate])?,
            epochs: Vec::new(),
            best_epoch: 0,
            best_intermediate_avg: f64::NEG_INFINITY,
            aborted: None,
            wall_clock_secs: 0.0,
            checkpoint_paths: Vec::new(),
        })
    }

    /// The manifest with timing fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// SHA-256 over the on-disk encoding of the given sequences.
pub fn data_hash(seqs: &[&DomainSequence]) -> Result<String> {
    let mut h = Sha256::new();
    for s in seqs {
        let mut buf = Vec::new();
        write_sequence(s, &mut buf)?;
        h.update(&buf);
    }
    Ok(hex::encode(h.finalize()))
}

/// Per-step loss log as CSV.
pub fn write_loss_log<W: Write>(steps: &[StepRecord], mut w: W) -> Result<()> {
    writeln!(w, "step,epoch,{}", LossBreakdown::CSV_FIELDS.join(","))?;
    for s in steps {
        let vals: Vec<String> = s.loss.csv_values().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", s.step, s.epoch, vals.join(","))?;
    }
    Ok(())
}

pub struct TrainOutcome {
    /// Parameters of the best epoch by intermediate Avg.
    pub model: SyncModel,
    /// Bank captured in the best epoch.
    pub bank: HiddenStateBank,
    pub manifest: RunManifest,
    pub steps: Vec<StepRecord>,
}

fn check_inputs(config: &TrainConfig, source: &DomainSequence, intermediate: &DomainSequence) -> Result<()> {
    config.validate()?;
    source.validate()?;
    intermediate.validate()?;
    if source.len() < 2 {
        return Err(Error::Precondition(format!(
            "training needs at least 2 source domains, got {}",
            source.len()
        )));
    }
    if source.feature_dim != intermediate.feature_dim || source.num_classes != intermediate.num_classes {
        return Err(Error::Validation(
            "source and intermediate domains disagree on feature_dim or num_classes".into(),
        ));
    }
    if intermediate.first_t() != source.last_t() + 1 {
        return Err(Error::Validation(format!(
            "intermediate domains must follow the source block (expected t = {}, found {})",
            source.last_t() + 1,
            intermediate.first_t()
        )));
    }
    Ok(())
}

/// Fixed row-aligned slice of every source domain for the MI curve.
struct MonitorSlice {
    features: Vec<Array2<f64>>,
    dataset_size: usize,
}

impl MonitorSlice {
    fn new(source: &DomainSequence, per_domain: usize) -> Self {
        let m = per_domain.min(source.min_domain_size());
        let features = source
            .domains
            .iter()
            .map(|d| d.features().slice(s![..m, ..]).to_owned())
            .collect();
        Self {
            features,
            dataset_size: source.min_domain_size(),
        }
    }

    /// Mean over domains of the MI between static and dynamic posterior
    /// means.
    fn estimate(&self, model: &SyncModel) -> Result<f64> {
        let rows = self.features[0].nrows();
        let mut tape = Tape::new(&model.store);
        let mut state = StateVars::from_value(&mut tape, &RecurrentState::zeros(rows, model.dims.recurrent_width));
        let mut total = 0.0;
        for x in &self.features {
            let xv = tape.constant(x.clone());
            let st = model.encode_static_tape(&mut tape, xv);
            let (dy, next) = model.encode_dynamic_tape(&mut tape, xv, state);
            state = next;
            let pst = st.value(&tape);
            let pdy = dy.value(&tape);
            total += loss_mutual_info(&pst, &pdy, &pst.mu, &pdy.mu, self.dataset_size.max(rows))?;
        }
        Ok(total / self.features.len() as f64)
    }
}

/// Intermediate-domain accuracy of the current parameters and bank.
fn validation_accuracy(
    model: &SyncModel,
    bank: &HiddenStateBank,
    intermediate: &DomainSequence,
    seed: u64,
) -> Result<(f64, f64)> {
    let run = predict_sequence(model, bank, intermediate, seed)?;
    let accs: Vec<f64> = run.records.iter().map(|r| r.accuracy).collect();
    let avg = accs.iter().sum::<f64>() / accs.len() as f64;
    let wst = accs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((avg, wst))
}

/// Trains the full model on `source`, selecting the epoch with the best Avg
/// accuracy on `intermediate`.
pub fn train(config: &TrainConfig, source: &DomainSequence, intermediate: &DomainSequence) -> Result<TrainOutcome> {
    check_inputs(config, source, intermediate)?;
    let started = Instant::now();
    let dims = config.model_dims(source);
    let mut model = SyncModel::new(dims, derive_seed(config.seed, STREAM_INIT))?;
    let mut opt = Adam::new(
        &model.store,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )
    .with_clip(config.grad_clip);
    let mut batcher = SequenceBatcher::new(
        source,
        config.batch_size,
        derive_seed(config.seed, STREAM_BATCHES),
        config.sample_with_replacement,
    )?;
    let opts = ForwardOptions {
        tau_contrastive: config.tau_contrastive,
        dataset_size: source.min_domain_size(),
        straight_through: true,
    };
    let monitor = MonitorSlice::new(source, config.mi_monitor_samples);
    let eval_seed = derive_seed(config.seed, STREAM_EVAL);
    let mut manifest = RunManifest::new("sync", config, source, intermediate)?;
    let mut steps = Vec::new();
    let mut bank = HiddenStateBank::new(&dims);
    let mut best: Option<(ParamStore, HiddenStateBank)> = None;
    let mut step = 0usize;

    'epochs: for epoch in 1..=config.epochs {
        bank.clear();
        let mut losses = Vec::new();
        for batch in batcher.epoch() {
            let mut noise = Noise::new(NoiseMode::Stochastic, derive_seed(config.seed, STREAM_NOISE + step as u64));
            let outcome = evaluate_batch(&model, &batch, &mut noise, &opts, config.alpha1, config.alpha2);
            let (loss, grads, final_state) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite { term }) => {
                    log::error!("epoch {epoch} step {step}: non-finite `{term}`, stopping");
                    manifest.aborted = Some(format!("non-finite loss term `{term}` at step {step}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut model.store, &grads);
            bank.push(final_state);
            steps.push(StepRecord { step, epoch, loss });
            losses.push(loss);
            step += 1;
        }
        bank.roll_drift_prior(&model, source.last_t())?;
        let (avg, wst) = validation_accuracy(&model, &bank, intermediate, eval_seed)?;
        let mi = monitor.estimate(&model)?;
        let improved = avg > manifest.best_intermediate_avg;
        if improved {
            manifest.best_intermediate_avg = avg;
            manifest.best_epoch = epoch;
            best = Some((model.store.clone(), bank.clone()));
        }
        let mean_loss = LossBreakdown::mean(&losses).unwrap_or_default();
        log::info!(
            "epoch {epoch}: loss {:.4} intermediate avg {avg:.4} wst {wst:.4} mi {mi:.4}{}",
            mean_loss.total,
            if improved { " *" } else { "" }
        );
        manifest.epochs.push(EpochSummary {
            epoch,
            mean_loss,
            intermediate_avg: avg,
            intermediate_wst: wst,
            mi_estimate: Some(mi),
            bank_size: bank.len(),
            improved,
        });
    }
    let Some((store, bank)) = best else {
        return Err(Error::Precondition(
            "training stopped before completing an epoch; no checkpoint to keep".into(),
        ));
    };
    model.store = store;
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        bank,
        manifest,
        steps,
    })
}

// ---- ERM baseline ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErmDims {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
}

/// Encoder with the static branch's widths followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct ErmModel {
    pub dims: ErmDims,
    pub store: ParamStore,
    encoder: Mlp,
    head: Linear,
    classifier: Linear,
}

impl ErmModel {
    pub fn new(dims: ErmDims, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, n, c) = (dims.feature_dim, dims.hidden_width, dims.latent_dim, dims.num_classes);
        let encoder = Mlp::new(&mut store, "erm.encoder", &[d, h, h], &mut rng);
        let head = Linear::new(&mut store, "erm.head", h, n, &mut rng);
        let classifier = Linear::new(&mut store, "erm.classifier", n, c, &mut rng);
        Self {
            dims,
            store,
            encoder,
            head,
            classifier,
        }
    }

    fn logits_tape(&self, tape: &mut Tape, x: crate::autodiff::Var) -> crate::autodiff::Var {
        let f = self.encoder.forward(tape, x);
        let f = tape.relu(f);
        let z = self.head.forward(tape, f);
        self.classifier.forward(tape, z)
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new(&self.store);
        let xv = tape.constant(x.clone());
        let l = self.logits_tape(&mut tape, xv);
        tape.value(l).clone()
    }

    pub fn predict(&self, seq: &DomainSequence) -> Result<Vec<PredictionRecord>> {
        if seq.feature_dim != self.dims.feature_dim {
            return Err(Error::Validation(format!(
                "feature dimension {} does not match model ({})",
                seq.feature_dim, self.dims.feature_dim
            )));
        }
        Ok(seq
            .domains
            .iter()
            .map(|d| PredictionRecord::new(d.t, &self.logits(&d.features()), d.labels()))
            .collect())
    }
}

pub struct ErmOutcome {
    pub model: ErmModel,
    pub manifest: RunManifest,
    pub steps: Vec<StepRecord>,
}

/// Cross-entropy on pooled source batches with the same batches, step count
/// and optimizer as [`train`].
pub fn train_erm_baseline(
    config: &TrainConfig,
    source: &DomainSequence,
    intermediate: &DomainSequence,
) -> Result<ErmOutcome> {
    check_inputs(config, source, intermediate)?;
    let started = Instant::now();
    let dims = ErmDims {
        feature_dim: source.feature_dim,
        num_classes: source.num_classes,
        hidden_width: config.hidden_width,
        latent_dim: config.latent_dim,
    };
    let mut model = ErmModel::new(dims, derive_seed(config.seed, STREAM_INIT));
    let mut opt = Adam::new(
        &model.store,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    )
    .with_clip(config.grad_clip);
    let mut batcher = SequenceBatcher::new(
        source,
        config.batch_size,
        derive_seed(config.seed, STREAM_BATCHES),
        config.sample_with_replacement,
    )?;
    let mut manifest = RunManifest::new("erm", config, source, intermediate)?;
    let mut steps = Vec::new();
    let mut best: Option<ParamStore> = None;
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut losses = Vec::new();
        for batch in batcher.epoch() {
            let (x, y) = batch.pooled();
            let mut tape = Tape::new(&model.store);
            let xv = tape.constant(x);
            let logits = model.logits_tape(&mut tape, xv);
            let nll = crate::objectives::cross_entropy_tape(&mut tape, logits, &y)?;
            let parts = LossParts {
                nll_class: tape.scalar(nll),
                ..Default::default()
            };
            let loss = crate::objectives::total_loss(parts, 0.0, 0.0)?;
            let grads = tape.backward(nll);
            opt.step(&mut model.store, &grads);
            steps.push(StepRecord { step, epoch, loss });
            losses.push(loss);
            step += 1;
        }
        let records = model.predict(intermediate)?;
        let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        let wst = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let improved = avg > manifest.best_intermediate_avg;
        if improved {
            manifest.best_intermediate_avg = avg;
            manifest.best_epoch = epoch;
            best = Some(model.store.clone());
        }
        manifest.epochs.push(EpochSummary {
            epoch,
            mean_loss: LossBreakdown::mean(&losses).unwrap_or_default(),
            intermediate_avg: avg,
            intermediate_wst: wst,
            mi_estimate: None,
            bank_size: 0,
            improved,
        });
    }
    if let Some(store) = best {
        model.store = store;
    }
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(ErmOutcome { model, manifest, steps })
}

/// Posterior means of the static and dynamic encoders for row-aligned
/// domain slices, from a zero dynamic state.
pub fn posterior_means(model: &SyncModel, xs: &[Array2<f64>]) -> Result<Vec<(GaussianPosterior, GaussianPosterior)>> {
    let rows = xs.first().map(|x| x.nrows()).unwrap_or(0);
    let mut state = RecurrentState::zeros(rows, model.dims.recurrent_width);
    let mut out = Vec::with_capacity(xs.len());
    for (k, x) in xs.iter().enumerate() {
        let st = model.encode_static(x)?;
        let (dy, next) = model.encode_dynamic(x, k + 1, &state)?;
        state = next;
        out.push((st, dy));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain_stream::{generate_circle, split_domains, SplitSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            latent_dim: 4,
            hidden_width: 8,
            recurrent_width: 6,
            mi_monitor_samples: 16,
            ..TrainConfig::circle()
        }
    }

    fn data() -> (DomainSequence, DomainSequence, DomainSequence) {
        let seq = generate_circle(6, 20, 0).unwrap();
        split_domains(&seq, &SplitSpec::default()).unwrap()
    }

    #[test]
    fn presets_match_published_rows() {
        let c = TrainConfig::circle();
        assert_eq!((c.batch_size, c.epochs, c.alpha1, c.alpha2, c.mask_ratio, c.latent_dim), (64, 30, 1.0, 0.02, 0.6, 20));
        let s = TrainConfig::sine();
        assert_eq!((s.batch_size, s.epochs, s.alpha1, s.alpha2, s.mask_ratio, s.latent_dim), (64, 50, 1.0, 0.001, 0.6, 32));
        c.validate().unwrap();
        s.validate().unwrap();
    }

    #[test]
    fn validate_lists_every_bad_field() {
        let c = TrainConfig {
            batch_size: 0,
            mask_ratio: 1.5,
            tau_gumbel: 0.0,
            ..TrainConfig::circle()
        };
        match c.validate() {
            Err(Error::Config(bad)) => assert_eq!(bad.len(), 3, "{bad:?}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bank_lifecycle_and_determinism() {
        let (src, mid, _) = data();
        let cfg = tiny_config();
        let a = train(&cfg, &src, &mid).unwrap();
        let iters = src.min_domain_size().div_ceil(cfg.batch_size);
        assert_eq!(a.bank.len(), iters);
        assert!(a.bank.entries.iter().all(|e| e.domain_index == src.last_t()));
        assert_eq!(a.bank.domain_index, src.last_t());
        assert_eq!(a.steps.len(), cfg.epochs * iters);
        assert_eq!(a.manifest.epochs.len(), cfg.epochs);
        let b = train(&cfg, &src, &mid).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.manifest.without_timing(), b.manifest.without_timing());
        // the retained checkpoint's score never decreases
        let mut best = f64::NEG_INFINITY;
        for e in &a.manifest.epochs {
            best = best.max(e.intermediate_avg);
        }
        assert_eq!(best, a.manifest.best_intermediate_avg);
    }

    #[test]
    fn erm_is_deterministic() {
        let (src, mid, tgt) = data();
        let cfg = tiny_config();
        let a = train_erm_baseline(&cfg, &src, &mid).unwrap();
        let b = train_erm_baseline(&cfg, &src, &mid).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.model.predict(&tgt).unwrap(), b.model.predict(&tgt).unwrap());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (src, _, tgt) = data();
        let cfg = tiny_config();
        // target block does not follow the source block
        assert!(train(&cfg, &src, &tgt).is_err());
        let one = DomainSequence::new("x", 2, 2, src.domains[..1].to_vec()).unwrap();
        assert!(matches!(train(&cfg, &one, &tgt), Err(Error::Precondition(_))));
    }

    #[test]
    fn loss_log_has_header_and_rows() {
        let steps = vec![StepRecord {
            step: 0,
            epoch: 1,
            loss: LossBreakdown::default(),
        }];
        let mut buf = Vec::new();
        write_loss_log(&steps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("step,epoch,recon"));
        assert_eq!(lines[1].split(',').count(), 13);
    }
}
