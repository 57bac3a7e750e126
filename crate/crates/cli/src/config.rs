//! Run configuration files.
//!
//! A run file is TOML with three optional tables:
//!
//! ```toml
//! [data]
//! dataset = "circle"      # circle | sine | file
//! variant = "none"        # none | gradual | abrupt | noise (circle only)
//! per_domain = 1000
//!
//! [train]
//! epochs = 30
//! grad_clip = "none"      # optional fields accept "none"
//!
//! [output]
//! out_dir = "runs/circle"
//! ```
//!
//! Values resolve as command-line flag, then file, then the per-dataset
//! built-in defaults. Unknown or ill-typed keys are all reported together.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sync_core::domain_stream::{
    apply_drift_variant, generate_circle, generate_sine, load_sequence, split_domains, DriftVariant, SplitSpec,
};
use sync_core::trainer::TrainConfig;
use sync_core::DomainSequence;

/// Relative output directories are resolved under this directory when set.
pub const OUT_ROOT_ENV: &str = "SYNC_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `circle`, `sine`, or `file` (read from `path`).
    pub dataset: String,
    pub path: Option<PathBuf>,
    pub variant: String,
    /// Boundary-angle noise (radians) for the `noise` variant.
    pub noise_std: f64,
    pub domains: usize,
    pub per_domain: usize,
    pub seed: u64,
    /// Source, intermediate and target fractions.
    pub split: [f64; 3],
}

impl DataSection {
    pub fn for_dataset(name: &str) -> Self {
        let spec = SplitSpec::default();
        Self {
            dataset: name.to_string(),
            path: None,
            variant: "none".into(),
            noise_std: DriftVariant::DEFAULT_NOISE_STD,
            domains: if name == "sine" { 24 } else { 30 },
            per_domain: 1000,
            seed: 0,
            split: [spec.source_fraction, spec.intermediate_fraction, spec.target_fraction],
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            source_fraction: self.split[0],
            intermediate_fraction: self.split[1],
            target_fraction: self.split[2],
        }
    }

    pub fn variant(&self) -> Result<Option<DriftVariant>> {
        Ok(match self.variant.as_str() {
            "none" => None,
            "noise" => Some(DriftVariant::Noise { std: self.noise_std }),
            other => Some(other.parse()?),
        })
    }

    /// Generates or reads the full sequence.
    pub fn load(&self) -> Result<DomainSequence> {
        let base = match (&self.path, self.dataset.as_str()) {
            (Some(p), _) => load_sequence(p).with_context(|| format!("reading dataset {}", p.display()))?,
            (None, "circle") => generate_circle(self.domains, self.per_domain, self.seed)?,
            (None, "sine") => generate_sine(self.domains, self.per_domain, self.seed)?,
            (None, "file") => bail!("data.dataset = \"file\" needs data.path"),
            (None, other) => bail!("unknown dataset `{other}` (expected circle, sine or file)"),
        };
        match self.variant()? {
            None => Ok(base),
            Some(v) => Ok(apply_drift_variant(&base, v, self.seed)?),
        }
    }

    pub fn load_split(&self) -> Result<(DomainSequence, DomainSequence, DomainSequence)> {
        Ok(split_domains(&self.load()?, &self.split_spec())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub out_dir: PathBuf,
}

/// A fully resolved run: what a manifest records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    pub output: OutputSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub data_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub per_domain: Option<usize>,
    pub out_dir: Option<PathBuf>,
    /// `section.key=value` pairs; values are TOML literals.
    pub set: Vec<String>,
}

const SECTIONS: [&str; 3] = ["data", "train", "output"];

impl RunConfig {
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut doc = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for pair in &flags.set {
            apply_set(&mut doc, pair)?;
        }
        Self::from_table(&doc, flags)
    }

    pub fn from_table(doc: &toml::Table, flags: &Overrides) -> Result<Self> {
        let mut errors = Vec::new();
        for (k, v) in doc {
            if !SECTIONS.contains(&k.as_str()) {
                errors.push(format!("unknown key `{k}`"));
            } else if !v.is_table() {
                errors.push(format!("`{k}` must be a table"));
            }
        }
        let section = |name: &str| doc.get(name).and_then(|v| v.as_table());
        let dataset = flags
            .dataset
            .clone()
            .or_else(|| {
                section("data")
                    .and_then(|t| t.get("dataset"))
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
            })
            .unwrap_or_else(|| "circle".into());

        let data = overlay(&DataSection::for_dataset(&dataset), section("data"), "data", &mut errors);
        let train = overlay(&TrainConfig::for_dataset(&dataset), section("train"), "train", &mut errors);
        let output = overlay(
            &OutputSection {
                out_dir: PathBuf::from("runs").join(&dataset),
            },
            section("output"),
            "output",
            &mut errors,
        );
        if !errors.is_empty() {
            bail!("invalid config: {}", errors.join("; "));
        }
        let (mut data, mut train, mut output) = (data.unwrap(), train.unwrap(), output.unwrap());
        data.dataset = dataset.clone();
        train.dataset = dataset;
        if let Some(p) = &flags.data_path {
            data.path = Some(p.clone());
        }
        if let Some(s) = flags.seed {
            train.seed = s;
        }
        if let Some(s) = flags.data_seed {
            data.seed = s;
        }
        if let Some(e) = flags.epochs {
            train.epochs = e;
        }
        if let Some(n) = flags.per_domain {
            data.per_domain = n;
        }
        if let Some(o) = &flags.out_dir {
            output.out_dir = o.clone();
        }
        train.validate()?;
        data.variant()?;
        data.split_spec().counts(data.domains.max(3))?;
        Ok(Self { data, train, output })
    }

    pub fn to_toml(&self) -> Result<String> {
        // toml has no null; optional fields that are unset are written as "none"
        let mut v = serde_json::to_value(self)?;
        fn nulls_to_none(v: &mut Value) {
            match v {
                Value::Null => *v = Value::String("none".into()),
                Value::Object(m) => m.values_mut().for_each(nulls_to_none),
                Value::Array(a) => a.iter_mut().for_each(nulls_to_none),
                _ => {}
            }
        }
        nulls_to_none(&mut v);
        Ok(toml::to_string(&v)?)
    }

    /// Output directory with the output-root variable applied.
    pub fn out_dir(&self) -> PathBuf {
        resolve_out(&self.output.out_dir)
    }
}

pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn apply_set(doc: &mut toml::Table, pair: &str) -> Result<()> {
    let (key, value) = pair
        .split_once('=')
        .with_context(|| format!("--set expects section.key=value, got `{pair}`"))?;
    let (sec, field) = key
        .trim()
        .split_once('.')
        .with_context(|| format!("--set key must look like section.key, got `{key}`"))?;
    let raw = value.trim();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let table = doc
        .entry(sec.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match table.as_table_mut() {
        Some(t) => {
            t.insert(field.to_string(), parsed);
            Ok(())
        }
        None => bail!("`{sec}` is not a table"),
    }
}

/// Applies the keys of `table` over `base` one at a time so that every
/// unknown or ill-typed key is reported, not only the first.
fn overlay<T: Serialize + DeserializeOwned>(
    base: &T,
    table: Option<&toml::Table>,
    section: &str,
    errors: &mut Vec<String>,
) -> Option<T> {
    let mut acc = serde_json::to_value(base).expect("defaults serialize");
    let Some(table) = table else {
        return serde_json::from_value(acc).ok();
    };
    let mut ok = true;
    for (k, v) in table {
        if acc.get(k).is_none() {
            errors.push(format!("unknown key `{section}.{k}`"));
            ok = false;
            continue;
        }
        let json = serde_json::to_value(v).expect("toml values serialize");
        // "none" means unset where the field is optional, a literal elsewhere
        let mut candidates = Vec::new();
        if v.as_str() == Some("none") {
            candidates.push(Value::Null);
        }
        candidates.push(json);
        let mut accepted = false;
        let mut last_err = String::new();
        for c in candidates {
            let mut trial = acc.clone();
            trial[k.as_str()] = c.clone();
            match serde_json::from_value::<T>(trial) {
                Ok(_) => {
                    acc[k.as_str()] = c;
                    accepted = true;
                    break;
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        if !accepted {
            errors.push(format!("bad value for `{section}.{k}`: {last_err}"));
            ok = false;
        }
    }
    if ok {
        serde_json::from_value(acc).ok()
    } else {
        None
    }
}
