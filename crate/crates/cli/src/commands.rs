use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::ImageFormat;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sync_core::checkpoint::{Checkpoint, CheckpointModel};
use sync_core::domain_stream::{
    apply_drift_variant, generate_circle, generate_sine, load_sequence, save_sequence, split_domains, DriftVariant,
    SplitSpec,
};
use sync_core::evaluation::{
    compute_metrics, decision_boundary_grid, disentanglement_curve, ground_truth_grid, read_curve, write_curve,
    write_metric_table, BoundaryGrid, Bounds, MetricReport, Oracle,
};
use sync_core::predictor::{predict_after, predict_sequence, PredictionRecord};
use sync_core::trainer::{train as train_sync, train_erm_baseline, write_loss_log, RunManifest};
use sync_core::DomainSequence;

use crate::config::{resolve_out, DataSection, RunConfig};
use crate::plot::{render_curve, render_grid};
use crate::{
    Cli, Command, CompareArgs, DatasetKind, EvalArgs, GenDataArgs, Method, PlotArgs, SplitKind, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Plot(a) => plot(&a).map(|_| ()),
        Command::Compare(a) => compare(&a).map(|_| ()),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    let domains = args
        .domains
        .unwrap_or(if args.dataset == DatasetKind::Sine { 24 } else { 30 });
    let mut seq = match args.dataset {
        DatasetKind::Circle => generate_circle(domains, args.per_domain, args.seed)?,
        DatasetKind::Sine => generate_sine(domains, args.per_domain, args.seed)?,
    };
    if args.variant != "none" {
        let v: DriftVariant = args.variant.parse()?;
        seq = apply_drift_variant(&seq, v, args.seed)?;
    }
    let out = resolve_out(&args.out);
    ensure_parent(&out)?;
    save_sequence(&seq, &out)?;
    println!("wrote {} ({} domains x {} samples)", out.display(), seq.len(), args.per_domain);
    Ok(out)
}

/// Manifest as written by the CLI: the resolved run file plus the trainer's
/// record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliManifest {
    pub run_config: RunConfig,
    pub run: RunManifest,
}

impl CliManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
        Ok(serde_json::from_reader(r)?)
    }
}

/// File names inside a run directory.
pub mod files {
    pub const DATASET: &str = "dataset.txt";
    pub const RUN_CONFIG: &str = "run_config.toml";
    pub const MI_CURVE: &str = "mi_curve.csv";

    pub fn checkpoint(method: &str) -> String {
        format!("{method}_checkpoint.json")
    }
    pub fn manifest(method: &str) -> String {
        format!("{method}_manifest.json")
    }
    pub fn loss_log(method: &str) -> String {
        format!("{method}_loss_log.csv")
    }
}

/// What a training invocation produced, kept in memory for `compare`.
pub struct TrainResult {
    pub out_dir: PathBuf,
    pub config: RunConfig,
    pub sequence: DomainSequence,
    pub sync: Option<Checkpoint>,
    pub erm: Option<Checkpoint>,
}

fn run_training(cfg: &RunConfig, method: Method) -> Result<TrainResult> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seq = cfg.data.load()?;
    let (src, mid, _) = split_domains(&seq, &cfg.data.split_spec())?;
    save_sequence(&seq, out.join(files::DATASET))?;
    fs::write(out.join(files::RUN_CONFIG), cfg.to_toml()?)?;

    let mut result = TrainResult {
        out_dir: out.clone(),
        config: cfg.clone(),
        sequence: seq,
        sync: None,
        erm: None,
    };
    if matches!(method, Method::Sync | Method::Both) {
        info!("training sync on {} source domains", src.len());
        let outcome = train_sync(&cfg.train, &src, &mid)?;
        let ck = Checkpoint::from_sync(&outcome.model, &outcome.bank, &cfg.train);
        ck.save(out.join(files::checkpoint("sync")))?;
        write_loss_log(&outcome.steps, create(&out.join(files::loss_log("sync")))?)?;
        match disentanglement_curve(&outcome.manifest.epochs) {
            Ok(curve) => write_curve(&curve, create(&out.join(files::MI_CURVE))?)?,
            Err(e) => warn!("no MI curve written: {e}"),
        }
        let mut run = outcome.manifest;
        run.checkpoint_paths = vec![files::checkpoint("sync")];
        if let Some(reason) = &run.aborted {
            warn!("sync training stopped early: {reason}");
        }
        write_json(
            &out.join(files::manifest("sync")),
            &CliManifest {
                run_config: cfg.clone(),
                run,
            },
        )?;
        result.sync = Some(ck);
    }
    if matches!(method, Method::Erm | Method::Both) {
        info!("training erm baseline");
        let outcome = train_erm_baseline(&cfg.train, &src, &mid)?;
        let ck = Checkpoint::from_erm(&outcome.model, &cfg.train);
        ck.save(out.join(files::checkpoint("erm")))?;
        write_loss_log(&outcome.steps, create(&out.join(files::loss_log("erm")))?)?;
        let mut run = outcome.manifest;
        run.checkpoint_paths = vec![files::checkpoint("erm")];
        write_json(
            &out.join(files::manifest("erm")),
            &CliManifest {
                run_config: cfg.clone(),
                run,
            },
        )?;
        result.erm = Some(ck);
    }
    Ok(result)
}

pub fn train(args: &TrainArgs) -> Result<TrainResult> {
    let cfg = RunConfig::resolve(args.run.config.as_deref(), &args.run.overrides())?;
    let result = run_training(&cfg, args.method)?;
    println!("wrote run to {}", result.out_dir.display());
    Ok(result)
}

fn predict(ck: &Checkpoint, seq: &DomainSequence, split: SplitKind, seed: u64) -> Result<Vec<PredictionRecord>> {
    let (_, mid, tgt) = split_domains(seq, &SplitSpec::default())?;
    let block = match split {
        SplitKind::Intermediate => &mid,
        SplitKind::Target => &tgt,
    };
    Ok(match &ck.model {
        CheckpointModel::Sync { .. } => {
            let (model, bank) = ck.to_sync()?;
            match split {
                SplitKind::Target => predict_after(&model, &bank, Some(&mid), &tgt, seed)?,
                SplitKind::Intermediate => predict_sequence(&model, &bank, &mid, seed)?.records,
            }
        }
        CheckpointModel::Erm { .. } => ck.to_erm()?.predict(block)?,
    })
}

fn split_name(split: SplitKind) -> &'static str {
    match split {
        SplitKind::Intermediate => "intermediate",
        SplitKind::Target => "target",
    }
}

pub fn eval(args: &EvalArgs) -> Result<MetricReport> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let seq = load_sequence(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let records = predict(&ck, &seq, args.split, args.seed)?;
    let report = compute_metrics(&records, &seq.name, ck.method(), args.seed)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = format!("{}_{}", ck.method(), split_name(args.split));
    write_json(&out.join(format!("{stem}_records.json")), &records)?;
    write_metric_table(std::slice::from_ref(&report), create(&out.join(format!("{stem}_metrics.csv")))?)?;
    println!(
        "{} on {} {}: Wst {:.4} Avg {:.4}",
        report.method,
        seq.name,
        split_name(args.split),
        report.wst,
        report.avg
    );
    Ok(report)
}

fn bounds_for(dataset: &str) -> Bounds {
    if dataset.starts_with("sine") {
        Bounds::sine()
    } else {
        Bounds::circle()
    }
}

fn overlay_points(data: Option<&Path>, t: Option<usize>) -> Result<Vec<(f64, f64, usize)>> {
    let (Some(path), Some(t)) = (data, t) else {
        return Ok(Vec::new());
    };
    let seq = load_sequence(path)?;
    let dom = seq
        .domains
        .iter()
        .find(|d| d.t == t)
        .with_context(|| format!("{} has no domain {t}", path.display()))?;
    Ok(dom
        .samples
        .iter()
        .map(|s| (s.features[0], s.features[1], s.label))
        .collect())
}

fn save_png(img: &image::RgbImage, out: &Path) -> Result<()> {
    ensure_parent(out)?;
    img.save_with_format(out, ImageFormat::Png)
        .with_context(|| format!("writing {}", out.display()))
}

pub fn plot(args: &PlotArgs) -> Result<PathBuf> {
    let out = resolve_out(&args.out);
    ensure_parent(&out)?;
    let need_t = || args.t.context("--t is required with --checkpoint and --truth");
    let grid = if let Some(path) = &args.curve {
        let curve = read_curve(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))?;
        save_png(&render_curve(&curve, 640, 400), &out)?;
        println!("wrote {}", out.display());
        return Ok(out);
    } else if let Some(path) = &args.grid {
        BoundaryGrid::read(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))?
    } else if let Some(path) = &args.checkpoint {
        let t = need_t()?;
        let ck = Checkpoint::load(path)?;
        let (model, bank) = ck.to_sync()?;
        let g = decision_boundary_grid(&model, &bank, bounds_for(&ck.config.dataset), args.resolution, t, args.seed)?;
        g.write(create(&out.with_extension("grid.txt"))?)?;
        g
    } else if let Some(kind) = args.truth {
        let t = need_t()?;
        let n = args.domains.unwrap_or(if kind == DatasetKind::Sine { 24 } else { 30 });
        if t == 0 || t > n {
            bail!("--t must lie in 1..={n}");
        }
        let (oracle, bounds) = match kind {
            DatasetKind::Circle => (Oracle::circle(t, n), Bounds::circle()),
            DatasetKind::Sine => (Oracle::sine(t, n), Bounds::sine()),
        };
        let g = ground_truth_grid(&oracle, bounds, args.resolution, t)?;
        g.write(create(&out.with_extension("grid.txt"))?)?;
        g
    } else {
        bail!("one of --grid, --curve, --checkpoint or --truth is required");
    };
    let points = overlay_points(args.data.as_deref(), args.t.or(Some(grid.t)))?;
    save_png(&render_grid(&grid, &points, 500), &out)?;
    println!("wrote {}", out.display());
    Ok(out)
}

/// Mean Wst and Avg of one method over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub wst: f64,
    pub avg: f64,
    pub per_seed: Vec<MetricReport>,
}

pub fn compare(args: &CompareArgs) -> Result<Vec<CompareRow>> {
    let base = RunConfig::resolve(args.run.config.as_deref(), &args.run.overrides())?;
    let seeds = if args.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        args.seeds.clone()
    };
    let root = base.out_dir();
    let mut sync_reports = Vec::new();
    let mut erm_reports = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        cfg.output.out_dir = base.output.out_dir.join(format!("seed_{seed}"));
        let res = run_training(&cfg, Method::Both)?;
        for (ck, reports) in [(&res.sync, &mut sync_reports), (&res.erm, &mut erm_reports)] {
            let ck = ck.as_ref().expect("both methods trained");
            let records = predict_for_run(ck, &res.sequence, &cfg.data, seed)?;
            reports.push(compute_metrics(&records, &res.sequence.name, ck.method(), seed)?);
        }
    }
    let row = |name: &str, reports: Vec<MetricReport>| {
        let n = reports.len() as f64;
        CompareRow {
            method: name.into(),
            wst: reports.iter().map(|r| r.wst).sum::<f64>() / n,
            avg: reports.iter().map(|r| r.avg).sum::<f64>() / n,
            per_seed: reports,
        }
    };
    let rows = vec![row("SYNC", sync_reports), row("ERM", erm_reports)];

    fs::create_dir_all(&root)?;
    let mut per_seed = Vec::new();
    for r in &rows {
        per_seed.extend(r.per_seed.iter().cloned());
    }
    write_metric_table(&per_seed, create(&root.join("compare_per_seed.csv"))?)?;
    let mut table = create(&root.join("compare.csv"))?;
    writeln!(table, "method,wst,avg")?;
    for r in &rows {
        writeln!(table, "{},{},{}", r.method, r.wst, r.avg)?;
    }
    table.flush()?;
    println!("{:<6} {:>8} {:>8}", "", "Wst", "Avg");
    for r in &rows {
        println!("{:<6} {:>8.2} {:>8.2}", r.method, 100.0 * r.wst, 100.0 * r.avg);
    }
    Ok(rows)
}

fn predict_for_run(ck: &Checkpoint, seq: &DomainSequence, data: &DataSection, seed: u64) -> Result<Vec<PredictionRecord>> {
    let (_, mid, tgt) = split_domains(seq, &data.split_spec())?;
    Ok(match &ck.model {
        CheckpointModel::Sync { .. } => {
            let (model, bank) = ck.to_sync()?;
            predict_after(&model, &bank, Some(&mid), &tgt, seed)?
        }
        CheckpointModel::Erm { .. } => ck.to_erm()?.predict(&tgt)?,
    })
}
