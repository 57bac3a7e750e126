//! Accuracy metrics, the disentanglement curve, and decision-boundary grids.

use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain_stream::{circle_center, circle_center_angle, circle_label, sine_label, sine_phase, DriftVariant, SineParams};
use crate::error::{validate, Error, Result};
use crate::latent_model::SyncModel;
use crate::predictor::{classify_points, PredictionRecord};
use crate::stochastic::argmax;
use crate::trainer::{EpochSummary, HiddenStateBank};

/// Worst-case and average accuracy over a block of domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    /// `(t, accuracy)` in input order.
    pub per_domain: Vec<(usize, f64)>,
    pub wst: f64,
    pub avg: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "method,dataset,seed,wst,avg";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.method, self.dataset, self.seed, self.wst, self.avg)
    }
}

pub fn compute_metrics(
    records: &[PredictionRecord],
    dataset: &str,
    method: &str,
    seed: u64,
) -> Result<MetricReport> {
    validate(!records.is_empty(), || "no prediction records to score".into())?;
    let per_domain: Vec<(usize, f64)> = records.iter().map(|r| (r.t, r.accuracy)).collect();
    let wst = per_domain.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    // sorted summation keeps Avg independent of domain order
    let mut accs: Vec<f64> = per_domain.iter().map(|p| p.1).collect();
    accs.sort_by(f64::total_cmp);
    let avg = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(MetricReport {
        dataset: dataset.to_string(),
        method: method.to_string(),
        seed,
        per_domain,
        wst,
        avg,
    })
}

pub fn write_metric_table<W: Write>(reports: &[MetricReport], mut w: W) -> Result<()> {
    writeln!(w, "{}", MetricReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mi: f64,
    /// True when `mi` is no larger than the previous point's (always true for
    /// the first point).
    pub non_increasing: bool,
}

/// MI between static and dynamic means, one point per logged epoch.
pub fn disentanglement_curve(epochs: &[EpochSummary]) -> Result<Vec<CurvePoint>> {
    let mut out: Vec<CurvePoint> = Vec::with_capacity(epochs.len());
    for e in epochs {
        let mi = e
            .mi_estimate
            .ok_or_else(|| Error::Validation(format!("epoch {} has no mi_estimate field", e.epoch)))?;
        let non_increasing = out.last().is_none_or(|p| mi <= p.mi);
        out.push(CurvePoint {
            epoch: e.epoch,
            mi,
            non_increasing,
        });
    }
    Ok(out)
}

pub fn write_curve<W: Write>(curve: &[CurvePoint], mut w: W) -> Result<()> {
    writeln!(w, "epoch,mi,non_increasing")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.epoch, p.mi, p.non_increasing)?;
    }
    Ok(())
}

pub fn read_curve<R: BufRead>(r: R) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected epoch,mi,non_increasing"));
        }
        out.push(CurvePoint {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            mi: f[1].parse().map_err(|_| bad("bad mi"))?,
            non_increasing: f[2].parse().map_err(|_| bad("bad flag"))?,
        });
    }
    Ok(out)
}

/// Axis-aligned box `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        validate(
            x_min < x_max && y_min < y_max && [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()),
            || format!("degenerate bounds [{x_min}, {x_max}] x [{y_min}, {y_max}]"),
        )?;
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// Covers the unit half-disc the circle benchmark lives on, with margin.
    pub fn circle() -> Self {
        Self::new(-1.6, 1.6, -0.6, 1.6).expect("valid")
    }

    pub fn sine() -> Self {
        let p = SineParams::default();
        Self::new(p.x_range.0, p.x_range.1, p.y_range.0, p.y_range.1).expect("valid")
    }
}

/// Predicted labels on a `resolution x resolution` lattice. `labels[i][j]`
/// is the point with the `i`-th y value and the `j`-th x value; both axes
/// include their end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub t: usize,
    pub bounds: Bounds,
    pub resolution: usize,
    pub labels: Vec<Vec<usize>>,
}

impl BoundaryGrid {
    pub fn axis(lo: f64, hi: f64, resolution: usize, i: usize) -> f64 {
        if i + 1 == resolution {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    }

    /// Lattice points in row-major order (y outer, x inner).
    pub fn points(bounds: &Bounds, resolution: usize) -> Array2<f64> {
        let mut x = Array2::zeros((resolution * resolution, 2));
        for i in 0..resolution {
            let yv = Self::axis(bounds.y_min, bounds.y_max, resolution, i);
            for j in 0..resolution {
                x[[i * resolution + j, 0]] = Self::axis(bounds.x_min, bounds.x_max, resolution, j);
                x[[i * resolution + j, 1]] = yv;
            }
        }
        x
    }

    fn from_flat(t: usize, bounds: Bounds, resolution: usize, flat: &[usize]) -> Self {
        let labels = flat.chunks(resolution).map(|c| c.to_vec()).collect();
        Self {
            t,
            bounds,
            resolution,
            labels,
        }
    }

    /// Share of cells on which two grids of equal shape agree.
    pub fn agreement(&self, other: &BoundaryGrid) -> Result<f64> {
        validate(self.resolution == other.resolution, || "grid resolutions differ".into())?;
        let total = self.resolution * self.resolution;
        let same = self
            .labels
            .iter()
            .flatten()
            .zip(other.labels.iter().flatten())
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / total as f64)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let b = &self.bounds;
        writeln!(w, "# boundary-grid")?;
        writeln!(w, "t {}", self.t)?;
        writeln!(w, "resolution {}", self.resolution)?;
        writeln!(w, "bounds {} {} {} {}", b.x_min, b.x_max, b.y_min, b.y_max)?;
        for row in &self.labels {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        let bad = |line: usize, m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        if lines.first().map(|s| s.trim()) != Some("# boundary-grid") {
            return Err(bad(1, "missing `# boundary-grid` header"));
        }
        let field = |i: usize, key: &str| -> Result<Vec<String>> {
            let l = lines.get(i).ok_or_else(|| bad(i + 1, "truncated header"))?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(i + 1, &format!("expected `{key}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let t = field(1, "t")?[0].parse().map_err(|_| bad(2, "bad t"))?;
        let resolution: usize = field(2, "resolution")?[0]
            .parse()
            .map_err(|_| bad(3, "bad resolution"))?;
        let b: Vec<f64> = field(3, "bounds")?
            .iter()
            .map(|v| v.parse().map_err(|_| bad(4, "bad bound")))
            .collect::<Result<_>>()?;
        if b.len() != 4 {
            return Err(bad(4, "expected four bounds"));
        }
        let bounds = Bounds::new(b[0], b[1], b[2], b[3])?;
        let body = &lines[4..];
        if body.len() != resolution {
            return Err(bad(5, &format!("expected {resolution} rows, found {}", body.len())));
        }
        let mut labels = Vec::with_capacity(resolution);
        for (i, l) in body.iter().enumerate() {
            let row: Vec<usize> = l
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(i + 5, "bad label")))
                .collect::<Result<_>>()?;
            if row.len() != resolution {
                return Err(bad(i + 5, "row length differs from resolution"));
            }
            labels.push(row);
        }
        Ok(Self {
            t,
            bounds,
            resolution,
            labels,
        })
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    validate(resolution >= 2, || format!("grid resolution must be at least 2, got {resolution}"))
}

/// Classifies the lattice as domain `t`. Dynamic states are drawn from the
/// snapshot bank whatever `t` is; the drift prior is rolled forward to `t`.
pub fn decision_boundary_grid(
    model: &SyncModel,
    bank: &HiddenStateBank,
    bounds: Bounds,
    resolution: usize,
    t: usize,
    seed: u64,
) -> Result<BoundaryGrid> {
    validate(model.dims.feature_dim == 2, || {
        format!("decision grids need a 2-D model, got d = {}", model.dims.feature_dim)
    })?;
    validate(t >= 1, || "domain index must be at least 1".into())?;
    check_resolution(resolution)?;
    let mut snapshot = bank.clone();
    snapshot.roll_drift_prior(model, t - 1)?;
    let x = BoundaryGrid::points(&bounds, resolution);
    let (logits, _) = classify_points(model, &snapshot, x, t, seed)?;
    let flat: Vec<usize> = logits.outer_iter().map(|r| argmax(&r.to_vec())).collect();
    Ok(BoundaryGrid::from_flat(t, bounds, resolution, &flat))
}

/// Analytic labelling rule of a synthetic benchmark at one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Oracle {
    /// Line through `anchor` at `angle`.
    Circle { anchor: [f64; 2], angle: f64 },
    Sine { phase: f64, params: SineParams },
}

impl Oracle {
    pub fn circle(t: usize, n_domains: usize) -> Self {
        Oracle::Circle {
            anchor: [0.0, 0.0],
            angle: circle_center_angle(t, n_domains),
        }
    }

    pub fn circle_variant(variant: DriftVariant, t: usize, n_domains: usize, seed: u64) -> Self {
        Oracle::Circle {
            anchor: circle_center(t, n_domains),
            angle: variant.boundary_angles(n_domains, seed)[t - 1],
        }
    }

    pub fn sine(t: usize, n_domains: usize) -> Self {
        Oracle::Sine {
            phase: sine_phase(t, n_domains),
            params: SineParams::default(),
        }
    }

    pub fn label(&self, x: &[f64]) -> usize {
        match self {
            Oracle::Circle { anchor, angle } => circle_label(x, *anchor, *angle),
            Oracle::Sine { phase, params } => sine_label(x, *phase, params),
        }
    }
}

pub fn ground_truth_grid(oracle: &Oracle, bounds: Bounds, resolution: usize, t: usize) -> Result<BoundaryGrid> {
    check_resolution(resolution)?;
    let x = BoundaryGrid::points(&bounds, resolution);
    let flat: Vec<usize> = x.outer_iter().map(|r| oracle.label(&r.to_vec())).collect();
    Ok(BoundaryGrid::from_flat(t, bounds, resolution, &flat))
}
