use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Domain, DomainSequence, Sample};
use crate::error::{validate, Error, Result};

const MAX_RESAMPLES: usize = 10_000;

/// Rotating-Gaussian benchmark: domain `t` is a Gaussian blob centred on an
/// arc point, split by a line through the origin that rotates with the blob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleParams {
    pub radius: f64,
    pub std: f64,
    /// Minimum share of each class per domain; domains are redrawn until met.
    pub min_class_fraction: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            radius: 1.0,
            std: 0.15,
            min_class_fraction: 0.2,
        }
    }
}

/// Uniform box split by `y = amplitude * sin(frequency * x + phase_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineParams {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub amplitude: f64,
}

impl Default for SineParams {
    fn default() -> Self {
        Self {
            x_range: (-1.0, 1.0),
            y_range: (-2.0, 2.0),
            amplitude: 1.0,
        }
    }
}

/// Angle of the blob centre (and of the undisturbed boundary line) for
/// domain `t` of `n`: `pi * (t - 1) / (n - 1)`.
pub fn circle_center_angle(t: usize, n: usize) -> f64 {
    PI * (t as f64 - 1.0) / (n as f64 - 1.0)
}

/// Phase of the sine boundary for domain `t` of `n`: `2 pi (t - 1) / n`.
pub fn sine_phase(t: usize, n: usize) -> f64 {
    2.0 * PI * (t as f64 - 1.0) / n as f64
}

/// Blob centre of domain `t` of `n` on the default unit-radius arc.
pub fn circle_center(t: usize, n: usize) -> [f64; 2] {
    let theta = circle_center_angle(t, n);
    let r = CircleParams::default().radius;
    [r * theta.cos(), r * theta.sin()]
}

/// Label 1 iff the point lies on the counter-clockwise side of the line
/// through `anchor` at angle `boundary`. Points on the line get label 1.
pub(crate) fn circle_label(x: &[f64], anchor: [f64; 2], boundary: f64) -> usize {
    let side = -boundary.sin() * (x[0] - anchor[0]) + boundary.cos() * (x[1] - anchor[1]);
    usize::from(side >= 0.0)
}

/// Label 1 iff the point is on or above the curve.
pub(crate) fn sine_label(x: &[f64], phase: f64, params: &SineParams) -> usize {
    let span = params.x_range.1 - params.x_range.0;
    let curve = params.amplitude * (2.0 * PI * (x[0] - params.x_range.0) / span + phase).sin();
    usize::from(x[1] >= curve)
}

fn check_sizes(n_domains: usize, samples_per_domain: usize) -> Result<()> {
    validate(n_domains >= 2, || {
        format!("n_domains must be at least 2, got {n_domains}")
    })?;
    validate(samples_per_domain >= 2, || {
        format!("samples_per_domain must be at least 2, got {samples_per_domain}")
    })
}

fn balanced(samples: &[Sample], min_fraction: f64) -> bool {
    let n = samples.len();
    let ones = samples.iter().filter(|s| s.label == 1).count();
    let need = (min_fraction * n as f64).ceil().max(1.0) as usize;
    ones >= need && n - ones >= need
}

pub fn generate_circle(n_domains: usize, samples_per_domain: usize, seed: u64) -> Result<DomainSequence> {
    generate_circle_with(n_domains, samples_per_domain, seed, &CircleParams::default())
}

pub fn generate_circle_with(
    n_domains: usize,
    samples_per_domain: usize,
    seed: u64,
    params: &CircleParams,
) -> Result<DomainSequence> {
    check_sizes(n_domains, samples_per_domain)?;
    validate(params.std > 0.0 && params.radius > 0.0, || {
        "circle radius and std must be positive".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domains = Vec::with_capacity(n_domains);
    for t in 1..=n_domains {
        let theta = circle_center_angle(t, n_domains);
        let center = [params.radius * theta.cos(), params.radius * theta.sin()];
        let mut attempt = 0;
        let samples = loop {
            let samples: Vec<Sample> = (0..samples_per_domain)
                .map(|_| {
                    let dx: f64 = rng.sample(StandardNormal);
                    let dy: f64 = rng.sample(StandardNormal);
                    let features = vec![center[0] + params.std * dx, center[1] + params.std * dy];
                    let label = circle_label(&features, [0.0, 0.0], theta);
                    Sample {
                        features,
                        label,
                        domain_index: t,
                    }
                })
                .collect();
            if balanced(&samples, params.min_class_fraction) {
                break samples;
            }
            attempt += 1;
            if attempt >= MAX_RESAMPLES {
                return Err(Error::Validation(format!(
                    "could not draw a class-balanced circle domain {t}"
                )));
            }
        };
        domains.push(Domain { t, samples });
    }
    DomainSequence::new("circle", 2, 2, domains)
}

pub fn generate_sine(n_domains: usize, samples_per_domain: usize, seed: u64) -> Result<DomainSequence> {
    generate_sine_with(n_domains, samples_per_domain, seed, &SineParams::default())
}

pub fn generate_sine_with(
    n_domains: usize,
    samples_per_domain: usize,
    seed: u64,
    params: &SineParams,
) -> Result<DomainSequence> {
    check_sizes(n_domains, samples_per_domain)?;
    validate(
        params.x_range.0 < params.x_range.1 && params.y_range.0 < params.y_range.1,
        || "sine box ranges must be increasing".into(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domains = Vec::with_capacity(n_domains);
    for t in 1..=n_domains {
        let phase = sine_phase(t, n_domains);
        let mut attempt = 0;
        let samples = loop {
            let samples: Vec<Sample> = (0..samples_per_domain)
                .map(|_| {
                    let features = vec![
                        rng.random_range(params.x_range.0..params.x_range.1),
                        rng.random_range(params.y_range.0..params.y_range.1),
                    ];
                    let label = sine_label(&features, phase, params);
                    Sample {
                        features,
                        label,
                        domain_index: t,
                    }
                })
                .collect();
            if balanced(&samples, 0.0) {
                break samples;
            }
            attempt += 1;
            if attempt >= MAX_RESAMPLES {
                return Err(Error::Validation(format!(
                    "could not draw both classes in sine domain {t}"
                )));
            }
        };
        domains.push(Domain { t, samples });
    }
    DomainSequence::new("sine", 2, 2, domains)
}

/// Alternative boundary schedules for the circle benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DriftVariant {
    /// Starts at half the base angular rate and accelerates smoothly.
    Gradual,
    /// Rotates the boundary by `pi / 2` from the midpoint domain on.
    Abrupt,
    /// Adds zero-mean Gaussian noise of the given std (radians) per domain.
    Noise { std: f64 },
}

impl DriftVariant {
    pub const DEFAULT_NOISE_STD: f64 = 0.2;

    pub fn name(&self) -> &'static str {
        match self {
            DriftVariant::Gradual => "gradual",
            DriftVariant::Abrupt => "abrupt",
            DriftVariant::Noise { .. } => "noise",
        }
    }

    /// First domain (1-based) affected by the abrupt jump: `ceil(n / 2)`.
    pub fn midpoint(n: usize) -> usize {
        n.div_ceil(2)
    }

    /// Boundary angle for each domain `t = 1..=n` (index `t - 1`).
    pub fn boundary_angles(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (1..=n)
            .map(|t| {
                let base = circle_center_angle(t, n);
                match *self {
                    DriftVariant::Gradual => {
                        let u = (t as f64 - 1.0) / (n as f64 - 1.0);
                        PI * (0.5 * u + 0.5 * u * u)
                    }
                    DriftVariant::Abrupt => {
                        if t >= Self::midpoint(n) {
                            base + PI / 2.0
                        } else {
                            base
                        }
                    }
                    DriftVariant::Noise { std } => {
                        let e: f64 = rng.sample(StandardNormal);
                        base + std * e
                    }
                }
            })
            .collect()
    }
}

impl FromStr for DriftVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradual" => Ok(DriftVariant::Gradual),
            "abrupt" => Ok(DriftVariant::Abrupt),
            "noise" => Ok(DriftVariant::Noise {
                std: Self::DEFAULT_NOISE_STD,
            }),
            other => Err(Error::Validation(format!(
                "unknown drift variant `{other}` (expected gradual, abrupt or noise)"
            ))),
        }
    }
}

/// Relabels a circle sequence under a different boundary schedule. Each
/// domain's line is pivoted on its blob centre, so both classes stay
/// present whatever the angle. Feature vectors are left untouched.
pub fn apply_drift_variant(seq: &DomainSequence, variant: DriftVariant, seed: u64) -> Result<DomainSequence> {
    validate(seq.feature_dim == 2 && seq.num_classes == 2, || {
        "drift variants apply to 2-D binary circle sequences".into()
    })?;
    validate(seq.first_t() == 1, || "drift variants need the full sequence".into())?;
    if let DriftVariant::Noise { std } = variant {
        validate(std >= 0.0 && std.is_finite(), || "noise std must be non-negative".into())?;
    }
    let angles = variant.boundary_angles(seq.len(), seed);
    let mut out = seq.clone();
    out.name = format!("{}-{}", seq.name, variant.name());
    let n = seq.len();
    for (dom, &angle) in out.domains.iter_mut().zip(&angles) {
        let anchor = circle_center(dom.t, n);
        for s in &mut dom.samples {
            s.label = circle_label(&s.features, anchor, angle);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_shape_and_determinism() {
        let a = generate_circle(30, 100, 0).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.feature_dim, 2);
        assert_eq!(a.num_classes, 2);
        let b = generate_circle(30, 100, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_circle(30, 100, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn circle_minimum_size() {
        let s = generate_circle(2, 2, 7).unwrap();
        assert_eq!(s.len(), 2);
        for d in &s.domains {
            assert_eq!(d.len(), 2);
            assert!(d.samples.iter().all(|x| x.label < 2));
        }
    }

    #[test]
    fn circle_class_balance() {
        let s = generate_circle(30, 100, 0).unwrap();
        for d in &s.domains {
            let ones = d.labels().iter().filter(|&&y| y == 1).count();
            assert!(ones >= 20 && ones <= 80, "domain {} has {ones} positives", d.t);
        }
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(matches!(generate_circle(1, 10, 0), Err(Error::Validation(_))));
        assert!(matches!(generate_circle(5, 1, 0), Err(Error::Validation(_))));
        assert!(matches!(generate_sine(1, 10, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn sine_shape_and_tie_rule() {
        let s = generate_sine(24, 100, 0).unwrap();
        assert_eq!(s.len(), 24);
        assert_eq!(generate_sine(2, 2, 1).unwrap().len(), 2);
        let p = SineParams::default();
        // curve value at x = -1 with phase 0 is 0
        assert_eq!(sine_label(&[-1.0, 0.0], 0.0, &p), 1);
        assert_eq!(sine_label(&[-1.0, -1e-12], 0.0, &p), 0);
    }

    #[test]
    fn circle_boundary_tie_is_positive() {
        assert_eq!(circle_label(&[1.0, 0.0], [0.0, 0.0], 0.0), 1);
        assert_eq!(circle_label(&[1.0, -1e-9], [0.0, 0.0], 0.0), 0);
        assert_eq!(circle_label(&[3.0, 2.0], [1.0, 2.0], 0.0), 1);
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!("sideways".parse::<DriftVariant>().is_err());
        assert_eq!("abrupt".parse::<DriftVariant>().unwrap(), DriftVariant::Abrupt);
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = generate_circle(30, 50, 0).unwrap();
        let v = apply_drift_variant(&s, DriftVariant::Noise { std: 0.0 }, 0).unwrap();
        for (a, b) in s.domains.iter().zip(&v.domains) {
            assert_eq!(a.samples, b.samples);
        }
    }

    #[test]
    fn abrupt_matches_oracle_boundary() {
        let s = generate_circle(30, 50, 0).unwrap();
        let v = apply_drift_variant(&s, DriftVariant::Abrupt, 0).unwrap();
        let mid = DriftVariant::midpoint(30);
        for (a, b) in s.domains.iter().zip(&v.domains) {
            if a.t < mid {
                assert_eq!(a.samples, b.samples);
            } else {
                // independent oracle: a quarter turn about the blob centre, so
                // the normal points along the radius and the centre splits it
                let theta = PI * (a.t as f64 - 1.0) / 29.0;
                for (sa, sb) in a.samples.iter().zip(&b.samples) {
                    assert_eq!(sa.features, sb.features);
                    let along = theta.cos() * sa.features[0] + theta.sin() * sa.features[1];
                    let expected = usize::from(along <= 1.0);
                    assert_eq!(sb.label, expected);
                }
            }
        }
    }

    #[test]
    fn gradual_schedule_is_monotone() {
        let angles = DriftVariant::Gradual.boundary_angles(30, 3);
        assert!(angles.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(angles[0], 0.0);
        assert!((angles[29] - PI).abs() < 1e-12);
        // starts at half the base rate
        let base_step = PI / 29.0;
        assert!((angles[1] - angles[0]) < 0.6 * base_step);
    }

    #[test]
    fn variants_keep_both_classes() {
        let s = generate_circle(30, 400, 2).unwrap();
        for v in [DriftVariant::Gradual, DriftVariant::Abrupt, DriftVariant::Noise { std: 0.2 }] {
            let out = apply_drift_variant(&s, v, 5).unwrap();
            for d in &out.domains {
                let ones = d.labels().iter().filter(|&&y| y == 1).count();
                assert!((120..=280).contains(&ones), "{} domain {} has {ones}/400", v.name(), d.t);
            }
        }
    }

    #[test]
    fn variants_preserve_features() {
        let s = generate_circle(12, 30, 4).unwrap();
        for v in [DriftVariant::Gradual, DriftVariant::Abrupt, DriftVariant::Noise { std: 0.3 }] {
            let out = apply_drift_variant(&s, v, 9).unwrap();
            for (a, b) in s.domains.iter().zip(&out.domains) {
                for (sa, sb) in a.samples.iter().zip(&b.samples) {
                    assert_eq!(sa.features, sb.features);
                }
            }
        }
    }
}
