//! Deterministic synthetic drifting streams.
//!
//! A base Gaussian mixture (one unit-covariance cluster per class, means on a
//! sphere of radius 4) is pushed through a per-domain transform
//!
//! ```text
//! x = scale · R · (μ_y + ε₁) + shift + σ(severity) · ε₂
//! ```
//!
//! where `R` is a seeded orthogonal matrix built from Givens rotations and
//! `ε₁, ε₂ ~ N(0, I)`. Schedules concatenate domains into a stream of
//! labeled batches with known transition steps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};
use crate::linalg::Matrix;

/// Additive noise standard deviation for severities 1 through 5.
pub const SEVERITY_NOISE: [f64; 5] = [0.1, 0.2, 0.4, 0.8, 1.2];

/// Radius of the sphere carrying the class means.
pub const MEAN_RADIUS: f64 = 4.0;

/// Givens sweeps used to build a rotation.
const ROTATION_SWEEPS: usize = 3;

/// Class means of the base mixture. Every class has identity covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBase {
    pub means: Vec<Vec<f64>>,
}

impl GaussianBase {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

/// `K` means drawn uniformly on the sphere of radius 4 in `R^d`.
pub fn make_base(classes: usize, d_in: usize, seed: u64) -> Result<GaussianBase> {
    if classes < 2 || d_in < 2 {
        return Err(SailError::invalid(format!(
            "need K >= 2 and d >= 2, got K = {classes}, d = {d_in}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
            let n = crate::linalg::norm(&v);
            v.into_iter().map(|x| MEAN_RADIUS * x / n).collect()
        })
        .collect();
    Ok(GaussianBase { means })
}

/// One synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    #[serde(default)]
    pub rotation_seed: u64,
    /// Intensity along the rotation seed's path, in radians: every Givens
    /// angle is this times a fixed per-seed coefficient in `[-1, 1]`. 0 gives
    /// the identity; negative values walk the path the other way.
    #[serde(default)]
    pub rotation_angle: f64,
    #[serde(default)]
    pub shift_seed: u64,
    /// Euclidean norm of the mean shift; its direction comes from `shift_seed`.
    #[serde(default)]
    pub shift_norm: f64,
    /// 1 through 5.
    pub severity: u8,
    #[serde(default = "one")]
    pub scale: f64,
    /// Drops the additive noise entirely. Test-only mode.
    #[serde(default)]
    pub clean: bool,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn new(id: impl Into<String>, severity: u8) -> Self {
        Self {
            id: id.into(),
            rotation_seed: 0,
            rotation_angle: 0.0,
            shift_seed: 0,
            shift_norm: 0.0,
            severity,
            scale: 1.0,
            clean: false,
        }
    }

    pub fn with_rotation(mut self, seed: u64, angle: f64) -> Self {
        self.rotation_seed = seed;
        self.rotation_angle = angle;
        self
    }

    pub fn with_shift(mut self, seed: u64, norm: f64) -> Self {
        self.shift_seed = seed;
        self.shift_norm = norm;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Base clusters untouched: identity rotation, no shift, unit scale, no noise.
    pub fn clean(id: impl Into<String>) -> Self {
        Self {
            clean: true,
            ..Self::new(id, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(SailError::Config(format!(
                "domain `{}`: severity must be in 1..=5, got {}",
                self.id, self.severity
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(SailError::Config(format!(
                "domain `{}`: scale must be positive",
                self.id
            )));
        }
        if !self.rotation_angle.is_finite() || !self.shift_norm.is_finite() || self.shift_norm < 0.0 {
            return Err(SailError::Config(format!(
                "domain `{}`: rotation angle and shift norm must be finite",
                self.id
            )));
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        if self.clean {
            0.0
        } else {
            severity_noise(self.severity)
        }
    }
}

/// Noise standard deviation for a severity level in 1..=5.
pub fn severity_noise(severity: u8) -> f64 {
    SEVERITY_NOISE[(severity.clamp(1, 5) - 1) as usize]
}

/// Orthogonal `d × d` matrix: a product of Givens rotations on seeded
/// disjoint coordinate pairs. The pairs and the per-rotation coefficients
/// `c ∈ [-1, 1]` depend only on `seed`; each rotation turns by `angle · c`,
/// so a fixed seed traces a continuous path through the identity.
pub fn rotation(d: usize, seed: u64, angle: f64) -> Matrix {
    let mut r = Matrix::identity(d);
    if angle == 0.0 {
        return r;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims: Vec<usize> = (0..d).collect();
    for _ in 0..ROTATION_SWEEPS {
        dims.shuffle(&mut rng);
        for pair in dims.chunks_exact(2) {
            let theta = angle * rng.random_range(-1.0..=1.0);
            let (s, c) = theta.sin_cos();
            let (p, q) = (pair[0], pair[1]);
            for j in 0..d {
                let a = r[(p, j)];
                let b = r[(q, j)];
                r[(p, j)] = c * a - s * b;
                r[(q, j)] = s * a + c * b;
            }
        }
    }
    r
}

/// Deterministic mean-shift vector with norm `norm`.
pub fn mean_shift(d: usize, seed: u64, norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; d];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = crate::linalg::norm(&v);
    v.into_iter().map(|x| norm * x / n).collect()
}

/// A domain with its transform materialized for a given dimension.
#[derive(Debug, Clone)]
pub struct DomainTransform {
    pub spec: DomainSpec,
    rotation: Matrix,
    shift: Vec<f64>,
}

impl DomainTransform {
    pub fn new(spec: &DomainSpec, d: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            rotation: rotation(d, spec.rotation_seed, spec.rotation_angle),
            shift: mean_shift(d, spec.shift_seed, spec.shift_norm),
        })
    }

    pub fn rotation(&self) -> &Matrix {
        &self.rotation
    }
}

/// A labeled batch drawn from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub domain_id: String,
}

/// Balanced labels: a shuffled round-robin over a random class order. With
/// `skew > 0`, that fraction of samples is reassigned to class 0.
pub fn balanced_labels<R: Rng + ?Sized>(n: usize, classes: usize, skew: f64, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(rng);
    let mut labels: Vec<usize> = (0..n).map(|i| order[i % classes]).collect();
    labels.shuffle(rng);
    if skew > 0.0 {
        for y in labels.iter_mut() {
            if rng.random::<f64>() < skew {
                *y = 0;
            }
        }
    }
    labels
}

/// Draws `x` for fixed labels.
pub fn sample_features<R: Rng + ?Sized>(
    base: &GaussianBase,
    domain: &DomainTransform,
    labels: &[usize],
    rng: &mut R,
) -> Matrix {
    let d = base.dim();
    let sigma = domain.spec.noise_std();
    let mut x = Matrix::zeros(labels.len(), d);
    let mut latent = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        for (l, m) in latent.iter_mut().zip(&base.means[y]) {
            *l = m + rng.sample::<f64, _>(StandardNormal);
        }
        let rotated = domain.rotation.mat_vec(&latent);
        let row = x.row_mut(i);
        for j in 0..d {
            let noise = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            row[j] = domain.spec.scale * rotated[j] + domain.shift[j] + noise;
        }
    }
    x
}

pub fn sample_batch<R: Rng + ?Sized>(
    base: &GaussianBase,
    domain: &DomainTransform,
    n: usize,
    skew: f64,
    rng: &mut R,
) -> Result<Batch> {
    if n < 2 {
        return Err(SailError::InvalidBatch(format!("batch size must be >= 2, got {n}")));
    }
    let labels = balanced_labels(n, base.classes(), skew, rng);
    let features = sample_features(base, domain, &labels, rng);
    Ok(Batch {
        features,
        labels,
        domain_id: domain.spec.id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub domain: DomainSpec,
    pub batches: usize,
}

/// Ordered domain segments making up one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSchedule {
    pub segments: Vec<Segment>,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of labels forced to class 0.
    #[serde(default)]
    pub label_skew: f64,
}

impl StreamSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(SailError::Config("schedule has no segments".into()));
        }
        if self.batch_size < 2 {
            return Err(SailError::Config("batch_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.label_skew) {
            return Err(SailError::Config("label_skew must be in [0, 1)".into()));
        }
        for s in &self.segments {
            if s.batches == 0 {
                return Err(SailError::Config(format!(
                    "segment `{}` has zero batches",
                    s.domain.id
                )));
            }
            s.domain.validate()?;
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches).sum()
    }

    /// Steps after which the domain changes (prefix sums of batch counts,
    /// excluding the final one).
    pub fn transitions(&self) -> Vec<usize> {
        let mut acc = 0;
        let mut out = Vec::new();
        for s in &self.segments[..self.segments.len().saturating_sub(1)] {
            acc += s.batches;
            out.push(acc);
        }
        out
    }

    /// Iterator over all batches in order. Deterministic in `seed`.
    pub fn stream(&self, base: &GaussianBase) -> Result<Stream<'_>> {
        self.validate()?;
        let transforms = self
            .segments
            .iter()
            .map(|s| DomainTransform::new(&s.domain, base.dim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stream {
            schedule: self,
            base: base.clone(),
            transforms,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            segment: 0,
            emitted_in_segment: 0,
        })
    }
}

pub struct Stream<'a> {
    schedule: &'a StreamSchedule,
    base: GaussianBase,
    transforms: Vec<DomainTransform>,
    rng: ChaCha8Rng,
    segment: usize,
    emitted_in_segment: usize,
}

impl Iterator for Stream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        while self.segment < self.schedule.segments.len()
            && self.emitted_in_segment >= self.schedule.segments[self.segment].batches
        {
            self.segment += 1;
            self.emitted_in_segment = 0;
        }
        let t = self.transforms.get(self.segment)?;
        self.emitted_in_segment += 1;
        Some(
            sample_batch(
                &self.base,
                t,
                self.schedule.batch_size,
                self.schedule.label_skew,
                &mut self.rng,
            )
            .expect("batch size validated"),
        )
    }
}

/// Labeled pool of `n` samples from one domain (pretraining and fitting).
pub fn sample_pool(base: &GaussianBase, domain: &DomainSpec, n: usize, seed: u64) -> Result<Batch> {
    let t = DomainTransform::new(domain, base.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch(base, &t, n, 0.0, &mut rng)
}
