//! Synthetic dental-arch point clouds and the augmentations used in
//! training.
//!
//! A generated cloud has `C` classes: class 0 is a gum-like background
//! band and classes 1..C-1 are tooth clusters whose centers sit on a
//! circular arch in index order, so spatially adjacent teeth have adjacent
//! class indices. Two annotation-noise modes corrupt the labels, both
//! producing the adjacent-class confusion the transition machinery is
//! meant to absorb: tooth points near a class boundary flip to their
//! second-nearest tooth class point by point, and whole tooth clusters
//! shift to a neighboring class index, the off-by-one numbering mistake.
//!
//! Augmentation is a rotation about the vertical (z) axis through the
//! origin, an optional per-axis rescale, then per-coordinate Gaussian
//! jitter scaled by the cloud's bounding-box diagonal. Weak and strong
//! presets differ only in magnitude. Point order and labels are preserved.

mod io;

pub use io::{read_cloud, write_cloud};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A 3-D point cloud with optional per-point labels.
///
/// Invariants: at least one point, at least two classes, finite
/// coordinates, and labels (when present) one per point in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    labels: Option<Vec<usize>>,
    n_classes: usize,
}

impl PointCloud {
    pub fn new(
        coords: Vec<[f64; 3]>,
        labels: Option<Vec<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Param("point cloud must have at least one point".into()));
        }
        if n_classes < 2 {
            return Err(Error::Param(format!(
                "point cloud needs >= 2 classes, got {n_classes}"
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Param("point cloud contains non-finite coordinates".into()));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} points",
                    l.len(),
                    coords.len()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= n_classes) {
                return Err(Error::Param(format!(
                    "label {bad} out of range for {n_classes} classes"
                )));
            }
        }
        Ok(PointCloud {
            coords,
            labels,
            n_classes,
        })
    }

    pub fn n_points(&self) -> usize {
        self.coords.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Same geometry with labels removed.
    pub fn without_labels(&self) -> PointCloud {
        PointCloud {
            coords: self.coords.clone(),
            labels: None,
            n_classes: self.n_classes,
        }
    }

    /// Euclidean length of the axis-aligned bounding-box diagonal; zero
    /// for a single point.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.coords {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut sq = 0.0;
        for a in 0..3 {
            let d = hi[a] - lo[a];
            sq += d * d;
        }
        sq.sqrt()
    }
}

/// Shape parameters of the synthetic arch generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    /// Total classes: background 0 plus `n_classes - 1` teeth.
    pub n_classes: usize,
    pub n_points: usize,
    /// Radius of the circular arch carrying the tooth centers.
    pub arch_radius: f64,
    /// Arc length between adjacent tooth centers.
    pub tooth_spacing: f64,
    /// Per-axis standard deviation of each tooth cluster.
    pub cluster_spread: f64,
    /// Probability that a tooth point in a boundary region is relabeled
    /// to its second-nearest tooth class.
    pub boundary_jitter: f64,
    /// Probability that a whole tooth cluster's annotation shifts to an
    /// adjacent class, the off-by-one numbering mistake. The point
    /// nearest the cluster center keeps its label so every class stays
    /// populated.
    pub tooth_mislabel: f64,
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            n_classes: 9,
            n_points: 1024,
            arch_radius: 0.65,
            tooth_spacing: 0.25,
            cluster_spread: 0.05,
            boundary_jitter: 0.15,
            tooth_mislabel: 0.0,
            seed: 0,
        }
    }
}

/// Height of tooth-crown centers above the x-y plane.
const TOOTH_HEIGHT: f64 = 0.15;
/// Vertical extent of the background band (below the teeth).
const GUM_Z_RANGE: (f64, f64) = (-0.45, -0.05);
/// Fraction of points assigned to the background class, capacity allowing.
const BACKGROUND_FRACTION: f64 = 0.35;
/// A point is "boundary" when its second-nearest tooth center is closer
/// than this multiple of the nearest one.
const BOUNDARY_RATIO: f64 = 1.5;

/// Tooth-center angles on the arch, ordered by class index.
fn tooth_angles(spec: &ArchSpec) -> Vec<f64> {
    let teeth = spec.n_classes - 1;
    let step = spec.tooth_spacing / spec.arch_radius;
    (0..teeth)
        .map(|t| {
            let offset = t as f64 - (teeth as f64 - 1.0) / 2.0;
            std::f64::consts::FRAC_PI_2 + offset * step
        })
        .collect()
}

/// Generates one labeled arch cloud. Deterministic in `spec`, every class
/// receives at least one point, and coordinates stay within [-1, 1].
pub fn generate_arch(spec: &ArchSpec) -> Result<PointCloud> {
    if spec.n_classes < 2 {
        return Err(Error::Param(format!(
            "arch needs >= 2 classes, got {}",
            spec.n_classes
        )));
    }
    if spec.n_points < spec.n_classes {
        return Err(Error::Param(format!(
            "{} points cannot cover {} classes",
            spec.n_points, spec.n_classes
        )));
    }
    if spec.arch_radius <= 0.0 || spec.tooth_spacing <= 0.0 {
        return Err(Error::Param("arch radius and tooth spacing must be positive".into()));
    }
    if spec.cluster_spread < 0.0 {
        return Err(Error::Param("cluster spread must be non-negative".into()));
    }
    if !(0.0..=1.0).contains(&spec.boundary_jitter) {
        return Err(Error::Param(format!(
            "boundary jitter {} outside [0, 1]",
            spec.boundary_jitter
        )));
    }
    if !(0.0..=1.0).contains(&spec.tooth_mislabel) {
        return Err(Error::Param(format!(
            "tooth mislabel {} outside [0, 1]",
            spec.tooth_mislabel
        )));
    }

    let teeth = spec.n_classes - 1;
    let angles = tooth_angles(spec);
    let centers: Vec<[f64; 3]> = angles
        .iter()
        .map(|&a| {
            [
                spec.arch_radius * a.cos(),
                spec.arch_radius * a.sin(),
                TOOTH_HEIGHT,
            ]
        })
        .collect();

    // Class point budget: background takes its fraction but never starves
    // a tooth; leftovers go to the first teeth.
    let n = spec.n_points;
    let background = ((n as f64 * BACKGROUND_FRACTION).round() as usize)
        .max(1)
        .min(n - teeth);
    let remaining = n - background;
    let base = remaining / teeth;
    let extra = remaining % teeth;
    let mut counts = vec![background];
    for t in 0..teeth {
        counts.push(base + usize::from(t < extra));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let spread = Normal::new(0.0, spec.cluster_spread).expect("spread validated");
    let band = Normal::new(0.0, spec.cluster_spread * 1.5).expect("spread validated");
    let step = spec.tooth_spacing / spec.arch_radius;
    let (angle_lo, angle_hi) = (
        angles[0] - 0.5 * step,
        angles[teeth - 1] + 0.5 * step,
    );

    let mut coords = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..counts[0] {
        let phi = if angle_lo < angle_hi {
            rng.gen_range(angle_lo..angle_hi)
        } else {
            angle_lo
        };
        let r = spec.arch_radius + band.sample(&mut rng);
        let z = rng.gen_range(GUM_Z_RANGE.0..GUM_Z_RANGE.1);
        coords.push(clamp_unit([r * phi.cos(), r * phi.sin(), z]));
        labels.push(0);
    }
    for (t, center) in centers.iter().enumerate() {
        for _ in 0..counts[t + 1] {
            let p = [
                center[0] + spread.sample(&mut rng),
                center[1] + spread.sample(&mut rng),
                center[2] + spread.sample(&mut rng),
            ];
            coords.push(clamp_unit(p));
            labels.push(t + 1);
        }
    }

    // Annotation noise: boundary tooth points flip to the second-nearest
    // tooth class with the configured probability. The adjacency of tooth
    // centers makes this adjacent-index confusion.
    if spec.boundary_jitter > 0.0 && teeth >= 2 {
        for (p, label) in coords.iter_mut().zip(labels.iter_mut()) {
            if *label == 0 {
                continue;
            }
            let own = *label - 1;
            let d_own = sq_dist(p, &centers[own]);
            let mut second = usize::MAX;
            let mut d_second = f64::INFINITY;
            for (t, c) in centers.iter().enumerate() {
                if t == own {
                    continue;
                }
                let d = sq_dist(p, c);
                if d < d_second {
                    d_second = d;
                    second = t;
                }
            }
            let flip: f64 = rng.gen();
            if d_second <= BOUNDARY_RATIO * BOUNDARY_RATIO * d_own
                && flip < spec.boundary_jitter
            {
                *label = second + 1;
            }
        }
    }

    // Annotation noise: a whole tooth's labels shift by one class index
    // with the configured probability, the off-by-one numbering mistake.
    // The direction is random for interior teeth and inward at the ends,
    // so the shift never leaves the tooth range. Shifts are decided for
    // every tooth first and applied to the pre-pass labels in one step,
    // so one tooth's shift never feeds the next tooth's test. The point
    // nearest each shifted cluster center keeps its label, preserving
    // class coverage.
    if spec.tooth_mislabel > 0.0 && teeth >= 2 {
        let mut shift = vec![0isize; teeth];
        for t in 0..teeth {
            if rng.gen::<f64>() >= spec.tooth_mislabel {
                continue;
            }
            shift[t] = if t == 0 {
                1
            } else if t == teeth - 1 {
                -1
            } else if rng.gen::<bool>() {
                1
            } else {
                -1
            };
        }
        let before = labels.clone();
        for t in 0..teeth {
            if shift[t] == 0 {
                continue;
            }
            let mut anchor = usize::MAX;
            let mut d_anchor = f64::INFINITY;
            for (i, p) in coords.iter().enumerate() {
                if before[i] == t + 1 {
                    let d = sq_dist(p, &centers[t]);
                    if d < d_anchor {
                        d_anchor = d;
                        anchor = i;
                    }
                }
            }
            for i in 0..before.len() {
                if before[i] == t + 1 && i != anchor {
                    labels[i] = (t as isize + 1 + shift[t]) as usize;
                }
            }
        }
    }

    PointCloud::new(coords, Some(labels), spec.n_classes)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn clamp_unit(p: [f64; 3]) -> [f64; 3] {
    [
        p[0].clamp(-1.0, 1.0),
        p[1].clamp(-1.0, 1.0),
        p[2].clamp(-1.0, 1.0),
    ]
}

/// Magnitudes of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotation about z is drawn uniformly from +-this many degrees.
    pub max_rotation_deg: f64,
    /// Jitter standard deviation as a fraction of the bounding-box
    /// diagonal.
    pub jitter_scale: f64,
    /// Per-axis scale factors drawn uniformly from this range, if any.
    pub scale_range: Option<(f64, f64)>,
}

impl AugmentParams {
    /// The weak branch: small rotation and jitter, no rescale.
    pub fn weak() -> Self {
        AugmentParams {
            max_rotation_deg: 5.0,
            jitter_scale: 0.005,
            scale_range: None,
        }
    }

    /// The strong branch: large rotation, anisotropic rescale, heavier
    /// jitter.
    pub fn strong() -> Self {
        AugmentParams {
            max_rotation_deg: 30.0,
            jitter_scale: 0.02,
            scale_range: Some((0.8, 1.2)),
        }
    }
}

/// Applies rotate-then-scale-then-jitter with randomness drawn from
/// `seed`. Labels and point order are untouched; the origin is a fixed
/// point of rotation and scaling.
pub fn augment(cloud: &PointCloud, params: &AugmentParams, seed: u64) -> PointCloud {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let angle = if params.max_rotation_deg > 0.0 {
        rng.gen_range(-params.max_rotation_deg..params.max_rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let (sin, cos) = angle.sin_cos();
    let scale = match params.scale_range {
        Some((lo, hi)) if hi > lo => [
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
        ],
        Some((lo, _)) => [lo, lo, lo],
        None => [1.0, 1.0, 1.0],
    };
    let sd = params.jitter_scale * cloud.bbox_diagonal();
    let jitter = Normal::new(0.0, sd).expect("sd is finite and non-negative");

    let coords = cloud
        .coords()
        .iter()
        .map(|p| {
            let rotated = [
                cos * p[0] - sin * p[1],
                sin * p[0] + cos * p[1],
                p[2],
            ];
            [
                rotated[0] * scale[0] + jitter.sample(&mut rng),
                rotated[1] * scale[1] + jitter.sample(&mut rng),
                rotated[2] * scale[2] + jitter.sample(&mut rng),
            ]
        })
        .collect();
    PointCloud {
        coords,
        labels: cloud.labels.clone(),
        n_classes: cloud.n_classes,
    }
}

/// Weak-branch augmentation.
pub fn augment_weak(cloud: &PointCloud, seed: u64) -> PointCloud {
    augment(cloud, &AugmentParams::weak(), seed)
}

/// Strong-branch augmentation.
pub fn augment_strong(cloud: &PointCloud, seed: u64) -> PointCloud {
    augment(cloud, &AugmentParams::strong(), seed)
}

/// The two augmented views of one source cloud used by a training step.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub weak: PointCloud,
    pub strong: PointCloud,
}

impl AugmentedPair {
    pub fn from_cloud(cloud: &PointCloud, weak_seed: u64, strong_seed: u64) -> Self {
        AugmentedPair {
            weak: augment_weak(cloud, weak_seed),
            strong: augment_strong(cloud, strong_seed),
        }
    }
}
