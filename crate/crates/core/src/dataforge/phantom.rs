//! Procedural ellipsoid anatomy with optional lesions.
//!
//! Geometry lives in normalized coordinates `[-1, 1]` per axis. A layout seed
//! fixes the template (structure positions, sizes, intensity bands); every
//! sample then draws its own subject-level jitter from a per-sample stream.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{derive_seed, stream_rng, Sample};
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Upper bound on structures so intensity bands stay at least 20 apart after jitter.
pub const MAX_STRUCTURES: usize = 9;

const BACKGROUND: f64 = 10.0;
const BAND_LO: f64 = 30.0;
const BAND_HI: f64 = 240.0;
const INTENSITY_JITTER: f64 = 2.0;
const CENTER_JITTER: f64 = 0.04;
const DARK_LESION: f64 = 15.0;
const BRIGHT_LESION: f64 = 225.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnomalyKind {
    None,
    HomogeneousDark,
    HeterogeneousBright,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::None, AnomalyKind::HomogeneousDark, AnomalyKind::HeterogeneousBright];

    /// Class index in the three-way anomaly task.
    pub fn class(self) -> u8 {
        match self {
            AnomalyKind::None => 0,
            AnomalyKind::HomogeneousDark => 1,
            AnomalyKind::HeterogeneousBright => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::None => "none",
            AnomalyKind::HomogeneousDark => "homogeneous-dark",
            AnomalyKind::HeterogeneousBright => "heterogeneous-bright",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomTask {
    /// Whole images of `dim` dimensions, class = anomaly kind.
    Anatomy,
    /// 2D axial slices of a 3D anatomy, class = depth band.
    Levels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Dimension of the produced images.
    pub dim: usize,
    /// Edge length of the canvas (and the depth of the volume for level slices).
    pub size: usize,
    pub structures: usize,
    pub layout_seed: u64,
    pub noise: f64,
    pub anomaly: AnomalyKind,
    pub task: PhantomTask,
    pub levels: usize,
}

impl PhantomSpec {
    pub fn new(dim: usize) -> Self {
        PhantomSpec {
            dim,
            size: if dim == 3 { 32 } else { 64 },
            structures: 8,
            layout_seed: 0,
            noise: 6.0,
            anomaly: AnomalyKind::None,
            task: PhantomTask::Anatomy,
            levels: 9,
        }
    }

    pub fn levels(size: usize, levels: usize) -> Self {
        PhantomSpec {
            size,
            task: PhantomTask::Levels,
            levels,
            ..Self::new(2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Param(format!("phantom dim must be 2 or 3, got {}", self.dim)));
        }
        if self.structures == 0 || self.structures > MAX_STRUCTURES {
            return Err(Error::Param(format!(
                "{} structures do not fit: 1..={MAX_STRUCTURES} intensity bands available",
                self.structures
            )));
        }
        if self.size < 8 || !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Param(format!("invalid canvas {} or noise {}", self.size, self.noise)));
        }
        if self.task == PhantomTask::Levels {
            if self.dim != 2 {
                return Err(Error::Param("level slices are 2D images".into()));
            }
            if self.anomaly != AnomalyKind::None {
                return Err(Error::Param("level slices carry no anomalies".into()));
            }
            if self.levels < 2 || self.levels > self.size {
                return Err(Error::Param(format!("{} levels for depth {}", self.levels, self.size)));
            }
        }
        Ok(())
    }

    pub fn spatial(&self) -> Vec<usize> {
        vec![self.size; self.dim]
    }

    /// Structure labels 1..=M, plus M+1 for lesions when present.
    pub fn n_labels(&self) -> u8 {
        (self.structures + 1 + (self.anomaly != AnomalyKind::None) as usize) as u8
    }

    pub fn lesion_label(&self) -> u8 {
        (self.structures + 1) as u8
    }

    pub fn n_classes(&self) -> u8 {
        match self.task {
            PhantomTask::Anatomy => AnomalyKind::ALL.len() as u8,
            PhantomTask::Levels => self.levels as u8,
        }
    }

    /// Depth band of slice `z`.
    pub fn level_of(&self, z: usize) -> usize {
        z * self.levels / self.size
    }

    fn level_range(&self, level: usize) -> (usize, usize) {
        let lo = (level * self.size).div_ceil(self.levels);
        let hi = ((level + 1) * self.size).div_ceil(self.levels);
        (lo, hi)
    }

    fn anatomy_dim(&self) -> usize {
        match self.task {
            PhantomTask::Anatomy => self.dim,
            PhantomTask::Levels => 3,
        }
    }
}

#[derive(Clone, Debug)]
struct Ellipsoid {
    /// x, y, z
    center: [f64; 3],
    axes: [f64; 3],
    /// Rotation in the x-y plane.
    angle: f64,
    intensity: f64,
    label: u8,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) + (dz / self.axes[2]).powi(2) <= 1.0
    }
}

fn template(spec: &PhantomSpec) -> Result<Vec<Ellipsoid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let three_d = spec.anatomy_dim() == 3;
    let m = spec.structures;
    let mut bands: Vec<f64> = (0..m)
        .map(|k| if m == 1 { BAND_HI } else { BAND_LO + (BAND_HI - BAND_LO) * k as f64 / (m - 1) as f64 })
        .collect();
    bands.shuffle(&mut rng);
    let mut out = vec![Ellipsoid {
        center: [0.0; 3],
        axes: [0.85, 0.75, if three_d { 0.85 } else { 1.0 }],
        angle: 0.0,
        intensity: bands[0],
        label: 1,
    }];
    for k in 1..m {
        let r = 0.45 * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let z = if three_d {
            let t = if m > 2 { (k - 1) as f64 / (m - 2) as f64 } else { 0.5 };
            -0.55 + 1.1 * t + rng.random_range(-0.05..0.05)
        } else {
            0.0
        };
        out.push(Ellipsoid {
            center: [r * phi.cos(), r * phi.sin(), z],
            axes: [
                rng.random_range(0.14..0.28),
                rng.random_range(0.14..0.28),
                if three_d { rng.random_range(0.15..0.25) } else { 1.0 },
            ],
            angle: rng.random_range(-0.6..0.6),
            intensity: bands[k],
            label: (k + 1) as u8,
        });
    }
    for e in &out {
        for a in 0..spec.anatomy_dim() {
            if e.center[a].abs() + e.axes[a] * 1.1 + CENTER_JITTER > 1.0 {
                return Err(Error::Param(format!("structure {} overflows the canvas", e.label)));
            }
        }
    }
    Ok(out)
}

fn jittered<R: Rng>(template: &[Ellipsoid], three_d: bool, rng: &mut R) -> Vec<Ellipsoid> {
    template
        .iter()
        .map(|e| {
            let mut e = e.clone();
            for a in 0..if three_d { 3 } else { 2 } {
                e.center[a] += rng.random_range(-CENTER_JITTER..CENTER_JITTER);
                e.axes[a] *= rng.random_range(0.9..1.1);
            }
            e.intensity += rng.random_range(-INTENSITY_JITTER..INTENSITY_JITTER);
            e
        })
        .collect()
}

struct Lesion {
    shape: Ellipsoid,
    kind: AnomalyKind,
    freq: f64,
    phase: [f64; 2],
}

fn place_lesion<R: Rng>(kind: AnomalyKind, body: &mut [Ellipsoid], three_d: bool, label: u8, rng: &mut R) -> Lesion {
    let r = 0.42 * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let z = if three_d { rng.random_range(-0.4..0.4) } else { 0.0 };
    let radius: f64 = rng.random_range(0.16..0.24);
    let center = [r * phi.cos(), r * phi.sin(), z];
    // Neighbouring structures are pushed outward a little.
    for e in body.iter_mut().skip(1) {
        let d: Vec<f64> = (0..3).map(|a| e.center[a] - center[a]).collect();
        let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let reach = 2.5 * radius;
        if dist < reach {
            let push = 0.25 * radius * (1.0 - dist / reach);
            for a in 0..if three_d { 3 } else { 2 } {
                e.center[a] += push * d[a] / dist;
            }
        }
    }
    let intensity = match kind {
        AnomalyKind::HeterogeneousBright => BRIGHT_LESION,
        _ => DARK_LESION,
    };
    Lesion {
        shape: Ellipsoid {
            center,
            axes: [radius, radius * rng.random_range(0.8..1.2), if three_d { radius } else { 1.0 }],
            angle: rng.random_range(-1.0..1.0),
            intensity,
            label,
        },
        kind,
        freq: rng.random_range(10.0..16.0),
        phase: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
    }
}

/// Render `count` samples. Sample `i` depends only on `(spec, seed, i)`.
pub fn generate_phantoms(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let base = template(spec)?;
    let three_d = spec.anatomy_dim() == 3;
    let task_tag = match spec.task {
        PhantomTask::Anatomy => 0,
        PhantomTask::Levels => 1,
    };
    let stream_seed = derive_seed(seed, &[task_tag, spec.anomaly.class() as u64]);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Param(e.to_string()))?;
    let s = spec.size;
    let coord = |i: usize| (i as f64 + 0.5) / s as f64 * 2.0 - 1.0;

    (0..count)
        .map(|i| {
            let mut rng = stream_rng(stream_seed, i as u64);
            let mut body = jittered(&base, three_d, &mut rng);
            let (class, zs) = match spec.task {
                PhantomTask::Levels => {
                    let level = i % spec.levels;
                    let (lo, hi) = spec.level_range(level);
                    (level as u8, Some(rng.random_range(lo..hi)))
                }
                PhantomTask::Anatomy => (spec.anomaly.class(), None),
            };
            let lesion = (spec.anomaly != AnomalyKind::None)
                .then(|| place_lesion(spec.anomaly, &mut body, three_d, spec.lesion_label(), &mut rng));

            let depth = if spec.dim == 3 { s } else { 1 };
            let mut image = Vec::with_capacity(depth * s * s);
            let mut labels = Vec::with_capacity(depth * s * s);
            for zi in 0..depth {
                let z = match zs {
                    Some(z) => coord(z),
                    None if spec.dim == 3 => coord(zi),
                    None => 0.0,
                };
                for yi in 0..s {
                    for xi in 0..s {
                        let p = [coord(xi), coord(yi), z];
                        let mut value = BACKGROUND;
                        let mut label = 0u8;
                        for e in &body {
                            if e.contains(p) {
                                value = e.intensity;
                                label = e.label;
                            }
                        }
                        if let Some(l) = &lesion {
                            if l.shape.contains(p) {
                                label = l.shape.label;
                                value = match l.kind {
                                    AnomalyKind::HeterogeneousBright => {
                                        l.shape.intensity
                                            + 20.0 * (l.freq * p[0] + l.phase[0]).sin() * (l.freq * p[1] + l.phase[1]).sin()
                                            + rng.random_range(-15.0..15.0)
                                    }
                                    _ => l.shape.intensity,
                                };
                            }
                        }
                        value += noise.sample(&mut rng);
                        image.push(value.clamp(0.0, 255.0) as f32);
                        labels.push(label);
                    }
                }
            }
            let mut shape = vec![1];
            shape.extend(spec.spatial());
            Ok(Sample {
                image: Tensor::new(shape, image)?,
                labels,
                class: Some(class),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_samples_have_no_lesion() {
        let spec = PhantomSpec { size: 32, ..PhantomSpec::new(2) };
        let samples = generate_phantoms(&spec, 4, 3).unwrap();
        for s in &samples {
            assert_eq!(s.class, Some(0));
            assert!(s.labels.iter().all(|&l| l <= spec.structures as u8));
        }
    }

    #[test]
    fn lesions_are_labelled() {
        for kind in [AnomalyKind::HomogeneousDark, AnomalyKind::HeterogeneousBright] {
            let spec = PhantomSpec { size: 32, anomaly: kind, ..PhantomSpec::new(2) };
            for s in generate_phantoms(&spec, 4, 3).unwrap() {
                assert_eq!(s.class, Some(kind.class()));
                assert!(s.labels.contains(&spec.lesion_label()));
            }
        }
    }

    #[test]
    fn deterministic_and_index_local() {
        let spec = PhantomSpec::new(3);
        let a = generate_phantoms(&spec, 3, 9).unwrap();
        let b = generate_phantoms(&spec, 2, 9).unwrap();
        assert_eq!(a[..2], b[..]);
        assert_ne!(a[0], a[1]);
        let c = generate_phantoms(&spec, 1, 10).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn level_bands_cover_depth() {
        let spec = PhantomSpec::levels(32, 9);
        let mut widths = Vec::new();
        for l in 0..9 {
            let (lo, hi) = spec.level_range(l);
            widths.push(hi - lo);
            for z in lo..hi {
                assert_eq!(spec.level_of(z), l);
            }
        }
        assert_eq!(widths.iter().sum::<usize>(), 32);
        let (min, max) = (widths.iter().min().unwrap(), widths.iter().max().unwrap());
        assert!(max - min <= 1);
    }

    #[test]
    fn too_many_structures_rejected() {
        let spec = PhantomSpec { structures: 12, ..PhantomSpec::new(2) };
        assert!(generate_phantoms(&spec, 1, 0).is_err());
    }
}
