//! Rigid-ish augmentation: in-plane rotation, shift, isotropic zoom and flips.

use rand::Rng;

use super::Sample;
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub probability: f64,
    /// Maximum absolute in-plane rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute shift as a fraction of each axis length.
    pub shift: f64,
    pub zoom: (f64, f64),
    /// Whether each spatial axis may be flipped; missing entries mean no.
    pub flip_axes: Vec<bool>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            probability: 0.6,
            rotation_deg: 10.0,
            shift: 0.1,
            zoom: (0.9, 1.1),
            flip_axes: vec![true; 3],
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Param(format!("augmentation probability {} outside [0, 1]", self.probability)));
        }
        let (lo, hi) = self.zoom;
        if !(lo > 0.0 && lo <= hi) || self.rotation_deg < 0.0 || self.shift < 0.0 {
            return Err(Error::Param(format!("invalid augmentation ranges {self:?}")));
        }
        Ok(())
    }
}

/// A concrete transform. Rotation acts in the plane of the last two axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub rotation_deg: f64,
    /// Per spatial axis, as a fraction of the axis length.
    pub shift: Vec<f64>,
    pub zoom: f64,
    pub flip: Vec<bool>,
}

impl Transform {
    pub fn identity(dim: usize) -> Self {
        Transform {
            rotation_deg: 0.0,
            shift: vec![0.0; dim],
            zoom: 1.0,
            flip: vec![false; dim],
        }
    }

    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, dim: usize, rng: &mut R) -> Self {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(rng, policy.rotation_deg);
        let shift = (0..dim).map(|_| sym(rng, policy.shift)).collect();
        let (lo, hi) = policy.zoom;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip = (0..dim)
            .map(|a| policy.flip_axes.get(a).copied().unwrap_or(false) && rng.random_bool(0.5))
            .collect();
        Transform {
            rotation_deg,
            shift,
            zoom,
            flip,
        }
    }

    /// Source coordinate (axis order) for output coordinate `q`.
    fn source(&self, q: &[f64], dims: &[usize]) -> Vec<f64> {
        let d = dims.len();
        let centre: Vec<f64> = dims.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
        let mut p: Vec<f64> = (0..d)
            .map(|a| {
                let v = if self.flip[a] { dims[a] as f64 - 1.0 - q[a] } else { q[a] };
                v - centre[a] - self.shift[a] * dims[a] as f64
            })
            .collect();
        if self.rotation_deg != 0.0 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (y, x) = (p[d - 2], p[d - 1]);
            p[d - 2] = c * y + s * x;
            p[d - 1] = -s * y + c * x;
        }
        (0..d).map(|a| p[a] / self.zoom + centre[a]).collect()
    }

    /// Resample image (bilinear) and labels (nearest). Points mapped from outside
    /// the canvas get `fill` and label 0.
    pub fn apply(&self, sample: &Sample, fill: f32) -> Result<Sample> {
        let dims = sample.spatial().to_vec();
        let d = dims.len();
        if self.shift.len() != d || self.flip.len() != d {
            return Err(Error::shape("augment", format!("transform for {} axes on {dims:?}", self.shift.len())));
        }
        let n: usize = dims.iter().product();
        let mut strides = vec![1usize; d];
        for a in (0..d - 1).rev() {
            strides[a] = strides[a + 1] * dims[a + 1];
        }
        let img = sample.image.data();
        let mut image = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut q = vec![0.0; d];
        for idx in 0..n {
            let mut rem = idx;
            for a in 0..d {
                q[a] = (rem / strides[a]) as f64;
                rem %= strides[a];
            }
            let src = self.source(&q, &dims);
            const EPS: f64 = 1e-9;
            let inside = src.iter().zip(&dims).all(|(&s, &m)| s >= -EPS && s <= m as f64 - 1.0 + EPS);
            if !inside {
                image.push(fill);
                labels.push(0);
                continue;
            }
            let mut nn = 0;
            for a in 0..d {
                nn += (src[a].round() as usize).min(dims[a] - 1) * strides[a];
            }
            labels.push(sample.labels[nn]);
            // Multilinear interpolation over the 2^d corners with non-zero weight.
            let base: Vec<usize> = src.iter().zip(&dims).map(|(&s, &m)| (s.max(0.0).floor() as usize).min(m - 1)).collect();
            let frac: Vec<f64> = src.iter().zip(&base).map(|(&s, &b)| (s - b as f64).max(0.0)).collect();
            let mut value = 0.0f64;
            for corner in 0..1usize << d {
                let mut w = 1.0;
                let mut off = 0;
                for a in 0..d {
                    let hi = corner >> a & 1 == 1;
                    let wa = if hi { frac[a] } else { 1.0 - frac[a] };
                    if wa == 0.0 {
                        w = 0.0;
                        break;
                    }
                    let i = if hi { (base[a] + 1).min(dims[a] - 1) } else { base[a] };
                    w *= wa;
                    off += i * strides[a];
                }
                if w != 0.0 {
                    value += w * img[off] as f64;
                }
            }
            image.push(value as f32);
        }
        Ok(Sample {
            image: Tensor::new(sample.image.shape().to_vec(), image)?,
            labels,
            class: sample.class,
        })
    }
}

/// Intensity used for regions moved in from outside the canvas: the mean
/// background intensity when labels mark one, the image minimum otherwise.
pub fn background_fill(sample: &Sample) -> f32 {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (&v, &l) in sample.image.data().iter().zip(&sample.labels) {
        if l == 0 {
            sum += v as f64;
            count += 1;
        }
    }
    if count > 0 {
        (sum / count as f64) as f32
    } else {
        sample.image.data().iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// With probability `policy.probability`, a transform drawn within the policy ranges.
pub fn draw_transform<R: Rng + ?Sized>(policy: &AugmentPolicy, dim: usize, rng: &mut R) -> Option<Transform> {
    if policy.probability == 0.0 || rng.random::<f64>() >= policy.probability {
        return None;
    }
    Some(Transform::sample(policy, dim, rng))
}

/// With probability `policy.probability`, apply a randomly drawn transform.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, policy: &AugmentPolicy, rng: &mut R) -> Result<Sample> {
    policy.validate()?;
    match draw_transform(policy, sample.spatial().len(), rng) {
        Some(t) => t.apply(sample, background_fill(sample)),
        None => Ok(sample.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(dims: &[usize]) -> Sample {
        let n: usize = dims.iter().product();
        let mut shape = vec![1];
        shape.extend_from_slice(dims);
        Sample {
            image: Tensor::new(shape, (0..n).map(|i| ((i * 37) % 101) as f32).collect()).unwrap(),
            labels: (0..n).map(|i| (i % 4) as u8).collect(),
            class: Some(1),
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let s = toy(&[8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentPolicy::disabled(), &mut rng).unwrap(), s);
    }

    #[test]
    fn identity_transform_and_double_flip() {
        for dims in [vec![6, 9], vec![4, 6, 5]] {
            let s = toy(&dims);
            let out = Transform::identity(dims.len()).apply(&s, 0.0).unwrap();
            for (a, b) in out.image.data().iter().zip(s.image.data()) {
                assert!((a - b).abs() < 1e-6);
            }
            assert_eq!(out.labels, s.labels);
            for axis in 0..dims.len() {
                let mut t = Transform::identity(dims.len());
                t.flip[axis] = true;
                let once = t.apply(&s, 0.0).unwrap();
                assert_ne!(once, s);
                assert_eq!(t.apply(&once, 0.0).unwrap(), s);
            }
        }
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let s = toy(&[5, 5]);
        let t = Transform { rotation_deg: 90.0, ..Transform::identity(2) };
        let out = t.apply(&s, 0.0).unwrap();
        // Output (y, x) reads source (x, 4 - y).
        for y in 0..5 {
            for x in 0..5 {
                let src = x * 5 + (4 - y);
                assert!((out.image.data()[y * 5 + x] - s.image.data()[src]).abs() < 1e-3);
                assert_eq!(out.labels[y * 5 + x], s.labels[src]);
            }
        }
    }

    proptest! {
        #[test]
        fn labels_stay_within_source_set(seed in 0u64..500) {
            let s = toy(&[10, 10]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = AugmentPolicy { probability: 1.0, rotation_deg: 30.0, shift: 0.3, ..AugmentPolicy::default() };
            let out = augment(&s, &policy, &mut rng).unwrap();
            prop_assert!(out.labels.iter().all(|l| s.labels.contains(l) || *l == 0));
            prop_assert_eq!(out.class, s.class);
            prop_assert!(out.image.is_finite());
        }
    }
}
