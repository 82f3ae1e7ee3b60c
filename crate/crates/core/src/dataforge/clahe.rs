//! Contrast-limited adaptive histogram equalization on 8-bit intensity bins.

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const CLAHE_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheConfig {
    /// Tile grid as (rows, columns); reduced to the image size when larger.
    pub tiles: [usize; 2],
    /// Clip limit as a multiple of the mean bin height.
    pub clip: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig { tiles: [8, 8], clip: 2.0 }
    }
}

fn bin(v: f32) -> usize {
    (v.clamp(0.0, 255.0) as usize).min(CLAHE_BINS - 1)
}

/// Tile boundaries and centres along one axis.
fn tiling(n: usize, tiles: usize) -> (Vec<usize>, Vec<f64>) {
    let bounds: Vec<usize> = (0..=tiles).map(|i| i * n / tiles).collect();
    let centres = bounds.windows(2).map(|w| (w[0] + w[1]) as f64 / 2.0).collect();
    (bounds, centres)
}

/// Lower tile index and weight of the upper neighbour for pixel centre `p`.
fn locate(p: f64, centres: &[f64]) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if p <= centres[0] {
        return (0, 0, 0.0);
    }
    if p >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.partition_point(|&c| c <= p) - 1;
    (i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i]))
}

fn tile_mapping(values: &[f32], w: usize, rows: (usize, usize), cols: (usize, usize), clip: f64) -> [f64; CLAHE_BINS] {
    let mut hist = [0.0f64; CLAHE_BINS];
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            hist[bin(values[y * w + x])] += 1.0;
        }
    }
    let total = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
    let limit = clip * total / CLAHE_BINS as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / CLAHE_BINS as f64;
    let mut map = [0.0; CLAHE_BINS];
    let mut cdf = 0.0;
    for (m, h) in map.iter_mut().zip(hist) {
        cdf += h + share;
        *m = (255.0 * cdf / total).round().min(255.0);
    }
    map
}

/// Equalize one `h x w` slice.
pub fn clahe_slice(values: &[f32], h: usize, w: usize, cfg: &ClaheConfig) -> Result<Vec<f32>> {
    if !(cfg.clip > 0.0) {
        return Err(Error::Param(format!("CLAHE clip limit must be positive, got {}", cfg.clip)));
    }
    if cfg.tiles.contains(&0) {
        return Err(Error::Param(format!("CLAHE tile grid {:?} has an empty axis", cfg.tiles)));
    }
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("clahe", format!("{} values for a {h}x{w} slice", values.len())));
    }
    let (ty, tx) = (cfg.tiles[0].min(h), cfg.tiles[1].min(w));
    let (yb, yc) = tiling(h, ty);
    let (xb, xc) = tiling(w, tx);
    let maps: Vec<[f64; CLAHE_BINS]> = (0..ty)
        .flat_map(|i| (0..tx).map(move |j| (i, j)))
        .map(|(i, j)| tile_mapping(values, w, (yb[i], yb[i + 1]), (xb[j], xb[j + 1]), cfg.clip))
        .collect();
    let mut out = Vec::with_capacity(values.len());
    for y in 0..h {
        let (y0, y1, fy) = locate(y as f64 + 0.5, &yc);
        for x in 0..w {
            let (x0, x1, fx) = locate(x as f64 + 0.5, &xc);
            let b = bin(values[y * w + x]);
            let m = |i: usize, j: usize| maps[i * tx + j][b];
            let top = (1.0 - fx) * m(y0, x0) + fx * m(y0, x1);
            let bottom = (1.0 - fx) * m(y1, x0) + fx * m(y1, x1);
            out.push(((1.0 - fy) * top + fy * bottom) as f32);
        }
    }
    Ok(out)
}

/// Equalize a `[1, H, W]` image, or each axial slice of a `[1, D, H, W]` volume.
pub fn clahe(image: &Tensor<f32>, cfg: &ClaheConfig) -> Result<Tensor<f32>> {
    let (h, w) = match image.shape() {
        [1, h, w] | [1, _, h, w] => (*h, *w),
        other => return Err(Error::shape("clahe", format!("expected [1, H, W] or [1, D, H, W], got {other:?}"))),
    };
    let mut out = Vec::with_capacity(image.len());
    for slice in image.data().chunks(h * w) {
        out.extend(clahe_slice(slice, h, w, cfg)?);
    }
    Tensor::new(image.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_stays_constant() {
        let v = vec![77.0f32; 24 * 24];
        let out = clahe_slice(&v, 24, 24, &ClaheConfig::default()).unwrap();
        assert!(out.iter().all(|&x| x == out[0]));
    }

    #[test]
    fn two_level_histogram() {
        // With a non-binding clip this is plain histogram equalization.
        let v: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 0.0 } else { 255.0 }).collect();
        let cfg = ClaheConfig { tiles: [1, 1], clip: 1000.0 };
        let out = clahe_slice(&v, 8, 8, &cfg).unwrap();
        for (a, b) in v.iter().zip(&out) {
            assert_eq!(*b, if *a == 0.0 { 128.0 } else { 255.0 });
        }
    }

    #[test]
    fn clip_must_be_positive() {
        let v = vec![0.0f32; 4];
        assert!(clahe_slice(&v, 2, 2, &ClaheConfig { tiles: [1, 1], clip: 0.0 }).is_err());
    }

    #[test]
    fn volumes_are_processed_per_slice() {
        let slice: Vec<f32> = (0..64).map(|i| (i * 3) as f32).collect();
        let mut vol = slice.clone();
        vol.extend(slice.iter().map(|v| 255.0 - v));
        let t = Tensor::new(vec![1, 2, 8, 8], vol).unwrap();
        let cfg = ClaheConfig { tiles: [2, 2], clip: 2.0 };
        let out = clahe(&t, &cfg).unwrap();
        assert_eq!(&out.data()[..64], clahe_slice(&slice, 8, 8, &cfg).unwrap().as_slice());
    }

    proptest! {
        #[test]
        fn output_in_range_and_monotone_in_single_tile(values in proptest::collection::vec(-50.0f32..400.0, 64),
                                                        clip in 0.5f64..5.0) {
            let cfg = ClaheConfig { tiles: [3, 3], clip };
            let out = clahe_slice(&values, 8, 8, &cfg).unwrap();
            prop_assert!(out.iter().all(|&v| (0.0..=255.0).contains(&v)));
            let single = clahe_slice(&values, 8, 8, &ClaheConfig { tiles: [1, 1], clip }).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    if bin(values[i]) < bin(values[j]) {
                        prop_assert!(single[i] <= single[j]);
                    }
                }
            }
        }
    }
}
