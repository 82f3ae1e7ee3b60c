//! Lloyd's k-means on scalar intensities.

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Ascending.
    pub centroids: Vec<f64>,
    /// Index into `centroids` per value.
    pub labels: Vec<u8>,
    /// Within-cluster sum of squares after each update.
    pub objective: Vec<f64>,
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = j;
        }
    }
    best
}

fn quantiles(sorted: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|j| sorted[(((j as f64 + 0.5) / k as f64) * sorted.len() as f64) as usize])
        .collect()
}

/// Centroids start at the k evenly spaced quantiles (falling back to quantiles of
/// the distinct values if those coincide), so the result is deterministic.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<KMeans> {
    if k < 2 || k > u8::MAX as usize {
        return Err(Error::Param(format!("k must be in [2, 255], got {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("k-means input contains non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Degenerate {
            op: "kmeans_labels",
            detail: format!("{} distinct intensities for {k} clusters", distinct.len()),
        });
    }
    let mut centroids = quantiles(&sorted, k);
    if centroids.windows(2).any(|w| w[0] == w[1]) {
        centroids = quantiles(&distinct, k);
    }

    let mut assign = vec![0usize; values.len()];
    let mut objective = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, &v) in assign.iter_mut().zip(values) {
            *a = nearest(v, &centroids);
        }
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for (&a, &v) in assign.iter().zip(values) {
            sum[a] += v;
            count[a] += 1;
        }
        let mut moved = 0.0f64;
        for j in 0..k {
            // An emptied cluster keeps its centroid.
            if count[j] > 0 {
                let c = sum[j] / count[j] as f64;
                moved = moved.max((c - centroids[j]).abs());
                centroids[j] = c;
            }
        }
        objective.push(assign.iter().zip(values).map(|(&a, &v)| (v - centroids[a]).powi(2)).sum());
        if moved < KMEANS_TOLERANCE {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let mut rank = vec![0u8; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r as u8;
    }
    Ok(KMeans {
        centroids: order.iter().map(|&j| centroids[j]).collect(),
        labels: assign.iter().map(|&a| rank[a]).collect(),
        objective,
    })
}

/// Cluster the intensities of an image into `k` labels ordered by brightness.
pub fn kmeans_labels(image: &Tensor<f32>, k: usize) -> Result<Vec<u8>> {
    let values: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    Ok(kmeans_1d(&values, k)?.labels)
}
