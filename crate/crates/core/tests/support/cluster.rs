// SPDX-License-Identifier: MIT OR Apache-2.0

//! Textbook silhouette and Davies-Bouldin, written out point by point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]).powi(2);
    }
    s.sqrt()
}

pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
        others.sort_unstable();
        others.dedup();
        for l in others {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
            let d = members.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / members.len() as f64;
            b = b.min(d);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

pub fn davies_bouldin(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut ls: Vec<usize> = labels.to_vec();
    ls.sort_unstable();
    ls.dedup();
    let dim = points[0].len();
    let mut centroids = Vec::new();
    let mut scatter = Vec::new();
    for &l in &ls {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, x)| **x == l).map(|(p, _)| p).collect();
        let c: Vec<f64> = (0..dim).map(|k| members.iter().map(|m| m[k]).sum::<f64>() / members.len() as f64).collect();
        scatter.push(members.iter().map(|m| dist(m, &c)).sum::<f64>() / members.len() as f64);
        centroids.push(c);
    }
    let k = ls.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let d = dist(&centroids[i], &centroids[j]);
            if i != j && d > 0.0 {
                worst = worst.max((scatter[i] + scatter[j]) / d);
            }
        }
        total += worst;
    }
    total / k as f64
}

/// 2 to 12 points in 1 to 4 dimensions with at least two distinct labels.
/// Coordinates sit on a coarse grid so duplicates and ties show up.
pub fn random_instance(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=12usize);
    let dim = rng.gen_range(1..=4usize);
    let k = rng.gen_range(2..=n.min(5));
    let points = (0..n).map(|_| (0..dim).map(|_| f64::from(rng.gen_range(0..6u8)) * 0.5).collect()).collect();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    labels[0] = 0;
    labels[1] = 1;
    (points, labels)
}
