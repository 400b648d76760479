//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use pareidolia_core::backbone::FeatureMatrix;
use pareidolia_core::dataset::Orientation;
use pareidolia_core::stats::{draw_index, resample_rng};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn matrix(prefix: &str, rows: &[Vec<f32>]) -> FeatureMatrix {
    let cols = rows.first().map_or(0, Vec::len);
    let ids = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
    FeatureMatrix::new(cols, rows.concat(), ids, "0".repeat(32), Orientation::Upright).unwrap()
}

/// Two-pass Pearson r and a two-tailed p from statrs; `None` for a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = n - 2.0;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs())
    };
    Some((r, p))
}

/// Class code per unit: 0 none, 1 face, 2 object, 3 overlap.
pub fn classes(faces: &[Vec<f32>], fc: &[f64], objects: &[Vec<f32>], oc: &[f64], alpha: f64) -> Vec<u8> {
    let d = faces[0].len();
    (0..d)
        .map(|j| {
            let col = |rows: &[Vec<f32>]| rows.iter().map(|r| r[j] as f64).collect::<Vec<_>>();
            let sig = |rows: &[Vec<f32>], c: &[f64]| pearson(&col(rows), c).is_some_and(|(_, p)| p < alpha);
            match (sig(faces, fc), sig(objects, oc)) {
                (true, true) => 3,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 0,
            }
        })
        .collect()
}

fn mean_rows(rows: &[Vec<f32>], idx: &[usize], j: usize) -> f64 {
    let mut s = 0.0;
    for &i in idx {
        s += rows[i][j] as f64;
    }
    s / idx.len() as f64
}

fn dist(a: &[Vec<f32>], ia: &[usize], b: &[Vec<f32>], ib: &[usize], units: &[usize]) -> f64 {
    let mut s = 0.0;
    for &j in units {
        let diff = mean_rows(a, ia, j) - mean_rows(b, ib, j);
        s += diff * diff;
    }
    s.sqrt()
}

fn type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// (distance, ci_low, ci_high) for one pair and unit subset, or `None` for
/// an empty subset. Replicate `i` draws `a` indices then `b` indices from
/// substream `i`.
pub fn distance_with_ci(
    a: &[Vec<f32>],
    b: &[Vec<f32>],
    units: &[usize],
    n_resamples: usize,
    seed: u64,
    level: f64,
) -> Option<(f64, f64, f64)> {
    if units.is_empty() {
        return None;
    }
    let all_a: Vec<usize> = (0..a.len()).collect();
    let all_b: Vec<usize> = (0..b.len()).collect();
    let point = dist(a, &all_a, b, &all_b, units);
    let mut reps = Vec::with_capacity(n_resamples);
    for i in 0..n_resamples as u64 {
        let mut rng = resample_rng(seed, i);
        let ia: Vec<usize> = (0..a.len()).map(|_| draw_index(&mut rng, a.len())).collect();
        let ib: Vec<usize> = (0..b.len()).map(|_| draw_index(&mut rng, b.len())).collect();
        reps.push(dist(a, &ia, b, &ib, units));
    }
    reps.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Some((point, type7(&reps, alpha / 2.0), type7(&reps, 1.0 - alpha / 2.0)))
}

pub fn rows(v: &[[f32; 4]]) -> Vec<Vec<f32>> {
    v.iter().map(|r| r.to_vec()).collect()
}

/// Five images per category, four units.
pub fn five_image_fixture() -> (Vec<Vec<f32>>, Vec<f64>, Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<f64>) {
    let faces = rows(&[
        [0.9, 0.1, 2.0, 1.0],
        [0.2, 0.4, 2.5, 1.1],
        [1.0, 0.3, 1.5, 0.9],
        [0.1, 0.2, 2.2, 1.4],
        [0.8, 0.5, 1.9, 1.2],
    ]);
    let fc = vec![1., 0., 1., 0., 1.];
    let pareidolia = rows(&[
        [0.5, 0.6, 1.0, 0.2],
        [0.4, 0.9, 1.2, 0.1],
        [0.7, 0.7, 0.8, 0.3],
        [0.3, 0.8, 1.1, 0.6],
        [0.6, 0.5, 0.9, 0.4],
    ]);
    let objects = rows(&[
        [0.2, 1.0, 0.1, 0.5],
        [0.3, 0.2, 0.3, 0.6],
        [0.1, 0.9, 0.2, 0.1],
        [0.2, 0.3, 0.4, 0.7],
        [0.4, 1.1, 0.2, 0.2],
    ]);
    let oc = vec![1., 0., 1., 0., 1.];
    (faces, fc, pareidolia, objects, oc)
}
