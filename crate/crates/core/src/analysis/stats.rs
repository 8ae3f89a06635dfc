//! Least-squares lines, k-means and the adjusted Rand index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::AnalysisError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation; 0 when either coordinate has zero variance.
    pub r: f64,
    /// Set when `r` is undefined and reported as 0.
    pub degenerate: bool,
    pub n: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn fit_line(points: &[(f64, f64)]) -> Result<RegressionFit, AnalysisError> {
    let n = points.len();
    if n < 3 {
        return Err(AnalysisError::TooFewPoints { got: n, needed: 3 });
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let constant = |f: fn(&(f64, f64)) -> f64| points.iter().all(|p| f(p) == f(&points[0]));
    if constant(|p| p.0) {
        return Ok(RegressionFit {
            slope: 0.0,
            intercept: my,
            r: 0.0,
            degenerate: true,
            n,
        });
    }
    let degenerate = constant(|p| p.1);
    let slope = if degenerate { 0.0 } else { sxy / sxx };
    let r = if degenerate {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    };
    Ok(RegressionFit {
        slope,
        intercept: my - slope * mx,
        r,
        degenerate,
        n,
    })
}

/// Rescales each coordinate to `[0, 1]`; constant coordinates map to 0.
pub fn min_max_normalize(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    points
        .iter()
        .map(|p| {
            let mut q = [0.0; 2];
            for k in 0..2 {
                let span = hi[k] - lo[k];
                q[k] = if span > 0.0 { (p[k] - lo[k]) / span } else { 0.0 };
            }
            q
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterResult {
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd assignment step of the kept restart.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_RESTARTS: usize = 10;
const MAX_ITERS: usize = 300;
const TOL: f64 = 1e-9;

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[pick]));
        }
    }
    centroids
}

fn lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>) -> ClusterResult {
    let k = centroids.len();
    let mut assignments = vec![0; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            inertia += d;
        }
        history.push(inertia);
        if iterations == MAX_ITERS {
            break;
        }
        iterations += 1;
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            sums[j][0] += p[0];
            sums[j][1] += p[1];
            counts[j] += 1;
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            // an emptied cluster keeps its centroid
            if counts[j] > 0 {
                let c = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
                shift = shift.max(dist2(&c, &centroids[j]).sqrt());
                centroids[j] = c;
            }
        }
        if shift < TOL {
            let inertia = points.iter().map(|p| nearest(p, &centroids).1).sum();
            for (i, p) in points.iter().enumerate() {
                assignments[i] = nearest(p, &centroids).0;
            }
            history.push(inertia);
            break;
        }
    }
    ClusterResult {
        inertia: *history.last().expect("at least one pass"),
        centroids,
        assignments,
        inertia_history: history,
        iterations,
    }
}

/// k-means++ seeding and Lloyd iterations, best of [`KMEANS_RESTARTS`] restarts.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<ClusterResult, AnalysisError> {
    if k == 0 || points.len() < k {
        return Err(AnalysisError::TooFewPoints {
            got: points.len(),
            needed: k.max(1),
        });
    }
    let mut distinct: Vec<[f64; 2]> = points.to_vec();
    distinct.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    distinct.dedup();
    if distinct.len() < k {
        return Err(AnalysisError::Degenerate(format!(
            "{} distinct points cannot form {k} clusters",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<ClusterResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&m| c2(m)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 - 0.5 * i as f64)).collect();
        let f = fit_line(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 3.0).abs() < 1e-12);
        assert!((f.r + 1.0).abs() < 1e-12);
        assert!(!f.degenerate);
    }

    #[test]
    fn constant_response_is_flagged() {
        let f = fit_line(&[(1.0, 0.4), (2.0, 0.4), (5.0, 0.4)]).unwrap();
        assert_eq!((f.slope, f.r, f.degenerate), (0.0, 0.0, true));
        assert!(fit_line(&[(0.0, 1.0), (1.0, 2.0)]).is_err());
    }

    fn blobs(seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let centers = [[0.1, 0.1], [0.9, 0.2], [0.5, 0.9]];
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..90 {
            let c = centers[i % 3];
            pts.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
            labels.push(i % 3);
        }
        (pts, labels)
    }

    #[test]
    fn recovers_separated_blobs() {
        let (pts, labels) = blobs(3);
        let r = kmeans(&pts, 3, 1).unwrap();
        assert_eq!(adjusted_rand_index(&r.assignments, &labels), 1.0);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (pts, _) = blobs(4);
        let r = kmeans(&pts, 1, 0).unwrap();
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64,
            pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64,
        ];
        assert!((r.centroids[0][0] - mean[0]).abs() < 1e-12);
        assert!((r.centroids[0][1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point() {
        let (pts, _) = blobs(5);
        let pts = &pts[..12];
        assert_eq!(kmeans(pts, 12, 0).unwrap().inertia, 0.0);
    }

    #[test]
    fn duplicates_cannot_fill_k() {
        let pts = vec![[0.5, 0.5]; 6];
        assert!(matches!(kmeans(&pts, 2, 0), Err(AnalysisError::Degenerate(_))));
        assert!(kmeans(&pts, 7, 0).is_err());
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // scikit-learn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285715
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]) - 4.0 / 7.0).abs() < 1e-12);
        // adjusted_rand_score([0,0,0,1,1,1],[0,1,2,0,1,2]) = -0.36363636363636365
        assert!((adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 2, 0, 1, 2]) + 4.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_to_unit_square() {
        let q = min_max_normalize(&[[1.0, 5.0], [3.0, 5.0], [2.0, 5.0]]);
        assert_eq!(q, vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]]);
    }

    proptest! {
        #[test]
        fn inertia_never_increases(seed in 0u64..200, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..40).map(|_| [rng.random(), rng.random()]).collect();
            let r = kmeans(&pts, k, seed).unwrap();
            prop_assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            for (p, &j) in pts.iter().zip(&r.assignments) {
                let d = dist2(p, &r.centroids[j]);
                prop_assert!(r.centroids.iter().all(|c| d <= dist2(p, c) + 1e-15));
            }
        }

        #[test]
        fn pearson_in_range(pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..40)) {
            let f = fit_line(&pts).unwrap();
            prop_assert!((-1.0..=1.0).contains(&f.r));
        }
    }
}
