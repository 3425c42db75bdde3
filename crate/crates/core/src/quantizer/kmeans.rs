use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each iteration.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

#[inline]
pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub(crate) fn nearest(point: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans<R: Rng>(
    points: ArrayView2<f64>,
    m: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<KMeansResult> {
    if m == 0 {
        return Err(Error::Config("number of centroids must be positive".into()));
    }
    if points.nrows() < m {
        return Err(Error::InsufficientData(format!(
            "{} points cannot seed {m} centroids",
            points.nrows()
        )));
    }
    if max_iters == 0 {
        return Err(Error::Config("k-means needs at least one iteration".into()));
    }
    let init = plus_plus_init(points, m, rng);
    lloyd(points, init, max_iters)
}

fn plus_plus_init<R: Rng>(points: ArrayView2<f64>, m: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((m, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut dist: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            let d = sq_dist(p, centroids.row(c));
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Stops when assignments no
/// longer change or after `max_iters` passes.
pub fn lloyd(points: ArrayView2<f64>, mut centroids: Array2<f64>, max_iters: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    let m = centroids.nrows();
    let dim = points.ncols();
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut repaired = false;

    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.outer_iter().enumerate() {
            let (j, d) = nearest(p, centroids.view());
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        if !changed && !repaired && !trace.is_empty() {
            break;
        }

        let mut sums = Array2::<f64>::zeros((m, dim));
        let mut counts = vec![0usize; m];
        for (i, p) in points.outer_iter().enumerate() {
            let j = assignments[i];
            counts[j] += 1;
            let mut row = sums.row_mut(j);
            row += &p;
        }
        for j in 0..m {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            }
        }
        for (i, p) in points.outer_iter().enumerate() {
            dists[i] = sq_dist(p, centroids.row(assignments[i]));
        }
        repaired = repair_empty(points, &mut centroids, &mut assignments, &mut counts, &mut dists);

        if dists.iter().any(|d| !d.is_finite()) {
            return Err(Error::Data("non-finite distance during k-means".into()));
        }
        trace.push(dists.iter().sum());
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective_trace: trace,
    })
}

/// Moves each empty centroid onto the point farthest from its own centroid.
/// When every point already sits on its centroid the empty centroid is kept.
fn repair_empty(
    points: ArrayView2<f64>,
    centroids: &mut Array2<f64>,
    assignments: &mut [usize],
    counts: &mut [usize],
    dists: &mut [f64],
) -> bool {
    let mut any = false;
    for j in 0..centroids.nrows() {
        if counts[j] > 0 {
            continue;
        }
        let (far, &d) = dists
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignments[*i]] > 1)
            .fold((usize::MAX, &0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if far == usize::MAX || d <= 0.0 {
            continue;
        }
        counts[assignments[far]] -= 1;
        assignments[far] = j;
        counts[j] = 1;
        dists[far] = 0.0;
        centroids.row_mut(j).assign(&points.row(far));
        any = true;
    }
    any
}
