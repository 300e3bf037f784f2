use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sse: f64,
    /// SSE after each assignment step, in order.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                cum += d;
                if u < cum && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (k, d) = nearest(centroids, p);
        *l = k;
        sse += d;
    }
    sse
}

/// Lloyd's algorithm from k-means++ seeds. An emptied cluster is reseeded to
/// the point farthest from its stale centroid.
pub fn kmeans(points: &[Vec<f64>], c: usize, opts: &KMeansOptions) -> Result<KMeansResult> {
    if c == 0 {
        return Err(Error::InvalidArgument("cluster count must be >= 1".into()));
    }
    if points.len() < c {
        return Err(Error::InvalidArgument(format!(
            "{c} clusters requested for {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in length".into()));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = plus_plus_seeds(points, c, &mut rng);
    let mut labels = vec![0; points.len()];
    let mut prev_labels: Option<Vec<usize>> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let sse = assign(points, &centroids, &mut labels);
        history.push(sse);
        if prev_labels.as_deref() == Some(&labels[..]) {
            converged = true;
            break;
        }
        if iterations == opts.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; c];
        let mut counts = vec![0usize; c];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut movement = 0.0f64;
        let mut reseeded = false;
        for k in 0..c {
            let next = if counts[k] == 0 {
                reseeded = true;
                let far = points
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, p)| {
                        let d = sq_dist(p, &centroids[k]);
                        if d > best.1 {
                            (i, d)
                        } else {
                            best
                        }
                    })
                    .0;
                points[far].clone()
            } else {
                let n = counts[k] as f64;
                sums[k].iter().map(|s| s / n).collect()
            };
            movement = movement.max(sq_dist(&next, &centroids[k]).sqrt());
            centroids[k] = next;
        }
        prev_labels = if reseeded { None } else { Some(labels.clone()) };
        if movement <= opts.tol && !reseeded {
            let sse = assign(points, &centroids, &mut labels);
            history.push(sse);
            converged = true;
            break;
        }
    }

    Ok(KMeansResult {
        sse: *history.last().expect("at least one assignment"),
        centroids,
        labels,
        sse_history: history,
        iterations,
        converged,
    })
}
