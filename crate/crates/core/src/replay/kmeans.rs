use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        let far = (0..points.len())
            .filter(|&i| assignments[i] == largest)
            .max_by(|&i, &j| {
                sq_dist(&points[i], &centroids[largest])
                    .total_cmp(&sq_dist(&points[j], &centroids[largest]))
                    .then(j.cmp(&i))
            })
            .unwrap();
        assignments[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iter` iterations have run.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng, max_iter: usize) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::contract(format!(
            "k-means needs 1 <= k <= N, got k = {k}, N = {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::contract("k-means points differ in dimension"));
    }
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut centroids, &mut next);
        if next == assignments {
            break;
        }
        assignments = next;
        centroids = update_centroids(points, &assignments, k);
        trace.push(inertia(points, &centroids, &assignments));
    }
    Ok(Clustering {
        k,
        inertia: *trace.last().unwrap(),
        assignments,
        centroids,
        inertia_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn distinct_points_with_k_equal_n_have_zero_inertia() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        let c = kmeans(&pts, 3, &mut rng_from_seed(1), 100).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut a = c.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn separated_pairs_group_together() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 10.0], vec![0.0, 1.0], vec![10.0, 11.0]];
        let c = kmeans(&pts, 2, &mut rng_from_seed(5), 100).unwrap();
        assert_eq!(c.assignments[0], c.assignments[2]);
        assert_eq!(c.assignments[1], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.centroids[c.assignments[0]], vec![0.0, 0.5]);
        assert_eq!(c.centroids[c.assignments[1]], vec![10.0, 10.5]);
    }

    #[test]
    fn duplicates_terminate_with_non_empty_clusters() {
        let pts = vec![vec![1.0]; 6];
        let c = kmeans(&pts, 3, &mut rng_from_seed(2), 100).unwrap();
        assert!(c.sizes().iter().all(|&s| s > 0));
        assert!(kmeans(&pts, 7, &mut rng_from_seed(2), 100).is_err());
    }

    #[test]
    fn beats_random_assignments() {
        let mut rng = rng_from_seed(9);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let c = kmeans(&pts, 4, &mut rng_from_seed(3), 100).unwrap();
        for w in c.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for _ in 0..50 {
            let a: Vec<usize> = (0..40).map(|_| rng.gen_range(0..4)).collect();
            if (0..4).any(|k| !a.contains(&k)) {
                continue;
            }
            let cents = update_centroids(&pts, &a, 4);
            assert!(c.inertia <= inertia(&pts, &cents, &a) + 1e-12);
        }
    }
}
