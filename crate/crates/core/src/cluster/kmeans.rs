//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    #[default]
    PlusPlus,
    /// `k` distinct points chosen uniformly.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub init: KMeansInit,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
            init: KMeansInit::PlusPlus,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step; never increases.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng>(x: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![x[rng.random_range(0..x.len())].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..x.len())
        };
        centroids.push(x[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

fn assign(x: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in x.iter().enumerate() {
        let (c, d) = nearest(p, centroids);
        labels[i] = c;
        dist[i] = d;
        inertia += d;
    }
    inertia
}

/// Clusters the rows of `x`. Empty clusters are re-seeded at the point
/// farthest from its current centroid. Deterministic for a given seed.
pub fn kmeans(x: &[Vec<f64>], opts: &KMeansOptions) -> Result<KMeansResult> {
    let (n, k) = (x.len(), opts.k);
    if k < 2 || n < k {
        return invalid(format!("k-means needs 2 <= k <= n, got k = {k}, n = {n}"));
    }
    let d = x[0].len();
    if x.iter().any(|p| p.len() != d) {
        return invalid("k-means rows differ in length");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = match opts.init {
        KMeansInit::PlusPlus => seed_plus_plus(x, k, &mut rng),
        KMeansInit::Random => rand::seq::index::sample(&mut rng, n, k)
            .into_iter()
            .map(|i| x[i].clone())
            .collect(),
    };
    let mut labels = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut history = vec![assign(x, &centroids, &mut labels, &mut dist)];
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in x.iter().zip(&labels) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        let mut taken = vec![false; n];
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("n >= k leaves a point to take");
                taken[far] = true;
                dist[far] = 0.0;
                x[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        history.push(assign(x, &centroids, &mut labels, &mut dist));
        if shift < opts.tol {
            break;
        }
    }
    Ok(KMeansResult {
        labels,
        inertia: *history.last().expect("at least one assignment"),
        centroids,
        inertia_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs_split_exactly() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 5.0], vec![5.0, 5.0]];
        let r = kmeans(&x, &KMeansOptions::new(2, 3)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        for init in [KMeansInit::PlusPlus, KMeansInit::Random] {
            let r = kmeans(
                &x,
                &KMeansOptions {
                    init,
                    ..KMeansOptions::new(5, 1)
                },
            )
            .unwrap();
            assert_eq!(r.inertia, 0.0);
        }
    }

    #[test]
    fn too_many_clusters_rejected() {
        assert!(kmeans(&[vec![1.0]], &KMeansOptions::new(2, 0)).is_err());
    }
}
