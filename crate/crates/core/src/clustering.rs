//! Seeded k-means over planar points (Lloyd iterations, k-means++ seeding).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Geo;
use crate::rng::rng_from;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves by this much or more.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Geo>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after the initial assignment and after every iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inertia_history: Vec<f64>,
}

fn sq(a: Geo, b: Geo) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    dx * dx + dy * dy
}

/// Nearest centroid index; ties go to the smaller index.
fn nearest(centroids: &[Geo], p: Geo) -> (usize, f64) {
    let mut best = (0, sq(centroids[0], p));
    for (j, &c) in centroids.iter().enumerate().skip(1) {
        let d = sq(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(centroids: &[Geo], points: &[Geo]) -> Vec<(usize, f64)> {
    points.par_iter().map(|&p| nearest(centroids, p)).collect()
}

fn inertia_of(assign: &[(usize, f64)]) -> f64 {
    assign.iter().map(|a| a.1).sum()
}

fn plus_plus_init<R: Rng>(points: &[Geo], k: usize, rng: &mut R) -> Vec<Geo> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|&p| sq(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > r && w > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave r at the very top of the range
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, c));
        }
    }
    centroids
}

pub fn kmeans_fit(points: &[Geo], cfg: &KMeansConfig) -> Result<KMeansModel> {
    if cfg.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.len() < cfg.k {
        return Err(Error::invalid(format!(
            "k-means needs at least k = {} points, got {}",
            cfg.k,
            points.len()
        )));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::invalid("non-finite point passed to k-means"));
    }
    let mut rng = rng_from(cfg.seed);
    let mut centroids = plus_plus_init(points, cfg.k, &mut rng);
    let mut assign = assign_all(&centroids, points);
    let mut history = vec![inertia_of(&assign)];
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); cfg.k];
        for (&p, &(c, _)) in points.iter().zip(&assign) {
            let s = &mut sums[c];
            s.0 += p.x;
            s.1 += p.y;
            s.2 += 1;
        }
        let mut next: Vec<Geo> = sums
            .iter()
            .zip(&centroids)
            .map(|(&(sx, sy, n), &old)| {
                if n == 0 {
                    old
                } else {
                    Geo::new(sx / n as f64, sy / n as f64)
                }
            })
            .collect();

        // Empty clusters take the point farthest from its own centroid.
        let mut taken: Vec<usize> = Vec::new();
        for j in (0..cfg.k).filter(|&j| sums[j].2 == 0) {
            let far = points
                .iter()
                .zip(&assign)
                .enumerate()
                .filter(|(i, _)| !taken.contains(i))
                .map(|(i, (&p, &(c, _)))| (i, sq(p, next[c])))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            if let Some((i, _)) = far {
                taken.push(i);
                next[j] = points[i];
            }
        }

        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(&a, &b)| sq(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assign = assign_all(&centroids, points);
        history.push(inertia_of(&assign));
        iterations += 1;
        if shift < cfg.tol {
            break;
        }
    }

    Ok(KMeansModel {
        k: cfg.k,
        seed: cfg.seed,
        inertia: *history.last().expect("non-empty"),
        centroids,
        iterations_run: iterations,
        inertia_history: history,
    })
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assign(&self, p: Geo) -> usize {
        nearest(&self.centroids, p).0
    }

    pub fn labels(&self, points: &[Geo]) -> Vec<usize> {
        assign_all(&self.centroids, points)
            .into_iter()
            .map(|a| a.0)
            .collect()
    }
}

/// Equivalent to [`KMeansModel::assign`].
pub fn kmeans_assign(model: &KMeansModel, p: Geo) -> usize {
    model.assign(p)
}
