//! Lloyd k-means with k-means++ seeding, seeded restarts and a Hartigan
//! single-point refinement pass after Lloyd converges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
    /// Worker threads for restarts; results do not depend on it.
    pub threads: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            n_init: 10,
            max_iter: 300,
            seed,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
    /// Objective after every Lloyd / refinement sweep of the winning restart.
    pub trace: Vec<f64>,
    pub best_restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squares of `labels` with cluster means as centres.
pub fn wcss(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let cents = centroids_of(points, labels, k);
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| cents[l].as_ref().map_or(0.0, |c| sq_dist(p, c)))
        .sum()
}

fn centroids_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            // Guard against round-off landing on an already-chosen point.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().position(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("pushed")));
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

/// Gives every empty cluster the point farthest from its current centre.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centers: &mut [Vec<f64>]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
            });
        let Some(far) = far else { return };
        labels[far] = empty;
        centers[empty] = points[far].clone();
    }
}

fn run_restart(points: &[Vec<f64>], cfg: &KMeansConfig, restart: usize) -> KMeansResult {
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    repair_empty(points, &mut labels, &mut centers);
    let mut trace = vec![wcss(points, &labels, k)];

    for _ in 0..cfg.max_iter {
        centers = centroids_of(points, &labels, k)
            .into_iter()
            .zip(centers)
            .map(|(c, old)| c.unwrap_or(old))
            .collect();
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        repair_empty(points, &mut next, &mut centers);
        let changed = next != labels;
        let obj = wcss(points, &next, k);
        // Accept only non-worsening moves (exact ties may cycle otherwise).
        if obj <= *trace.last().expect("non-empty") {
            labels = next;
            trace.push(obj);
        } else {
            break;
        }
        if !changed {
            break;
        }
    }

    hartigan_refine(points, &mut labels, k, &mut trace);
    let centroids = centroids_of(points, &labels, k)
        .into_iter()
        .map(|c| c.expect("no empty cluster after repair"))
        .collect();
    KMeansResult {
        inertia: *trace.last().expect("non-empty"),
        labels,
        centroids,
        trace,
        best_restart: restart,
    }
}

/// Moves single points between clusters while doing so lowers the objective.
fn hartigan_refine(points: &[Vec<f64>], labels: &mut [usize], k: usize, trace: &mut Vec<f64>) {
    let dim = points.first().map_or(0, Vec::len);
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &l) in points.iter().zip(labels.iter()) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let mean = |s: &[f64], c: usize| -> Vec<f64> { s.iter().map(|v| v / c as f64).collect() };
    for _ in 0..100 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = labels[i];
            if counts[from] <= 1 {
                continue;
            }
            let nf = counts[from] as f64;
            let remove_gain = nf / (nf - 1.0) * sq_dist(p, &mean(&sums[from], counts[from]));
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&t| t != from) {
                let nt = counts[to] as f64;
                let add_cost = nt / (nt + 1.0) * sq_dist(p, &mean(&sums[to], counts[to]));
                let delta = add_cost - remove_gain;
                if delta < -1e-12 * (1.0 + remove_gain) && best.is_none_or(|(_, d)| delta < d) {
                    best = Some((to, delta));
                }
            }
            if let Some((to, _)) = best {
                counts[from] -= 1;
                counts[to] += 1;
                sums[from].iter_mut().zip(p).for_each(|(s, v)| *s -= v);
                sums[to].iter_mut().zip(p).for_each(|(s, v)| *s += v);
                labels[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        trace.push(wcss(points, labels, k));
    }
}

/// Best-of-`n_init` k-means; deterministic for a given seed regardless of `threads`.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.len();
    if cfg.k == 0 || cfg.k > n {
        return Err(invalid(format!("k = {} must be within 1..={n}", cfg.k)));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("points have inconsistent dimension"));
    }
    let restarts = cfg.n_init.max(1);
    let threads = cfg.threads.clamp(1, restarts);
    let results: Vec<KMeansResult> = if threads == 1 {
        (0..restarts).map(|r| run_restart(points, cfg, r)).collect()
    } else {
        let mut slots: Vec<Option<KMeansResult>> = vec![None; restarts];
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(restarts.div_ceil(threads)).enumerate() {
                let base = w * restarts.div_ceil(threads);
                s.spawn(move || {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_restart(points, cfg, base + off));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("filled")).collect()
    };
    // Lowest inertia wins; ties go to the earliest restart.
    let best = results
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("at least one restart");
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_groups() {
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|i| if i % 2 == 0 { vec![0.0, 0.0] } else { vec![5.0, 5.0] })
            .collect();
        let r = kmeans(&pts, &KMeansConfig::new(2, 1)).unwrap();
        for i in 0..10 {
            assert_eq!(r.labels[i] == r.labels[0], i % 2 == 0);
        }
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, &KMeansConfig::new(5, 3)).unwrap();
        let mut l = r.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn duplicates_do_not_leave_empty_clusters() {
        let pts = vec![vec![1.0]; 4];
        let r = kmeans(&pts, &KMeansConfig::new(3, 0)).unwrap();
        for c in 0..3 {
            assert!(r.labels.contains(&c));
        }
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random(), rng.random(), rng.random()]).collect();
        let mut cfg = KMeansConfig::new(4, 5);
        let a = kmeans(&pts, &cfg).unwrap();
        cfg.threads = 3;
        let b = kmeans(&pts, &cfg).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![1.0], vec![2.0]];
        assert!(kmeans(&pts, &KMeansConfig::new(0, 0)).is_err());
        assert!(kmeans(&pts, &KMeansConfig::new(3, 0)).is_err());
    }
}
