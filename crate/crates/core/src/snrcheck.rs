//! Numerical check of the cluster-centre SNR lower bound
//! `SNR(center) ≥ [1 + (n−1)ρ] · mean_i SNR(s_i)` for clusters of known
//! signals under i.i.d. Gaussian noise.
//!
//! The bound is exact when every member has the same signal norm. With
//! unequal norms and positive correlations it can fail, because
//! `LHS − RHS = Σ_{i≠j} c_ij (q_i q_j − Σq²/n) / (nσ²)` where `q_i = ‖s_i‖`
//! and `c_ij` is the cosine between `s_i` and `s_j`. [`verify_theorem1`]
//! reports the slack instead of assuming its sign.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tolerance on the slack below which a cluster counts as violating.
pub const SLACK_TOLERANCE: f64 = 1e-10;

fn sq_norm(s: &[f64]) -> f64 {
    s.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖s‖² / σ²`.
pub fn signal_snr(s: &[f64], sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(invalid(format!("noise variance must be > 0, got {sigma2}")));
    }
    Ok(sq_norm(s) / sigma2)
}

/// Known member signals sharing one noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyCluster {
    pub signals: Vec<Vec<f64>>,
    pub sigma2: f64,
}

impl NoisyCluster {
    pub fn new(signals: Vec<Vec<f64>>, sigma2: f64) -> Result<Self> {
        if signals.is_empty() {
            return Err(invalid("cluster needs at least one member"));
        }
        let t = signals[0].len();
        if t == 0 || signals.iter().any(|s| s.len() != t) {
            return Err(invalid("member signals must share a positive length"));
        }
        if !(sigma2 > 0.0) {
            return Err(invalid(format!("noise variance must be > 0, got {sigma2}")));
        }
        if signals.iter().all(|s| sq_norm(s) == 0.0) {
            return Err(invalid("at least one member needs a nonzero signal"));
        }
        Ok(Self { signals, sigma2 })
    }

    pub fn size(&self) -> usize {
        self.signals.len()
    }

    pub fn center(&self) -> Vec<f64> {
        let n = self.size() as f64;
        let mut c = vec![0.0; self.signals[0].len()];
        for s in &self.signals {
            c.iter_mut().zip(s).for_each(|(a, v)| *a += v / n);
        }
        c
    }

    /// `n · ‖s̄‖² / σ²`: the centre's noise variance is `σ²/n` per component.
    pub fn center_snr(&self) -> f64 {
        self.size() as f64 * sq_norm(&self.center()) / self.sigma2
    }
}

/// Mean pairwise cosine similarity over ordered pairs `i ≠ j`.
pub fn avg_correlation(cluster: &NoisyCluster) -> Result<f64> {
    let n = cluster.size();
    if n < 2 {
        return Err(invalid("average correlation needs at least two members"));
    }
    let norms: Vec<f64> = cluster.signals.iter().map(|s| sq_norm(s).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&q| q == 0.0) {
        return Err(invalid(format!("member {i} has a zero signal")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 2.0 * dot(&cluster.signals[i], &cluster.signals[j]) / (norms[i] * norms[j]);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub size: usize,
    pub rho: f64,
    pub snr_center: f64,
    pub bound: f64,
    /// `snr_center − bound`.
    pub slack: f64,
    pub holds: bool,
}

pub fn verify_theorem1(cluster: &NoisyCluster) -> Result<Theorem1Report> {
    let n = cluster.size();
    let snr_center = cluster.center_snr();
    let mean_snr = cluster
        .signals
        .iter()
        .map(|s| signal_snr(s, cluster.sigma2))
        .sum::<Result<f64>>()?
        / n as f64;
    let rho = if n == 1 { 0.0 } else { avg_correlation(cluster)? };
    let bound = (1.0 + (n as f64 - 1.0) * rho) * mean_snr;
    let slack = snr_center - bound;
    Ok(Theorem1Report {
        size: n,
        rho,
        snr_center,
        bound,
        slack,
        holds: slack >= -SLACK_TOLERANCE,
    })
}

/// Random cluster of sinusoids sharing a base period with jittered phase,
/// an optional harmonic, and member amplitudes drawn from `amplitude`.
pub fn random_sinusoid_cluster(rng: &mut impl Rng, size: usize, len: usize, amplitude: (f64, f64)) -> Result<NoisyCluster> {
    let period = rng.random_range(8.0..64.0);
    let harmonic = rng.random_range(0.0..0.5);
    let spread = rng.random_range(0.0..std::f64::consts::FRAC_PI_3);
    let signals = (0..size)
        .map(|_| {
            let amp = if amplitude.0 < amplitude.1 {
                rng.random_range(amplitude.0..amplitude.1)
            } else {
                amplitude.0
            };
            let phase = rng.random_range(-spread..=spread);
            (0..len)
                .map(|t| {
                    let w = std::f64::consts::TAU * t as f64 / period;
                    amp * ((w + phase).sin() + harmonic * (2.0 * w + phase).cos())
                })
                .collect()
        })
        .collect();
    NoisyCluster::new(signals, rng.random_range(0.1..4.0))
}

/// Rescales every member to unit norm (zero members are left as they are).
pub fn equalize_norms(cluster: &NoisyCluster) -> NoisyCluster {
    let signals = cluster
        .signals
        .iter()
        .map(|s| {
            let q = sq_norm(s).sqrt();
            if q > 0.0 {
                s.iter().map(|v| v / q).collect()
            } else {
                s.clone()
            }
        })
        .collect();
    NoisyCluster {
        signals,
        sigma2: cluster.sigma2,
    }
}

/// Smallest pairwise cosine in the cluster (1 for singletons).
pub fn min_pairwise_correlation(cluster: &NoisyCluster) -> f64 {
    let n = cluster.size();
    let mut min: f64 = 1.0;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&cluster.signals[i], &cluster.signals[j]);
            min = min.min(dot(a, b) / (sq_norm(a) * sq_norm(b)).sqrt());
        }
    }
    min
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolatingCluster {
    pub index: usize,
    pub report: Theorem1Report,
    pub cluster: NoisyCluster,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrCheckSummary {
    pub clusters_tested: usize,
    pub violations: Vec<ViolatingCluster>,
    pub min_slack: f64,
    /// Worst slack among the equal-norm clusters only.
    pub min_slack_equal_norms: f64,
}

/// Checks `count` random clusters (sizes 2–20) whose pairwise correlations
/// are all nonnegative. Every third cluster has its members rescaled to equal norms.
pub fn run_snr_check(count: usize, seed: u64) -> Result<SnrCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut min_slack_equal = f64::INFINITY;
    let mut tested = 0;
    while tested < count {
        let size = rng.random_range(2..=20);
        let len = rng.random_range(16..=128);
        let equal = tested % 3 == 2;
        let mut cluster = random_sinusoid_cluster(&mut rng, size, len, (0.2, 3.0))?;
        if equal {
            cluster = equalize_norms(&cluster);
        }
        if min_pairwise_correlation(&cluster) < 0.0 {
            continue;
        }
        let report = verify_theorem1(&cluster)?;
        min_slack = min_slack.min(report.slack);
        if equal {
            min_slack_equal = min_slack_equal.min(report.slack);
        }
        if !report.holds {
            violations.push(ViolatingCluster {
                index: tested,
                report,
                cluster,
            });
        }
        tested += 1;
    }
    Ok(SnrCheckSummary {
        clusters_tested: tested,
        violations,
        min_slack,
        min_slack_equal_norms: min_slack_equal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSnr {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Estimates the centre's SNR by sampling member noise, averaging it, and
/// measuring the per-component variance of the averaged noise.
pub fn monte_carlo_center_snr(cluster: &NoisyCluster, samples: usize, seed: u64) -> Result<MonteCarloSnr> {
    if samples < 2 {
        return Err(invalid("need at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cluster.size();
    let t = cluster.signals[0].len();
    let sd = cluster.sigma2.sqrt();
    let signal_power = sq_norm(&cluster.center());
    let mut avg = vec![0.0; t];
    // Per-sample statistic: mean squared component of the averaged noise.
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        avg.iter_mut().for_each(|a| *a = 0.0);
        for _ in 0..n {
            for a in avg.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *a += sd * e;
            }
        }
        let v = avg.iter().map(|a| (a / n as f64).powi(2)).sum::<f64>() / t as f64;
        sum += v;
        sum_sq += v * v;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = (sum_sq / k - mean * mean).max(0.0) * k / (k - 1.0);
    let se_mean = (var / k).sqrt();
    let estimate = signal_power / mean;
    Ok(MonteCarloSnr {
        estimate,
        std_error: estimate * se_mean / mean,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_cases() {
        assert_eq!(signal_snr(&[0.0; 3], 1.0).unwrap(), 0.0);
        assert_eq!(signal_snr(&[1.0; 4], 2.0).unwrap(), 2.0);
        let s = [0.3, -1.2, 2.0];
        let scaled: Vec<f64> = s.iter().map(|v| v * 3.0).collect();
        let r = signal_snr(&scaled, 0.7).unwrap() / signal_snr(&s, 0.7).unwrap();
        assert!((r - 9.0).abs() < 1e-12);
        assert!(signal_snr(&s, 0.0).is_err());
        assert!(signal_snr(&s, -1.0).is_err());
    }

    #[test]
    fn correlation_cases() {
        let same = NoisyCluster::new(vec![vec![1.0, 2.0]; 3], 1.0).unwrap();
        assert!((avg_correlation(&same).unwrap() - 1.0).abs() < 1e-12);
        let orth = NoisyCluster::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert_eq!(avg_correlation(&orth).unwrap(), 0.0);
        let hand = NoisyCluster::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]], 1.0).unwrap();
        assert!((avg_correlation(&hand).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let zero = NoisyCluster::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]], 1.0).unwrap();
        assert!(avg_correlation(&zero).is_err());
    }

    #[test]
    fn equality_cases() {
        let single = NoisyCluster::new(vec![vec![0.5, -1.0, 2.0]], 0.3).unwrap();
        let r = verify_theorem1(&single).unwrap();
        assert!((r.snr_center - signal_snr(&single.signals[0], 0.3).unwrap()).abs() < 1e-10);
        assert!(r.slack.abs() < 1e-10);
        let k = 6;
        let s = vec![0.4, 1.1, -0.7, 0.2];
        let same = NoisyCluster::new(vec![s.clone(); k], 1.7).unwrap();
        let r = verify_theorem1(&same).unwrap();
        let expect = k as f64 * signal_snr(&s, 1.7).unwrap();
        assert!((r.snr_center - expect).abs() < 1e-10);
        assert!((r.bound - expect).abs() < 1e-10);
    }

    #[test]
    fn slack_matches_closed_form_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = random_sinusoid_cluster(&mut rng, 5, 40, (0.2, 3.0)).unwrap();
            let n = c.size();
            let q: Vec<f64> = c.signals.iter().map(|s| sq_norm(s).sqrt()).collect();
            let qsq: f64 = q.iter().map(|v| v * v).sum();
            let mut gap = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let cij = dot(&c.signals[i], &c.signals[j]) / (q[i] * q[j]);
                        gap += cij * (q[i] * q[j] - qsq / n as f64);
                    }
                }
            }
            gap /= n as f64 * c.sigma2;
            let r = verify_theorem1(&c).unwrap();
            assert!((r.slack - gap).abs() < 1e-9 * (1.0 + gap.abs()));
        }
    }

    #[test]
    fn collinear_unequal_norms_violate_the_bound() {
        // s and 2s: centre SNR 4.5, bound (1 + 1)·(1 + 4)/2 = 5.
        let c = NoisyCluster::new(vec![vec![1.0, 0.0], vec![2.0, 0.0]], 1.0).unwrap();
        let r = verify_theorem1(&c).unwrap();
        assert!((r.snr_center - 4.5).abs() < 1e-12);
        assert!((r.bound - 5.0).abs() < 1e-12);
        assert!(!r.holds);
    }

    #[test]
    fn equal_norm_clusters_always_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let size = rng.random_range(2..=12);
            let c = random_sinusoid_cluster(&mut rng, size, 64, (0.2, 3.0)).unwrap();
            let c = equalize_norms(&c);
            assert!(verify_theorem1(&c).unwrap().holds);
        }
    }

    #[test]
    fn monte_carlo_agrees_with_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = random_sinusoid_cluster(&mut rng, 4, 16, (0.5, 2.0)).unwrap();
        let mc = monte_carlo_center_snr(&c, 100_000, 5).unwrap();
        let analytic = c.center_snr();
        assert!((mc.estimate - analytic).abs() <= 3.0 * mc.std_error, "{mc:?} vs {analytic}");
    }
}
