//! Three pipeline operations exposed to the browser page in `www/`. Results
//! are returned as JSON strings.

use nest_core::datakit::{generate_synthetic, SyntheticSpec};
use nest_core::evalbench::adjusted_rand_index;
use nest_core::nestmodel::pinball_loss;
use nest_core::numcore::ops::pinball;
use nest_core::regionalize::{regionalize_pipeline, RegionConfig};
use nest_core::snrcheck::{equalize_norms, min_pairwise_correlation, random_sinusoid_cluster, verify_theorem1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct ClusterView {
    assignment: Vec<usize>,
    planted: Vec<usize>,
    ari: f64,
    sizes: Vec<usize>,
    sigma: f64,
    /// Node series, `N × T`, first channel only.
    series: Vec<Vec<f64>>,
}

/// Generates planted-region data and recovers the regions.
#[wasm_bindgen]
pub fn cluster_synthetic(regions: usize, nodes_per_region: usize, days: usize, noise: f64, n_regions: usize, seed: u64) -> Result<String, JsError> {
    let spec = SyntheticSpec {
        n_regions: regions,
        nodes_per_region,
        steps: days * 24,
        steps_per_day: 24,
        noise_sigma: noise,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).map_err(js_err)?;
    let cfg = RegionConfig {
        n_regions: Some(n_regions),
        chunks: days.max(1),
        seed,
        ..RegionConfig::default()
    };
    let model = regionalize_pipeline(&data.series, &cfg).map_err(js_err)?;
    let planted = data.series.labels.clone().unwrap_or_default();
    let ari = adjusted_rand_index(&model.assignment, &planted).map_err(js_err)?;
    let c = data.series.channels();
    let series = (0..data.series.nodes())
        .map(|i| data.series.node_series(i).iter().step_by(c).copied().collect())
        .collect();
    to_json(&ClusterView {
        sizes: model.sizes(),
        assignment: model.assignment,
        planted,
        ari,
        sigma: model.sigma,
        series,
    })
}

#[derive(Serialize)]
struct SnrView {
    size: usize,
    rho: f64,
    min_correlation: f64,
    snr_center: f64,
    bound: f64,
    slack: f64,
    holds: bool,
}

/// Draws one cluster of noisy sinusoids and compares its centre SNR with the bound.
#[wasm_bindgen]
pub fn snr_explore(size: usize, len: usize, amp_low: f64, amp_high: f64, equal_norms: bool, seed: u64) -> Result<String, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cluster = random_sinusoid_cluster(&mut rng, size, len, (amp_low, amp_high)).map_err(js_err)?;
    if equal_norms {
        cluster = equalize_norms(&cluster);
    }
    let r = verify_theorem1(&cluster).map_err(js_err)?;
    to_json(&SnrView {
        size: r.size,
        rho: r.rho,
        min_correlation: min_pairwise_correlation(&cluster),
        snr_center: r.snr_center,
        bound: r.bound,
        slack: r.slack,
        holds: r.holds,
    })
}

/// Pinball loss of a single-level forecast.
#[wasm_bindgen]
pub fn pinball_mean(pred: &[f64], target: &[f64], tau: f64) -> Result<f64, JsError> {
    pinball_loss(&[pred.to_vec()], target, &[tau]).map_err(js_err)
}

/// Pinball loss against the residual `e = y − ŷ` over `[lo, hi]`, for plotting.
#[wasm_bindgen]
pub fn pinball_curve(tau: f64, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|i| pinball(lo + (hi - lo) * i as f64 / (points - 1) as f64, tau))
        .collect()
}
