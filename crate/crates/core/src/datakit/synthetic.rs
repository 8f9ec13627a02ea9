use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SeriesTensor, DAYS_PER_WEEK};
use crate::error::{invalid, Result};

/// Knobs for the planted-region generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_regions: usize,
    pub nodes_per_region: usize,
    pub steps: usize,
    pub steps_per_day: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    /// Amplitude scale of the daily component.
    pub signal_scale: f64,
    /// Std of the fixed per-node offsets.
    pub offset_scale: f64,
    /// Per-step probability that a region's level jumps.
    pub regime_shift_rate: f64,
    /// Std of each level jump.
    pub regime_shift_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_regions: 3,
            nodes_per_region: 16,
            steps: 2880,
            steps_per_day: 96,
            channels: 1,
            noise_sigma: 1.0,
            signal_scale: 5.0,
            offset_scale: 0.5,
            regime_shift_rate: 0.0,
            regime_shift_scale: 3.0,
            seed: 7,
        }
    }
}

/// Generated series together with the planted ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub series: SeriesTensor,
    /// Per-region noiseless trend, `M × T × C` row-major.
    pub trends: Vec<f64>,
    /// Fixed per-node offsets, `N × C`.
    pub offsets: Vec<f64>,
    pub spec: SyntheticSpec,
}

impl SyntheticData {
    pub fn trend(&self, region: usize, step: usize, channel: usize) -> f64 {
        let (t, c) = (self.spec.steps, self.spec.channels);
        self.trends[(region * t + step) * c + channel]
    }
}

const REGION_STREAM_BASE: u64 = 1 << 32;

/// Each region gets daily plus weekly sinusoids with its own amplitude and
/// phase (and, optionally, random level shifts); each node is its region's
/// trend plus a fixed offset plus i.i.d. Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let SyntheticSpec {
        n_regions,
        nodes_per_region,
        steps,
        steps_per_day,
        channels,
        ..
    } = *spec;
    if n_regions == 0 || nodes_per_region == 0 || steps == 0 || steps_per_day == 0 || channels == 0 {
        return Err(invalid("synthetic extents must all be positive"));
    }
    if !(spec.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&spec.regime_shift_rate) {
        return Err(invalid("noise sigma must be >= 0 and shift rate within [0, 1]"));
    }
    let n = n_regions * nodes_per_region;
    let week = (steps_per_day * DAYS_PER_WEEK) as f64;
    let day = steps_per_day as f64;

    let mut trends = vec![0.0; n_regions * steps * channels];
    for m in 0..n_regions {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(REGION_STREAM_BASE + m as u64);
        let daily_amp = spec.signal_scale * rng.random_range(0.8..1.2);
        let daily_phase = TAU * m as f64 / n_regions as f64 + rng.random_range(-0.3..0.3);
        let weekly_amp = 0.3 * spec.signal_scale * rng.random_range(0.5..1.0);
        let weekly_phase = rng.random_range(0.0..TAU);
        let base = rng.random_range(-1.0..1.0);
        let jump = Normal::new(0.0, spec.regime_shift_scale.max(0.0)).map_err(|e| invalid(e.to_string()))?;
        let mut level = 0.0;
        for s in 0..steps {
            if spec.regime_shift_rate > 0.0 && rng.random::<f64>() < spec.regime_shift_rate {
                level += jump.sample(&mut rng);
                // Keep the level process from wandering off.
                level *= 0.7;
            }
            let x = s as f64;
            let v = base
                + level
                + daily_amp * (TAU * x / day + daily_phase).sin()
                + weekly_amp * (TAU * x / week + weekly_phase).sin();
            for c in 0..channels {
                trends[(m * steps + s) * channels + c] = v * (1.0 + 0.25 * c as f64);
            }
        }
    }

    let mut values = vec![0.0; n * steps * channels];
    let mut offsets = vec![0.0; n * channels];
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let offset_dist = Normal::new(0.0, spec.offset_scale.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    for i in 0..n {
        let m = i / nodes_per_region;
        labels.push(m);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        for c in 0..channels {
            offsets[i * channels + c] = offset_dist.sample(&mut rng);
        }
        for s in 0..steps {
            for c in 0..channels {
                values[(i * steps + s) * channels + c] =
                    trends[(m * steps + s) * channels + c] + offsets[i * channels + c] + noise.sample(&mut rng);
            }
        }
    }

    let series = SeriesTensor::new(n, steps, channels, values, steps_per_day, 0)?.with_labels(labels)?;
    Ok(SyntheticData {
        series,
        trends,
        offsets,
        spec: spec.clone(),
    })
}

/// Smallest RMS distance between two planted region trends, in units of the noise std.
pub fn planted_separation(data: &SyntheticData) -> f64 {
    let m = data.spec.n_regions;
    let len = data.spec.steps * data.spec.channels;
    let mut best = f64::INFINITY;
    for a in 0..m {
        for b in a + 1..m {
            let ta = &data.trends[a * len..(a + 1) * len];
            let tb = &data.trends[b * len..(b + 1) * len];
            let ms = ta.iter().zip(tb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / len as f64;
            best = best.min(ms.sqrt());
        }
    }
    best / data.spec.noise_sigma
}
