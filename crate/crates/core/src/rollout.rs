//! Autoregressive inference over an arbitrary horizon: the node history is
//! extended with each predicted patch and the predicted next-region median
//! becomes the following guidance.

use serde::{Deserialize, Serialize};

use crate::datakit::{Normalizer, SeriesTensor};
use crate::error::{invalid, Result};
use crate::evalbench::mae;
use crate::nestmodel::{GuidanceMode, NestModel};
use crate::regionalize::{pool_regions, RegionModel};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    /// `N × H × C`.
    pub forecast: Vec<f64>,
    /// Per iteration, per quantile level, `M × P × C`: the region patch each pass predicted.
    pub region_quantiles: Vec<Vec<Vec<f64>>>,
    pub iterations: usize,
}

/// Where each iteration's guidance comes from.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// Boundary median first, then each pass's next-region median.
    SelfGuided,
    /// Externally supplied patch per iteration (e.g. ground truth).
    Given(&'a [Vec<f64>]),
}

/// Drops the first `add.len()/(N·C)` steps of each node and appends `add`.
fn slide(history: &mut [f64], add: &[f64], nodes: usize, len: usize, channels: usize) {
    let p = add.len() / (nodes * channels);
    for i in 0..nodes {
        let row = &mut history[i * len * channels..(i + 1) * len * channels];
        let extra = &add[i * p * channels..(i + 1) * p * channels];
        if p >= len {
            row.copy_from_slice(&extra[(p - len) * channels..]);
        } else {
            row.copy_within(p * channels.., 0);
            row[(len - p) * channels..].copy_from_slice(extra);
        }
    }
}

/// Pools the last `patch` steps of a node history into an `M × P × C` block.
fn pooled_tail(history: &[f64], regions: &RegionModel, len: usize, patch: usize, channels: usize) -> Result<Vec<f64>> {
    let n = regions.n_nodes;
    let m = regions.n_regions;
    let mut out = vec![0.0; m * patch * channels];
    for s in 0..patch {
        let step: Vec<f64> = (0..n)
            .flat_map(|i| {
                let base = (i * len + len - patch + s) * channels;
                history[base..base + channels].to_vec()
            })
            .collect();
        let pooled = pool_regions(&step, channels, &regions.assignment, m)?;
        for r in 0..m {
            let dst = (r * patch + s) * channels;
            out[dst..dst + channels].copy_from_slice(&pooled[r * channels..(r + 1) * channels]);
        }
    }
    Ok(out)
}

/// Forecasts `horizon` steps after `history` (`N × L × C`, model space) whose
/// first step sits at calendar position `cycle_pos`.
pub fn rollout_with(
    model: &NestModel,
    regions: &RegionModel,
    history: &[f64],
    cycle_pos: usize,
    horizon: usize,
    guidance: Guidance<'_>,
) -> Result<RolloutOutput> {
    let cfg = &model.config;
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    if history.len() != cfg.node_window_len() {
        return Err(invalid(format!("history has {} values, model expects {}", history.len(), cfg.node_window_len())));
    }
    if regions.n_nodes != cfg.n_nodes || regions.n_regions != cfg.n_regions {
        return Err(invalid("region model does not match the forecaster's node/region counts"));
    }
    let (n, l, p, c) = (cfg.n_nodes, cfg.lookback, cfg.patch, cfg.channels);
    let iterations = horizon.div_ceil(p);
    if let Guidance::Given(g) = guidance {
        if g.len() < iterations || g.iter().any(|b| b.len() != cfg.region_patch_len()) {
            return Err(invalid(format!("need {iterations} guidance patches of {} values", cfg.region_patch_len())));
        }
    }
    let mut hist = history.to_vec();
    let mut pos = cycle_pos;
    let mut current = match (cfg.guidance, guidance) {
        (GuidanceMode::Past, _) => pooled_tail(&hist, regions, l, p, c)?,
        (GuidanceMode::Future, Guidance::Given(g)) => g[0].clone(),
        (GuidanceMode::Future, Guidance::SelfGuided) => model.forward(&hist, None, pos)?.boundary_median().to_vec(),
    };
    let mut patches = Vec::with_capacity(iterations);
    let mut region_quantiles = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let out = model.forward(&hist, Some(&current), pos)?;
        slide(&mut hist, &out.node, n, l, c);
        pos += p;
        current = match (cfg.guidance, guidance) {
            (GuidanceMode::Past, _) => pooled_tail(&hist, regions, l, p, c)?,
            (GuidanceMode::Future, Guidance::Given(g)) => g.get(k + 1).cloned().unwrap_or_default(),
            (GuidanceMode::Future, Guidance::SelfGuided) => out.region_median().to_vec(),
        };
        patches.push(out.node);
        region_quantiles.push(out.region);
    }
    let mut forecast = Vec::with_capacity(n * horizon * c);
    for i in 0..n {
        for s in 0..horizon {
            let (k, off) = (s / p, s % p);
            let base = (i * p + off) * c;
            forecast.extend_from_slice(&patches[k][base..base + c]);
        }
    }
    Ok(RolloutOutput {
        forecast,
        region_quantiles,
        iterations,
    })
}

/// Self-guided rollout.
pub fn rollout(model: &NestModel, regions: &RegionModel, history: &[f64], cycle_pos: usize, horizon: usize) -> Result<RolloutOutput> {
    rollout_with(model, regions, history, cycle_pos, horizon, Guidance::SelfGuided)
}

/// Forecast windows over a series: inputs at `start .. start+L`, targets at
/// `start+L .. start+L+H`, for every `stride`-th start.
#[derive(Debug, Clone)]
pub struct WindowForecasts {
    pub starts: Vec<usize>,
    /// `N × H × C` per window, in original units when a normaliser was given.
    pub preds: Vec<Vec<f64>>,
    pub truths: Vec<Vec<f64>>,
    /// Repeat-last-observation baseline for the same windows.
    pub persistence: Vec<Vec<f64>>,
    pub horizon: usize,
}

/// Rolls the model over `data` (model space). `normalizer` maps predictions
/// and truth back to original units.
pub fn forecast_windows(
    model: &NestModel,
    regions: &RegionModel,
    data: &SeriesTensor,
    normalizer: Option<&Normalizer>,
    horizon: usize,
    stride: usize,
    guidance_truth: Option<&SeriesTensor>,
) -> Result<WindowForecasts> {
    let cfg = &model.config;
    let (n, l, c) = (cfg.n_nodes, cfg.lookback, cfg.channels);
    if data.nodes() != n || data.channels() != c {
        return Err(invalid("series does not match the model"));
    }
    let extra = if guidance_truth.is_some() { cfg.patch } else { 0 };
    let need = l + horizon + extra;
    if need > data.steps() {
        return Err(invalid(format!("horizon {horizon} plus look-back {l} exceeds the {} available steps", data.steps())));
    }
    let starts: Vec<usize> = (0..=data.steps() - need).step_by(stride.max(1)).collect();
    let denorm = |block: Vec<f64>, steps: usize| match normalizer {
        Some(z) => z.denormalize_block(&block, steps),
        None => block,
    };
    let mut out = WindowForecasts {
        starts: starts.clone(),
        preds: Vec::new(),
        truths: Vec::new(),
        persistence: Vec::new(),
        horizon,
    };
    for s in starts {
        let hist = data.window(s, l);
        let pos = data.start_offset + s;
        let fc = match guidance_truth {
            Some(z) => {
                let iters = horizon.div_ceil(cfg.patch);
                let g: Vec<Vec<f64>> = (0..iters).map(|k| z.window(s + l + k * cfg.patch, cfg.patch)).collect();
                rollout_with(model, regions, &hist, pos, horizon, Guidance::Given(&g))?
            }
            None => rollout(model, regions, &hist, pos, horizon)?,
        };
        let mut last = Vec::with_capacity(n * horizon * c);
        for i in 0..n {
            let base = (i * l + l - 1) * c;
            for _ in 0..horizon {
                last.extend_from_slice(&hist[base..base + c]);
            }
        }
        out.preds.push(denorm(fc.forecast, horizon));
        out.truths.push(denorm(data.window(s + l, horizon), horizon));
        out.persistence.push(denorm(last, horizon));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMae {
    pub horizon: usize,
    pub mae: f64,
}

/// MAE at each requested step offset (1-based) over rollouts on `data`.
pub fn long_horizon_eval(
    model: &NestModel,
    regions: &RegionModel,
    data: &SeriesTensor,
    normalizer: Option<&Normalizer>,
    horizons: &[usize],
    stride: usize,
) -> Result<Vec<HorizonMae>> {
    let max_h = *horizons.iter().max().ok_or_else(|| invalid("no horizons requested"))?;
    if horizons.contains(&0) {
        return Err(invalid("horizons are 1-based"));
    }
    let wf = forecast_windows(model, regions, data, normalizer, max_h, stride, None)?;
    let (n, c) = (model.config.n_nodes, model.config.channels);
    horizons
        .iter()
        .map(|&h| {
            let pick = |blocks: &[Vec<f64>]| -> Vec<f64> {
                blocks
                    .iter()
                    .flat_map(|b| (0..n).flat_map(move |i| b[(i * max_h + h - 1) * c..(i * max_h + h) * c].to_vec()))
                    .collect()
            };
            Ok(HorizonMae {
                horizon: h,
                mae: mae(&pick(&wf.preds), &pick(&wf.truths))?,
            })
        })
        .collect()
}
