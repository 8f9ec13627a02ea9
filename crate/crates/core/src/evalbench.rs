//! Error metrics, quantile coverage, clustering agreement, the cross-scale
//! cost model and a wall-clock micro-benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nestmodel::{LossWeights, ModelConfig, NestModel};
use crate::numcore::Graph;
use crate::trainer::{sample_loss, Sample};

/// Entries with `|truth|` below this are excluded from MAPE.
pub const MAPE_MASK: f64 = 1e-4;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(invalid(format!("prediction has {} values, truth {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(invalid("metrics need at least one value"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percent; `None` when every entry is masked.
    pub value: Option<f64>,
    pub masked: usize,
}

pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Mape> {
    check(pred, truth)?;
    let (mut sum, mut used) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() >= MAPE_MASK {
            sum += ((p - t) / t).abs();
            used += 1;
        }
    }
    Ok(Mape {
        value: (used > 0).then(|| 100.0 * sum / used as f64),
        masked: pred.len() - used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based step ahead; 0 for the all-step average.
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub samples: usize,
    pub masked: usize,
}

impl HorizonMetrics {
    pub fn compute(step: usize, pred: &[f64], truth: &[f64]) -> Result<Self> {
        let m = mape(pred, truth)?;
        Ok(Self {
            step,
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            mape: m.value,
            samples: pred.len(),
            masked: m.masked,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    pub average: HorizonMetrics,
}

/// Default reporting steps.
pub const REPORT_STEPS: [usize; 3] = [3, 6, 12];

/// Metrics per requested step and over all steps. Each block in `preds` and
/// `truths` is one forecast window laid out `N × H × C`.
pub fn metrics_report(preds: &[Vec<f64>], truths: &[Vec<f64>], nodes: usize, horizon: usize, channels: usize, steps: &[usize]) -> Result<MetricsReport> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(invalid("need matching, non-empty prediction and truth windows"));
    }
    let block = nodes * horizon * channels;
    if preds.iter().chain(truths).any(|b| b.len() != block) {
        return Err(invalid(format!("every window must hold {block} values")));
    }
    let at_step = |blocks: &[Vec<f64>], s: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(blocks.len() * nodes * channels);
        for b in blocks {
            for i in 0..nodes {
                let base = (i * horizon + s) * channels;
                out.extend_from_slice(&b[base..base + channels]);
            }
        }
        out
    };
    let horizons = steps
        .iter()
        .filter(|&&s| s >= 1 && s <= horizon)
        .map(|&s| HorizonMetrics::compute(s, &at_step(preds, s - 1), &at_step(truths, s - 1)))
        .collect::<Result<Vec<_>>>()?;
    let all_p: Vec<f64> = preds.iter().flatten().copied().collect();
    let all_t: Vec<f64> = truths.iter().flatten().copied().collect();
    Ok(MetricsReport {
        horizons,
        average: HorizonMetrics::compute(0, &all_p, &all_t)?,
    })
}

/// Fraction of `truth` inside `[forecast(low), forecast(high)]`.
pub fn quantile_coverage(forecasts: &[Vec<f64>], levels: &[f64], truth: &[f64], low: f64, high: f64) -> Result<f64> {
    if low > high {
        return Err(invalid(format!("band [{low}, {high}] is inverted")));
    }
    let find = |tau: f64| {
        levels
            .iter()
            .position(|&l| l == tau)
            .ok_or_else(|| invalid(format!("quantile level {tau} not among {levels:?}")))
    };
    let (lo, hi) = (find(low)?, find(high)?);
    if forecasts.len() != levels.len() {
        return Err(invalid("one forecast per quantile level required"));
    }
    check(&forecasts[lo], truth)?;
    check(&forecasts[hi], truth)?;
    let inside = truth
        .iter()
        .enumerate()
        .filter(|&(k, &y)| forecasts[lo][k] <= y && y <= forecasts[hi][k])
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid("labelings must be non-empty and of equal length"));
    }
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&n| c2(n)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total.max(1.0);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < f64::EPSILON {
        // Both labelings trivial (all-one-cluster or all-singletons): agreement is exact.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Forward multiply-adds of the cross-scale stack with `attn_dim = d` and no MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    /// `QKᵀ` and weighted sums of both directions: `4·N·M·d` per layer.
    pub interaction: u64,
    /// Query/key/value/output maps: `4·(N+M)·d²` per layer.
    pub projections: u64,
    pub total: u64,
    /// Full node self-attention reference: `2·l·N²·d`.
    pub self_attention: u64,
}

pub fn attention_cost(n: usize, m: usize, d: usize, l: usize) -> AttentionCost {
    let (n, m, d, l) = (n as u64, m as u64, d as u64, l as u64);
    let interaction = l * 4 * n * m * d;
    let projections = l * 4 * (n + m) * d * d;
    AttentionCost {
        interaction,
        projections,
        total: interaction + projections,
        self_attention: 2 * l * n * n * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: BenchConfig,
    pub runs: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub params: usize,
}

/// Random teacher-forced training sample matching `cfg`.
pub fn random_sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    Sample {
        start: 0,
        cycle_pos: 0,
        x_win: v(cfg.node_window_len()),
        node_target: v(cfg.node_patch_len()),
        region_current: v(cfg.region_patch_len()),
        region_next: v(cfg.region_patch_len()),
        region_past: v(cfg.region_patch_len()),
    }
}

/// Median wall time of one forward+backward pass of the training objective
/// per configuration; `warmup` runs are discarded first. Timed runs cycle
/// through the configurations so slow drift in host load hits each alike.
pub fn bench(configs: &[BenchConfig], runs: usize, warmup: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if runs == 0 {
        return Err(invalid("bench needs at least one timed run"));
    }
    let mut setups = configs
        .iter()
        .map(|bc| {
            let cfg = ModelConfig {
                n_nodes: bc.n,
                n_regions: bc.m,
                embed_dim: bc.d,
                attn_dim: bc.d,
                layers: bc.layers,
                ..ModelConfig::default()
            };
            let model = NestModel::new(cfg.clone(), seed)?;
            let sample = random_sample(&cfg, seed);
            Ok((cfg, model, sample))
        })
        .collect::<Result<Vec<_>>>()?;
    let once = |(cfg, model, sample): &mut (ModelConfig, NestModel, Sample)| -> Result<f64> {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let (loss, _) = sample_loss(&mut g, &model.params, cfg, sample, true, LossWeights::default())?;
        model.params.zero_grads();
        g.backward(loss, &mut model.params)?;
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };
    let mut times = vec![Vec::with_capacity(runs); setups.len()];
    for round in 0..warmup + runs {
        for (setup, t) in setups.iter_mut().zip(&mut times) {
            let ms = once(setup)?;
            if round >= warmup {
                t.push(ms);
            }
        }
    }
    Ok(configs
        .iter()
        .zip(&mut times)
        .zip(&setups)
        .map(|((bc, t), (_, model, _))| {
            t.sort_by(f64::total_cmp);
            let mid = t.len() / 2;
            let median = if t.len().is_multiple_of(2) { 0.5 * (t[mid - 1] + t[mid]) } else { t[mid] };
            BenchRow {
                config: *bc,
                runs,
                median_ms: median,
                min_ms: t[0],
                max_ms: t[t.len() - 1],
                params: model.param_count(),
            }
        })
        .collect())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,m,d,layers,params,runs,median_ms,min_ms,max_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.config.n, r.config.m, r.config.d, r.config.layers, r.params, r.runs, r.median_ms, r.min_ms, r.max_ms
        ));
    }
    s
}
