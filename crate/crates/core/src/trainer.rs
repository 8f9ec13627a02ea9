//! Scheduled-sampling training: every sample runs a zero-guidance pass whose
//! boundary head is supervised and whose detached median may stand in for the
//! true guidance, then a guided pass supervising the node and next-region heads.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::SeriesTensor;
use crate::error::{invalid, NestError, Result};
use crate::nestmodel::{build_forward, composite_loss, GuidanceMode, LossTargets, LossTerms, LossWeights, ModelConfig, NestModel};
use crate::numcore::{Graph, ParamStore, Var};
use crate::regionalize::RegionModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Teacher-forcing decay per epoch.
    pub gamma: f64,
    /// Floor on the teacher-forcing probability.
    pub min_teacher_forcing: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// Training windows drawn per epoch (all when `None`).
    pub windows_per_epoch: Option<usize>,
    /// Validation windows per epoch, evenly spaced (all when `None`).
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            gamma: 0.97,
            min_teacher_forcing: 0.25,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            patience: 30,
            clip_norm: 5.0,
            lambda1: 0.1,
            lambda2: 0.2,
            seed: 0,
            windows_per_epoch: None,
            val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NestError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0,1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.min_teacher_forcing) {
            return bad(format!("min_teacher_forcing must be in [0,1], got {}", self.min_teacher_forcing));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return bad("patience and batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("lr must be > 0; weight_decay and clip_norm must be >= 0".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        Ok(())
    }

    /// Settings for budgets of tens of epochs over sampled windows. Teacher
    /// forcing decays faster (γ = 0.9) so self-guided behaviour is reached
    /// within the budget; with the default γ the model leans on true guidance
    /// for most of a short run and self-guided validation loss rises.
    pub fn desk_scale(max_epochs: usize) -> Self {
        Self {
            max_epochs,
            gamma: 0.9,
            lr: 3e-3,
            patience: 15,
            windows_per_epoch: Some(512),
            val_windows: Some(64),
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

/// `max(r, γ^epoch)`.
pub fn sampling_prob(epoch: usize, gamma: f64, r: f64) -> f64 {
    gamma.powi(epoch.min(i32::MAX as usize) as i32).max(r)
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tensor.len()]);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (k, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Scales all gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Node series and their region means, both in model (normalised) space.
#[derive(Debug, Clone)]
pub struct ScaledSeries {
    pub nodes: SeriesTensor,
    pub regions: SeriesTensor,
}

/// Inputs and targets of one training window starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub start: usize,
    pub cycle_pos: usize,
    pub x_win: Vec<f64>,
    pub node_target: Vec<f64>,
    /// Region means over the patch being forecast.
    pub region_current: Vec<f64>,
    /// Region means over the patch after that.
    pub region_next: Vec<f64>,
    /// Region means over the last observed patch.
    pub region_past: Vec<f64>,
}

impl Sample {
    pub fn targets(&self) -> LossTargets<'_> {
        LossTargets {
            node: &self.node_target,
            region_next: &self.region_next,
            region_current: &self.region_current,
        }
    }
}

impl ScaledSeries {
    pub fn new(nodes: SeriesTensor, regions: &RegionModel) -> Result<Self> {
        let pooled = regions.pool_series(&nodes)?;
        Ok(Self { nodes, regions: pooled })
    }

    pub fn steps(&self) -> usize {
        self.nodes.steps()
    }

    /// Window starts whose input and both target patches fit in the series.
    pub fn window_starts(&self, cfg: &ModelConfig) -> Vec<usize> {
        let need = cfg.lookback + 2 * cfg.patch;
        (0..(self.steps() + 1).saturating_sub(need)).collect()
    }

    pub fn sample(&self, cfg: &ModelConfig, start: usize) -> Result<Sample> {
        let (l, p) = (cfg.lookback, cfg.patch);
        if start + l + 2 * p > self.steps() {
            return Err(invalid(format!("window at {start} overruns {} steps", self.steps())));
        }
        if self.nodes.nodes() != cfg.n_nodes || self.regions.nodes() != cfg.n_regions {
            return Err(invalid("series does not match the model's node/region counts"));
        }
        Ok(Sample {
            start,
            cycle_pos: self.nodes.start_offset + start,
            x_win: self.nodes.window(start, l),
            node_target: self.nodes.window(start + l, p),
            region_current: self.regions.window(start + l, p),
            region_next: self.regions.window(start + l + p, p),
            region_past: self.regions.window(start + l - p.min(l), p.min(l)),
        })
    }
}

/// Guidance fed to the guided pass: ground truth when `teacher` is set,
/// otherwise the detached median boundary forecast. Past mode ignores both.
fn guidance_for<'a>(cfg: &ModelConfig, sample: &'a Sample, teacher: bool, boundary_median: &'a [f64]) -> &'a [f64] {
    match cfg.guidance {
        GuidanceMode::Past => &sample.region_past,
        GuidanceMode::Future if teacher => &sample.region_current,
        GuidanceMode::Future => boundary_median,
    }
}

/// Records the training objective for one sample: a zero-guidance pass for
/// the boundary term, then a guided pass for the node and next-region terms.
pub fn sample_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    sample: &Sample,
    teacher: bool,
    w: LossWeights,
) -> Result<(Var, [Var; 3])> {
    let boot = build_forward(g, store, cfg, &sample.x_win, None, sample.cycle_pos)?;
    // Values only: the guided pass sees the median as a constant.
    let median = g.value(boot.boundary[cfg.median_index()]).data().to_vec();
    let guidance = guidance_for(cfg, sample, teacher, &median).to_vec();
    let main = build_forward(g, store, cfg, &sample.x_win, Some(&guidance), sample.cycle_pos)?;
    let l = composite_loss(g, cfg, main.node, &main.region, &boot.boundary, &sample.targets(), w)?;
    Ok((l.total, [l.node, l.region, l.boundary]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub node: f64,
    pub region: f64,
    pub boundary: f64,
    pub grad_norm: f64,
}

/// One optimiser update on the batch mean of the sample objectives.
pub fn train_step(
    model: &mut NestModel,
    opt: &mut AdamW,
    batch: &[Sample],
    teacher: &[bool],
    w: LossWeights,
    clip_norm: f64,
) -> Result<StepStats> {
    if batch.is_empty() || batch.len() != teacher.len() {
        return Err(invalid("batch and teacher-forcing masks must be non-empty and aligned"));
    }
    let mut g = Graph::new();
    let mut totals = Vec::with_capacity(batch.len());
    let mut parts = [0.0; 3];
    for (s, &tf) in batch.iter().zip(teacher) {
        let (total, terms) = sample_loss(&mut g, &model.params, &model.config, s, tf, w)?;
        totals.push(total);
        for (p, t) in parts.iter_mut().zip(terms) {
            *p += g.scalar(t) / batch.len() as f64;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let loss = g.weighted_sum(&totals.iter().map(|&t| (t, inv)).collect::<Vec<_>>())?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(NestError::NonFinite(format!(
            "training loss {value} (node {}, region {}, boundary {}) after {} steps",
            parts[0],
            parts[1],
            parts[2],
            opt.steps()
        )));
    }
    model.params.zero_grads();
    g.backward(loss, &mut model.params)?;
    let grad_norm = clip_grad_norm(&mut model.params, clip_norm);
    opt.step(&mut model.params);
    Ok(StepStats {
        loss: value,
        node: parts[0],
        region: parts[1],
        boundary: parts[2],
        grad_norm,
    })
}

/// Forecast of one window the way inference produces it: boundary median
/// from zero guidance, then the guided pass (or past-patch guidance).
pub fn self_guided_forecast(model: &NestModel, sample: &Sample) -> Result<crate::nestmodel::ForecastBundle> {
    let cfg = &model.config;
    let boot = model.forward(&sample.x_win, None, sample.cycle_pos)?;
    let guidance = match cfg.guidance {
        GuidanceMode::Past => sample.region_past.clone(),
        GuidanceMode::Future => boot.boundary_median().to_vec(),
    };
    let mut out = model.forward(&sample.x_win, Some(&guidance), sample.cycle_pos)?;
    out.boundary = boot.boundary;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    /// Composite loss under self-generated guidance.
    pub loss: f64,
    /// Node-patch MAE in model space.
    pub mae: f64,
}

pub fn validate(model: &NestModel, data: &ScaledSeries, starts: &[usize], w: LossWeights) -> Result<ValidationStats> {
    if starts.is_empty() {
        return Err(invalid("no validation windows"));
    }
    let (mut loss, mut mae) = (0.0, 0.0);
    for &s in starts {
        let sample = data.sample(&model.config, s)?;
        let bundle = self_guided_forecast(model, &sample)?;
        loss += LossTerms::evaluate(&bundle, &sample.targets(), &model.config, w)?.total;
        mae += bundle
            .node
            .iter()
            .zip(&sample.node_target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / bundle.node.len() as f64;
    }
    let k = starts.len() as f64;
    Ok(ValidationStats {
        loss: loss / k,
        mae: mae / k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub p_tf: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: NestModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
}

impl TrainOutcome {
    /// One JSON object per line.
    pub fn write_history(&self, mut out: impl Write) -> Result<()> {
        for r in &self.history {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

fn evenly_spaced(starts: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k > 0 && k < starts.len() => (0..k).map(|i| starts[i * starts.len() / k]).collect(),
        _ => starts.to_vec(),
    }
}

/// Epoch loop with decaying teacher forcing, per-epoch validation, early
/// stopping and best-checkpoint restore.
pub fn train_loop(mut model: NestModel, train: &ScaledSeries, val: &ScaledSeries, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = model.config.clone();
    let mut train_starts = train.window_starts(&mcfg);
    let val_starts = evenly_spaced(&val.window_starts(&mcfg), cfg.val_windows);
    if train_starts.is_empty() || val_starts.is_empty() {
        return Err(invalid("training or validation split too short for one window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg);
    let w = cfg.weights();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let p_tf = sampling_prob(epoch, cfg.gamma, cfg.min_teacher_forcing);
        train_starts.shuffle(&mut rng);
        let take = cfg.windows_per_epoch.unwrap_or(train_starts.len()).min(train_starts.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in train_starts[..take].chunks(cfg.batch_size) {
            let batch = chunk.iter().map(|&s| train.sample(&mcfg, s)).collect::<Result<Vec<_>>>()?;
            let teacher: Vec<bool> = batch.iter().map(|_| rng.random_bool(p_tf)).collect();
            epoch_loss += train_step(&mut model, &mut opt, &batch, &teacher, w, cfg.clip_norm)?.loss;
            batches += 1;
        }
        let v = validate(&model, val, &val_starts, w)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss: v.loss,
            val_mae: v.mae,
            p_tf,
            steps: opt.steps(),
        });
        if v.loss < best.0 {
            best = (v.loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.1,
        best_val_loss: best.0,
        steps: opt.steps(),
    })
}
