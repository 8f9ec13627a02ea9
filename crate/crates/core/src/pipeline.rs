//! Run configuration and the end-to-end pipeline shared by the CLI and tests:
//! generate → split → normalise → regionalise → train → roll out → score.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::fnv1a64;
use crate::datakit::{chronological_split, generate_synthetic, Normalizer, SeriesTensor, SplitSpec, Splits, SyntheticSpec};
use crate::error::{NestError, Result};
use crate::evalbench::{mae, metrics_report, MetricsReport, REPORT_STEPS};
use crate::nestmodel::{GuidanceMode, ModelConfig, NestModel};
use crate::regionalize::{regionalize_pipeline, RegionConfig, RegionModel};
use crate::rollout::{forecast_windows, WindowForecasts};
use crate::trainer::{train_loop, ScaledSeries, TrainConfig, TrainOutcome};

/// Forecaster knobs that do not depend on the data. Node, region and channel
/// counts and the calendar come from the dataset and region model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub lookback: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub layers: usize,
    pub quantiles: Vec<f64>,
    pub huber_delta: f64,
    pub mlp: bool,
    pub cross_attention: bool,
    pub guidance: GuidanceMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            lookback: m.lookback,
            patch: m.patch,
            embed_dim: m.embed_dim,
            attn_dim: m.attn_dim,
            layers: m.layers,
            quantiles: m.quantiles,
            huber_delta: m.huber_delta,
            mlp: m.mlp,
            cross_attention: m.cross_attention,
            guidance: m.guidance,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, data: &SeriesTensor, regions: &RegionModel) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_nodes: data.nodes(),
            n_regions: regions.n_regions,
            channels: data.channels(),
            lookback: self.lookback,
            patch: self.patch,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            layers: self.layers,
            quantiles: self.quantiles.clone(),
            steps_per_day: data.steps_per_day,
            days_per_week: data.days_per_week,
            huber_delta: self.huber_delta,
            mlp: self.mlp,
            cross_attention: self.cross_attention,
            guidance: self.guidance,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollout horizon in steps.
    pub horizon: usize,
    /// Spacing between evaluated test windows.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizon: 12, stride: 4 }
    }
}

/// Every pipeline knob, one TOML section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; `apply_seed` copies it into every stochastic component.
    pub seed: u64,
    pub data: SyntheticSpec,
    pub split: SplitSpec,
    pub regions: RegionConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| NestError::Config(e.message().to_owned()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NestError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Hash of the canonical serialisation, for provenance manifests.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a64(self.to_toml()?.as_bytes())))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.regions.seed = seed;
        self.train.seed = seed;
    }

    /// The configuration the demo runs: a month of 15-minute data over three
    /// planted regions with level shifts, and a short training budget.
    pub fn demo(seed: u64) -> Self {
        let mut cfg = Self {
            data: SyntheticSpec {
                regime_shift_rate: 0.01,
                ..SyntheticSpec::default()
            },
            train: TrainConfig::desk_scale(30),
            ..Self::default()
        };
        cfg.apply_seed(seed);
        cfg
    }
}

/// Data after splitting and normalisation with train-only statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub normalizer: Normalizer,
    /// Normalised train/val/test.
    pub train: SeriesTensor,
    pub val: SeriesTensor,
    pub test: SeriesTensor,
}

pub fn prepare(data: &SeriesTensor, split: &SplitSpec, arch: &ArchConfig, horizon: usize) -> Result<Prepared> {
    let min_len = arch.lookback + arch.patch.max(horizon) + arch.patch;
    let splits = chronological_split(data, split, min_len)?;
    let normalizer = Normalizer::fit(&splits.train);
    Ok(Prepared {
        train: normalizer.normalize(&splits.train)?,
        val: normalizer.normalize(&splits.val)?,
        test: normalizer.normalize(&splits.test)?,
        splits,
        normalizer,
    })
}

/// Trains a fresh forecaster on prepared data.
pub fn fit_forecaster(prep: &Prepared, regions: &RegionModel, arch: &ArchConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = arch.model_config(&prep.train, regions)?;
    let model = NestModel::new(cfg, train.seed)?;
    let tr = ScaledSeries::new(prep.train.clone(), regions)?;
    let va = ScaledSeries::new(prep.val.clone(), regions)?;
    train_loop(model, &tr, &va, train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestScore {
    pub report: MetricsReport,
    /// MAE over all windows and steps.
    pub mae: f64,
    pub persistence_mae: f64,
    pub windows: usize,
}

/// Self-guided rollouts over the test split, scored in original units.
pub fn score_test(model: &NestModel, regions: &RegionModel, prep: &Prepared, eval: &EvalConfig) -> Result<(TestScore, WindowForecasts)> {
    let wf = forecast_windows(model, regions, &prep.test, Some(&prep.normalizer), eval.horizon, eval.stride, None)?;
    let flat = |b: &[Vec<f64>]| b.concat();
    let (preds, truths) = (flat(&wf.preds), flat(&wf.truths));
    let steps: Vec<usize> = REPORT_STEPS.iter().copied().filter(|&s| s <= eval.horizon).collect();
    let steps = if steps.is_empty() { vec![eval.horizon] } else { steps };
    let report = metrics_report(&wf.preds, &wf.truths, model.config.n_nodes, eval.horizon, model.config.channels, &steps)?;
    let score = TestScore {
        report,
        mae: mae(&preds, &truths)?,
        persistence_mae: mae(&flat(&wf.persistence), &truths)?,
        windows: wf.preds.len(),
    };
    Ok((score, wf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub config_hash: String,
    pub nodes: usize,
    pub steps: usize,
    pub regions: usize,
    pub params: usize,
    pub best_epoch: usize,
    pub train_steps: u64,
    pub full: TestScore,
    /// Same pipeline with past-region guidance.
    pub past_guidance: TestScore,
}

impl DemoSummary {
    pub fn beats_persistence(&self) -> bool {
        self.full.mae < self.full.persistence_mae
    }
}

impl fmt::Display for DemoSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed            {}", self.seed)?;
        writeln!(f, "config hash     {}", self.config_hash)?;
        writeln!(f, "data            {} nodes x {} steps, {} regions", self.nodes, self.steps, self.regions)?;
        writeln!(f, "model           {} parameters, best epoch {}, {} updates", self.params, self.best_epoch, self.train_steps)?;
        writeln!(f, "test windows    {}", self.full.windows)?;
        for h in &self.full.report.horizons {
            writeln!(f, "  step {:>3}      MAE {:.4}  RMSE {:.4}", h.step, h.mae, h.rmse)?;
        }
        writeln!(f, "test MAE        {:.4} (future guidance)", self.full.mae)?;
        writeln!(f, "test MAE        {:.4} (past guidance)", self.past_guidance.mae)?;
        writeln!(f, "persistence MAE {:.4}", self.full.persistence_mae)?;
        write!(f, "beats persistence: {}", if self.beats_persistence() { "yes" } else { "no" })
    }
}

/// Everything `demo` produces, for callers that also want the artefacts.
pub struct DemoRun {
    pub data: SeriesTensor,
    pub regions: RegionModel,
    pub prepared: Prepared,
    pub outcome: TrainOutcome,
    pub forecasts: WindowForecasts,
    pub summary: DemoSummary,
}

pub fn run_demo(cfg: &RunConfig) -> Result<DemoRun> {
    let data = generate_synthetic(&cfg.data)?.series;
    let prepared = prepare(&data, &cfg.split, &cfg.model, cfg.eval.horizon)?;
    let regions = regionalize_pipeline(&prepared.splits.train, &cfg.regions)?;
    let outcome = fit_forecaster(&prepared, &regions, &cfg.model, &cfg.train)?;
    let (full, forecasts) = score_test(&outcome.model, &regions, &prepared, &cfg.eval)?;
    let past_arch = ArchConfig {
        guidance: GuidanceMode::Past,
        ..cfg.model.clone()
    };
    let past = fit_forecaster(&prepared, &regions, &past_arch, &cfg.train)?;
    let (past_guidance, _) = score_test(&past.model, &regions, &prepared, &cfg.eval)?;
    let summary = DemoSummary {
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        nodes: data.nodes(),
        steps: data.steps(),
        regions: regions.n_regions,
        params: outcome.model.param_count(),
        best_epoch: outcome.best_epoch,
        train_steps: outcome.steps,
        full,
        past_guidance,
    };
    Ok(DemoRun {
        data,
        regions,
        prepared,
        outcome,
        forecasts,
        summary,
    })
}
