mod provenance;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nest_core::datakit::{chronological_split, generate_synthetic, load_dataset, save_dataset, Normalizer, SeriesTensor, SplitSpec, SyntheticSpec};
use nest_core::evalbench::{bench, bench_csv, metrics_report, BenchConfig, MetricsReport};
use nest_core::nestmodel::{load_checkpoint, save_checkpoint, CheckpointManifest, GuidanceMode, NestModel};
use nest_core::pipeline::{fit_forecaster, prepare, run_demo, score_test, EvalConfig, Prepared, RunConfig};
use nest_core::regionalize::{load_region_model, regionalize_pipeline, save_region_model, ChunkMode, RegionConfig, RegionModel};
use nest_core::rollout::rollout;
use nest_core::snrcheck::run_snr_check;
use nest_core::{NestError, Result};

use provenance::Sidecar;

#[derive(Parser)]
#[command(name = "nest", version, about = "Nested spatio-temporal forecasting: regionalize, train, forecast, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted regions.
    GenData(GenDataArgs),
    /// Partition nodes into regions by spectral clustering.
    Cluster(ClusterArgs),
    /// Train a forecaster on the train/validation splits.
    Train(TrainArgs),
    /// Forecast the steps following the end of a dataset.
    Infer(InferArgs),
    /// Score rollouts of a checkpoint, or compare a forecast file with truth.
    Eval(EvalArgs),
    /// Check the cluster-centre SNR bound on random clusters.
    SnrCheck(SnrArgs),
    /// Time forward and backward passes across model sizes.
    Bench(BenchArgs),
    /// Run the whole pipeline end to end and print a summary.
    Demo(DemoArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of planted regions.
    #[arg(long, default_value_t = 3)]
    regions: usize,
    #[arg(long, default_value_t = 16)]
    nodes_per_region: usize,
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 96)]
    steps_per_day: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Per-step probability of a regional level shift.
    #[arg(long, default_value_t = 0.0)]
    regime_shift_rate: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChunkArg {
    Subsequence,
    ChunkMean,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Region count as a fraction of the node count.
    #[arg(long, default_value_t = 0.2)]
    m_ratio: f64,
    /// Explicit region count (overrides --m-ratio).
    #[arg(long)]
    regions: Option<usize>,
    /// Number of period-aligned chunks.
    #[arg(long, default_value_t = 100)]
    chunks: usize,
    /// Kernel bandwidth (default: median pairwise distance).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = ChunkArg::Subsequence)]
    chunk_mode: ChunkArg,
    /// K-means restarts.
    #[arg(long, default_value_t = 10)]
    n_init: usize,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    /// Fraction of leading steps to cluster on (use the train ratio to avoid leakage).
    #[arg(long, default_value_t = 0.6)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuidanceArg {
    Future,
    Past,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    /// TOML run configuration; its [split], [model] and [train] sections apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Training windows sampled per epoch.
    #[arg(long)]
    windows_per_epoch: Option<usize>,
    /// Region patch fed to the guidance encoder.
    #[arg(long, value_enum)]
    guidance: Option<GuidanceArg>,
    /// Remove the top-down/bottom-up attention.
    #[arg(long)]
    no_cross_attention: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to roll out over the test split of --data.
    #[arg(long, requires_all = ["data", "regions"], conflicts_with = "forecast")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Forecast file to score against --truth.
    #[arg(long, requires = "truth")]
    forecast: Option<PathBuf>,
    /// Dataset covering the forecast's time range.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    horizon: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Train/val/test ratios used to find the test split.
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
    split: Vec<f64>,
    /// JSON metrics report (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SnrArgs {
    #[arg(long, default_value_t = 1000)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Node counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048])]
    nodes: Vec<usize>,
    /// Fixed region count.
    #[arg(long, default_value_t = 16)]
    regions: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV table (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// TOML run configuration replacing the built-in demo settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the dataset, regions, checkpoint, forecast, summary and config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Worker cap from `NEST_THREADS`, bounded by the machine.
fn threads() -> Result<usize> {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("NEST_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(hw)),
            _ => Err(NestError::Config(format!("NEST_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(hw),
    }
}

fn guidance_mode(g: GuidanceArg) -> GuidanceMode {
    match g {
        GuidanceArg::Future => GuidanceMode::Future,
        GuidanceArg::Past => GuidanceMode::Past,
    }
}

fn emit(text: &str, out: Option<&Path>, sidecar: Sidecar) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, text)?;
            sidecar.write_for(p)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_regions: a.regions,
        nodes_per_region: a.nodes_per_region,
        steps: a.days * a.steps_per_day,
        steps_per_day: a.steps_per_day,
        channels: a.channels,
        noise_sigma: a.noise,
        regime_shift_rate: a.regime_shift_rate,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    save_dataset(&data.series, &a.out)?;
    Sidecar::new("gen-data", a.seed, &spec)?.write_for(&a.out)?;
    println!("wrote {} nodes x {} steps to {}", data.series.nodes(), data.series.steps(), a.out.display());
    Ok(())
}

fn leading(data: &SeriesTensor, fraction: f64) -> Result<SeriesTensor> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(NestError::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let end = ((data.steps() as f64 * fraction).floor() as usize).max(1);
    data.slice_time(0, end)
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let cfg = RegionConfig {
        n_regions: a.regions,
        m_ratio: a.m_ratio,
        chunks: a.chunks,
        sigma: a.sigma,
        chunk_mode: match a.chunk_mode {
            ChunkArg::Subsequence => ChunkMode::Subsequence,
            ChunkArg::ChunkMean => ChunkMode::ChunkMean,
        },
        n_init: a.n_init,
        max_iter: a.max_iter,
        seed: a.seed,
        threads: threads()?,
    };
    let model = regionalize_pipeline(&leading(&data, a.fraction)?, &cfg)?;
    save_region_model(&model, &a.out)?;
    Sidecar::new("cluster", a.seed, &cfg)?.input(&a.data).write_for(&a.out)?;
    println!("{} nodes -> {} regions, sizes {:?}", model.n_nodes, model.n_regions, model.sizes());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.apply_seed(s);
    }
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if a.windows_per_epoch.is_some() {
        cfg.train.windows_per_epoch = a.windows_per_epoch;
    }
    if let Some(g) = a.guidance {
        cfg.model.guidance = guidance_mode(g);
    }
    if a.no_cross_attention {
        cfg.model.cross_attention = false;
    }
    cfg.train.validate()?;
    let data = load_dataset(&a.data)?;
    let regions = load_region_model(&a.regions)?;
    let prep = prepare(&data, &cfg.split, &cfg.model, cfg.model.patch)?;
    let outcome = fit_forecaster(&prep, &regions, &cfg.model, &cfg.train)?;
    let manifest = CheckpointManifest {
        config: outcome.model.config.clone(),
        seed: cfg.train.seed,
        step: outcome.steps,
        normalizer: Some(prep.normalizer.clone()),
    };
    save_checkpoint(&manifest, &outcome.model.params, &a.out)?;
    Sidecar::new("train", cfg.seed, &cfg)?.input(&a.data).input(&a.regions).write_for(&a.out)?;
    if let Some(h) = &a.history {
        outcome.write_history(std::fs::File::create(h)?)?;
        Sidecar::new("train", cfg.seed, &cfg)?.input(&a.data).write_for(h)?;
    }
    for r in &outcome.history {
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}  val_mae {:.5}  p_tf {:.3}",
            r.epoch, r.train_loss, r.val_loss, r.val_mae, r.p_tf
        );
    }
    println!("best epoch {} (val loss {:.5}); wrote {}", outcome.best_epoch, outcome.best_val_loss, a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(NestModel, CheckpointManifest)> {
    let (manifest, params) = load_checkpoint(path)?;
    Ok((NestModel::from_checkpoint(&manifest, params), manifest))
}

fn check_regions(model: &NestModel, regions: &RegionModel, data: &SeriesTensor) -> Result<()> {
    let c = &model.config;
    if regions.n_nodes != c.n_nodes || regions.n_regions != c.n_regions || data.nodes() != c.n_nodes || data.channels() != c.channels {
        return Err(NestError::InvalidArgument(format!(
            "checkpoint expects {} nodes, {} regions, {} channels; got data with {} nodes, {} channels and regions {} -> {}",
            c.n_nodes,
            c.n_regions,
            c.channels,
            data.nodes(),
            data.channels(),
            regions.n_nodes,
            regions.n_regions
        )));
    }
    Ok(())
}

/// Self-guided rollout of `horizon` steps past the end of `data`, in original units.
fn forecast_after(model: &NestModel, regions: &RegionModel, data: &SeriesTensor, normalizer: Option<Normalizer>, horizon: usize) -> Result<SeriesTensor> {
    let l = model.config.lookback;
    if data.steps() < l {
        return Err(NestError::InvalidArgument(format!("data has {} steps, the look-back is {l}", data.steps())));
    }
    let tail = data.slice_time(data.steps() - l, data.steps())?;
    let tail = match &normalizer {
        Some(z) => z.normalize(&tail)?,
        None => tail,
    };
    let out = rollout(model, regions, tail.values(), tail.start_offset, horizon)?;
    let values = match &normalizer {
        Some(z) => z.denormalize_block(&out.forecast, horizon),
        None => out.forecast,
    };
    let mut fc = SeriesTensor::new(data.nodes(), horizon, data.channels(), values, data.steps_per_day, data.start_offset + data.steps())?;
    fc.days_per_week = data.days_per_week;
    Ok(fc)
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, manifest) = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let regions = load_region_model(&a.regions)?;
    check_regions(&model, &regions, &data)?;
    let fc = forecast_after(&model, &regions, &data, manifest.normalizer.clone(), a.horizon)?;
    save_dataset(&fc, &a.out)?;
    let knobs = serde_json::json!({ "horizon": a.horizon });
    Sidecar::new("infer", manifest.seed, &knobs)?
        .input(&a.checkpoint)
        .input(&a.data)
        .input(&a.regions)
        .write_for(&a.out)?;
    println!("wrote {}-step forecast for {} nodes to {}", a.horizon, data.nodes(), a.out.display());
    Ok(())
}

fn per_step_csv(report: &MetricsReport) -> String {
    let mut s = String::from("step,mae,rmse,mape\n");
    for h in &report.horizons {
        let mape = h.mape.map_or(String::new(), |v| format!("{v:.6}"));
        s.push_str(&format!("{},{:.6},{:.6},{}\n", h.step, h.mae, h.rmse, mape));
    }
    s
}

fn eval(a: EvalArgs) -> Result<()> {
    let (report, seed) = if let Some(fpath) = &a.forecast {
        let truth_path = a.truth.as_ref().ok_or_else(|| NestError::Config("--forecast needs --truth".into()))?;
        let fc = load_dataset(fpath)?;
        let truth = load_dataset(truth_path)?;
        if fc.nodes() != truth.nodes() || fc.channels() != truth.channels() {
            return Err(NestError::InvalidArgument("forecast and truth disagree on nodes or channels".into()));
        }
        let begin = fc
            .start_offset
            .checked_sub(truth.start_offset)
            .filter(|b| b + fc.steps() <= truth.steps())
            .ok_or_else(|| NestError::InvalidArgument("truth does not cover the forecast's time range".into()))?;
        let t = truth.slice_time(begin, begin + fc.steps())?;
        let steps: Vec<usize> = (1..=fc.steps()).collect();
        let r = metrics_report(&[fc.values().to_vec()], &[t.values().to_vec()], fc.nodes(), fc.steps(), fc.channels(), &steps)?;
        (r, 0)
    } else {
        let (Some(ck), Some(dpath), Some(rpath)) = (&a.checkpoint, &a.data, &a.regions) else {
            return Err(NestError::Config("eval needs --checkpoint/--data/--regions or --forecast/--truth".into()));
        };
        let (model, manifest) = load_model(ck)?;
        let data = load_dataset(dpath)?;
        let regions = load_region_model(rpath)?;
        check_regions(&model, &regions, &data)?;
        let split = SplitSpec {
            train: a.split[0],
            val: a.split[1],
            test: a.split[2],
        };
        let min_len = model.config.lookback + a.horizon;
        let splits = chronological_split(&data, &split, min_len)?;
        let normalizer = manifest
            .normalizer
            .clone()
            .unwrap_or_else(|| Normalizer::fit(&splits.train));
        let prep = Prepared {
            train: normalizer.normalize(&splits.train)?,
            val: normalizer.normalize(&splits.val)?,
            test: normalizer.normalize(&splits.test)?,
            splits,
            normalizer,
        };
        let ec = EvalConfig {
            horizon: a.horizon,
            stride: a.stride,
        };
        let (score, wf) = score_test(&model, &regions, &prep, &ec)?;
        eprintln!("test MAE {:.4}, persistence MAE {:.4}", score.mae, score.persistence_mae);
        let steps: Vec<usize> = (1..=a.horizon).collect();
        let r = metrics_report(&wf.preds, &wf.truths, model.config.n_nodes, a.horizon, model.config.channels, &steps)?;
        (r, manifest.seed)
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let knobs = serde_json::json!({ "horizon": a.horizon, "stride": a.stride, "split": a.split });
    let mut sc = Sidecar::new("eval", seed, &knobs)?;
    for p in [&a.checkpoint, &a.data, &a.regions, &a.forecast, &a.truth].into_iter().flatten() {
        sc = sc.input(p);
    }
    if let Some(c) = &a.csv {
        std::fs::write(c, per_step_csv(&report))?;
        sc.clone().write_for(c)?;
    }
    emit(&json, a.out.as_deref(), sc)
}

fn snr_check(a: SnrArgs) -> Result<()> {
    let summary = run_snr_check(a.clusters, a.seed)?;
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    let knobs = serde_json::json!({ "clusters": a.clusters });
    emit(&json, a.out.as_deref(), Sidecar::new("snr-check", a.seed, &knobs)?)?;
    if !summary.violations.is_empty() {
        eprintln!("{} of {} clusters violate the bound", summary.violations.len(), summary.clusters_tested);
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let configs: Vec<BenchConfig> = a
        .nodes
        .iter()
        .map(|&n| BenchConfig {
            n,
            m: a.regions,
            d: a.dim,
            layers: a.layers,
        })
        .collect();
    let rows = bench(&configs, a.runs, a.warmup, a.seed)?;
    let knobs = serde_json::json!({ "configs": configs, "runs": a.runs, "warmup": a.warmup });
    emit(&bench_csv(&rows), a.out.as_deref(), Sidecar::new("bench", a.seed, &knobs)?)
}

fn demo(a: DemoArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::demo(a.seed),
    };
    cfg.apply_seed(a.seed);
    cfg.regions.threads = threads()?;
    let run = run_demo(&cfg)?;
    let text = run.summary.to_string();
    println!("{text}");
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        let sc = || Sidecar::new("demo", cfg.seed, &cfg);
        let data = dir.join("data.nest");
        save_dataset(&run.data, &data)?;
        sc()?.write_for(&data)?;
        let regions = dir.join("regions.bin");
        save_region_model(&run.regions, &regions)?;
        sc()?.write_for(&regions)?;
        let ck = dir.join("model.ckpt");
        let manifest = CheckpointManifest {
            config: run.outcome.model.config.clone(),
            seed: cfg.seed,
            step: run.outcome.steps,
            normalizer: Some(run.prepared.normalizer.clone()),
        };
        save_checkpoint(&manifest, &run.outcome.model.params, &ck)?;
        sc()?.write_for(&ck)?;
        let summary = dir.join("summary.json");
        std::fs::write(&summary, serde_json::to_string_pretty(&run.summary)? + "\n")?;
        sc()?.write_for(&summary)?;
        let fc = dir.join("forecast.nest");
        save_dataset(&forecast_after(&run.outcome.model, &run.regions, &run.data, Some(run.prepared.normalizer.clone()), cfg.eval.horizon)?, &fc)?;
        sc()?.write_for(&fc)?;
        let config = dir.join("config.toml");
        cfg.save(&config)?;
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::SnrCheck(a) => snr_check(a),
        Command::Bench(a) => run_bench(a),
        Command::Demo(a) => demo(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
