//! The cross-scale forecaster.
//!
//! Node windows (`N × L × C`) and region guidance patches (`M × P × C`) are
//! flattened per token and projected to `embed_dim`, plus learnable time and
//! token embeddings. `layers` cross-scale blocks then let node tokens attend to
//! region tokens (top-down) and region tokens attend to the enriched node
//! tokens (bottom-up). Three heads decode the node patch, the next region
//! patch per quantile level, and (from zero-masked region tokens) the current
//! region patch per quantile level.

mod checkpoint;
mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use loss::{composite_loss, huber_loss, pinball_loss, LossTargets, LossTerms, LossVars, LossWeights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datakit::DAYS_PER_WEEK;
use crate::error::{invalid, NestError, Result};
use crate::numcore::{Graph, ParamStore, Tensor, Var};

/// Which region patch feeds the guidance encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// The patch being forecast (`t+1 .. t+P`): ground truth or predicted.
    #[default]
    Future,
    /// The last observed patch (`t−P+1 .. t`).
    Past,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub n_regions: usize,
    pub channels: usize,
    /// Look-back window `L`.
    pub lookback: usize,
    /// Patch length `P`.
    pub patch: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub layers: usize,
    /// Strictly increasing levels in (0, 1); must contain 0.5.
    pub quantiles: Vec<f64>,
    pub steps_per_day: usize,
    pub days_per_week: usize,
    pub huber_delta: f64,
    /// Residual two-layer MLP (width `2·embed_dim`) after each attention step.
    pub mlp: bool,
    /// Top-down/bottom-up attention; off gives purely local node tokens.
    pub cross_attention: bool,
    pub guidance: GuidanceMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_nodes: 48,
            n_regions: 10,
            channels: 1,
            lookback: 12,
            patch: 4,
            embed_dim: 16,
            attn_dim: 32,
            layers: 2,
            quantiles: vec![0.1, 0.5, 0.9],
            steps_per_day: 96,
            days_per_week: DAYS_PER_WEEK,
            huber_delta: 1.0,
            mlp: true,
            cross_attention: true,
            guidance: GuidanceMode::Future,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_nodes: 8,
            n_regions: 2,
            channels: 1,
            lookback: 4,
            patch: 2,
            embed_dim: 8,
            attn_dim: 8,
            layers: 2,
            quantiles: vec![0.1, 0.5, 0.9],
            steps_per_day: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_nodes", self.n_nodes),
            ("n_regions", self.n_regions),
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("steps_per_day", self.steps_per_day),
            ("days_per_week", self.days_per_week),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NestError::Config(format!("{name} must be at least 1")));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(NestError::Config(format!(
                "quantile levels must be strictly increasing in (0,1), got {:?}",
                self.quantiles
            )));
        }
        if !self.quantiles.contains(&0.5) {
            return Err(NestError::Config("quantile levels must include 0.5".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(NestError::Config(format!("huber_delta must be > 0, got {}", self.huber_delta)));
        }
        if self.guidance == GuidanceMode::Past && self.patch > self.lookback {
            return Err(NestError::Config("past guidance needs patch <= lookback".into()));
        }
        Ok(())
    }

    pub fn median_index(&self) -> usize {
        self.quantiles.iter().position(|&t| t == 0.5).expect("validated config contains 0.5")
    }

    pub fn node_window_len(&self) -> usize {
        self.n_nodes * self.lookback * self.channels
    }

    pub fn node_patch_len(&self) -> usize {
        self.n_nodes * self.patch * self.channels
    }

    pub fn region_patch_len(&self) -> usize {
        self.n_regions * self.patch * self.channels
    }

    /// First step of the guidance window, relative to the first input step.
    pub fn guidance_offset(&self) -> usize {
        match self.guidance {
            GuidanceMode::Future => self.lookback,
            GuidanceMode::Past => self.lookback - self.patch,
        }
    }
}

/// Scalar parameter count implied by a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, a) = (cfg.embed_dim, cfg.attn_dim);
    let pc = cfg.patch * cfg.channels;
    let q = cfg.quantiles.len();
    let affine = |i: usize, o: usize| i * o + o;
    let mut n = affine(cfg.lookback * cfg.channels, d) + affine(pc, d);
    n += (cfg.n_nodes + cfg.n_regions + cfg.steps_per_day + cfg.days_per_week) * d;
    let attn = 4 * d * a;
    let mlp = affine(d, 2 * d) + affine(2 * d, d);
    n += cfg.layers * (usize::from(cfg.cross_attention) * 2 * attn + usize::from(cfg.mlp) * 2 * mlp);
    n += attn;
    n += (1 + 2 * q) * affine(d, pc);
    n
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 0.02).expect("valid normal");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

/// Fresh parameters: uniform(±1/√fan_in) weights, zero biases, N(0, 0.02²) embeddings.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (d, a) = (cfg.embed_dim, cfg.attn_dim);
    let pc = cfg.patch * cfg.channels;
    let affine = |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| -> Result<()> {
        s.insert(format!("{name}.w"), uniform(rng, i, o))?;
        s.insert(format!("{name}.b"), Tensor::zeros(&[1, o]))
    };
    affine(&mut s, &mut rng, "enc.x", cfg.lookback * cfg.channels, d)?;
    affine(&mut s, &mut rng, "enc.z", pc, d)?;
    s.insert("emb.node", embedding(&mut rng, cfg.n_nodes, d))?;
    s.insert("emb.region", embedding(&mut rng, cfg.n_regions, d))?;
    s.insert("emb.tod", embedding(&mut rng, cfg.steps_per_day, d))?;
    s.insert("emb.dow", embedding(&mut rng, cfg.days_per_week, d))?;
    let attn = |s: &mut ParamStore, rng: &mut ChaCha8Rng, p: &str| -> Result<()> {
        s.insert(format!("{p}.wq"), uniform(rng, d, a))?;
        s.insert(format!("{p}.wk"), uniform(rng, d, a))?;
        s.insert(format!("{p}.wv"), uniform(rng, d, a))?;
        s.insert(format!("{p}.wo"), uniform(rng, a, d))
    };
    for l in 0..cfg.layers {
        if cfg.cross_attention {
            attn(&mut s, &mut rng, &format!("layer{l}.td"))?;
            attn(&mut s, &mut rng, &format!("layer{l}.bu"))?;
        }
        if cfg.mlp {
            for side in ["x", "z"] {
                affine(&mut s, &mut rng, &format!("layer{l}.mlp_{side}.fc1"), d, 2 * d)?;
                affine(&mut s, &mut rng, &format!("layer{l}.mlp_{side}.fc2"), 2 * d, d)?;
            }
        }
    }
    attn(&mut s, &mut rng, "bd")?;
    affine(&mut s, &mut rng, "head.x", d, pc)?;
    for j in 0..cfg.quantiles.len() {
        affine(&mut s, &mut rng, &format!("head.z.q{j}"), d, pc)?;
    }
    for j in 0..cfg.quantiles.len() {
        affine(&mut s, &mut rng, &format!("head.bd.q{j}"), d, pc)?;
    }
    Ok(s)
}

fn affine(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// `Attn(q_src·Wq, kv·Wk, kv·Wv)·Wo`.
fn attention_block(g: &mut Graph, store: &ParamStore, prefix: &str, q_src: Var, kv: Var) -> Result<Var> {
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(q_src, wq)?;
    let k = g.matmul(kv, wk)?;
    let v = g.matmul(kv, wv)?;
    let att = g.attention(q, k, v)?;
    g.matmul(att, wo)
}

fn residual_mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = affine(g, store, x, &format!("{prefix}.fc1"))?;
    let h = g.gelu(h);
    let h = affine(g, store, h, &format!("{prefix}.fc2"))?;
    g.add(x, h)
}

/// Time-of-day plus day-of-week embedding averaged over `len` steps from `cycle_pos`.
fn time_embedding(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, cycle_pos: usize, len: usize) -> Result<Var> {
    let tod: Vec<usize> = (cycle_pos..cycle_pos + len).map(|p| p % cfg.steps_per_day).collect();
    let dow: Vec<usize> = (cycle_pos..cycle_pos + len)
        .map(|p| (p / cfg.steps_per_day) % cfg.days_per_week)
        .collect();
    let tod_table = g.param(store, "emb.tod")?;
    let dow_table = g.param(store, "emb.dow")?;
    let a = g.row_mean(tod_table, &tod)?;
    let b = g.row_mean(dow_table, &dow)?;
    g.add(a, b)
}

/// `H_x = Linear_x(flatten(X)) + TE_x + SE_node`; `cycle_pos` is the calendar
/// position of the first window step.
pub fn encode_past(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, x_win: &[f64], cycle_pos: usize) -> Result<Var> {
    if x_win.len() != cfg.node_window_len() {
        return Err(NestError::Shape {
            op: "encode_past",
            left: vec![x_win.len()],
            right: vec![cfg.n_nodes, cfg.lookback, cfg.channels],
        });
    }
    let x = g.constant(Tensor::matrix(cfg.n_nodes, cfg.lookback * cfg.channels, x_win.to_vec())?);
    let h = affine(g, store, x, "enc.x")?;
    let se = g.param(store, "emb.node")?;
    let h = g.add(h, se)?;
    let te = time_embedding(g, store, cfg, cycle_pos, cfg.lookback)?;
    g.add_row(h, te)
}

/// `H_z = Linear_z(flatten(Z)) + TE_z + SE_region`; `None` is the zero mask.
/// `cycle_pos` is the calendar position of the first guidance step.
pub fn encode_guidance(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    z_win: Option<&[f64]>,
    cycle_pos: usize,
) -> Result<Var> {
    let (m, pc) = (cfg.n_regions, cfg.patch * cfg.channels);
    let h = match z_win {
        Some(z) => {
            if z.len() != m * pc {
                return Err(NestError::Shape {
                    op: "encode_guidance",
                    left: vec![z.len()],
                    right: vec![m, cfg.patch, cfg.channels],
                });
            }
            let zv = g.constant(Tensor::matrix(m, pc, z.to_vec())?);
            affine(g, store, zv, "enc.z")?
        }
        None => {
            // Zero input through the affine map leaves only the bias.
            let zero = g.constant(Tensor::zeros(&[m, cfg.embed_dim]));
            let b = g.param(store, "enc.z.b")?;
            g.add_row(zero, b)?
        }
    };
    let se = g.param(store, "emb.region")?;
    let h = g.add(h, se)?;
    let te = time_embedding(g, store, cfg, cycle_pos, cfg.patch)?;
    g.add_row(h, te)
}

/// Top-down then bottom-up interaction for layer `layer`.
pub fn cross_scale_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    layer: usize,
    hx: Var,
    hz: Var,
) -> Result<(Var, Var)> {
    let mut x = hx;
    if cfg.cross_attention {
        let td = attention_block(g, store, &format!("layer{layer}.td"), hx, hz)?;
        x = g.add(hx, td)?;
    }
    if cfg.mlp {
        x = residual_mlp(g, store, &format!("layer{layer}.mlp_x"), x)?;
    }
    let mut z = hz;
    if cfg.cross_attention {
        let bu = attention_block(g, store, &format!("layer{layer}.bu"), hz, x)?;
        z = g.add(hz, bu)?;
    }
    if cfg.mlp {
        z = residual_mlp(g, store, &format!("layer{layer}.mlp_z"), z)?;
    }
    Ok((x, z))
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `N × (P·C)`.
    pub node: Var,
    /// Per quantile level, `M × (P·C)`: the region patch after the guidance window.
    pub region: Vec<Var>,
    /// Per quantile level, `M × (P·C)`: the guidance window reconstructed from zero-masked tokens.
    pub boundary: Vec<Var>,
}

/// Records a full forward pass. `cycle_pos` is the calendar position of the
/// first input step; the guidance window starts `cfg.guidance_offset()` later.
pub fn build_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    x_win: &[f64],
    guidance: Option<&[f64]>,
    cycle_pos: usize,
) -> Result<ForwardVars> {
    let gpos = cycle_pos + cfg.guidance_offset();
    let mut hx = encode_past(g, store, cfg, x_win, cycle_pos)?;
    let mut hz = encode_guidance(g, store, cfg, guidance, gpos)?;
    let hz_zeros = if guidance.is_none() {
        hz
    } else {
        encode_guidance(g, store, cfg, None, gpos)?
    };
    for layer in 0..cfg.layers {
        (hx, hz) = cross_scale_layer(g, store, cfg, layer, hx, hz)?;
    }
    let node = affine(g, store, hx, "head.x")?;
    let region = (0..cfg.quantiles.len())
        .map(|j| affine(g, store, hz, &format!("head.z.q{j}")))
        .collect::<Result<Vec<_>>>()?;
    let hb = attention_block(g, store, "bd", hz_zeros, hx)?;
    let boundary = (0..cfg.quantiles.len())
        .map(|j| affine(g, store, hb, &format!("head.bd.q{j}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardVars { node, region, boundary })
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    /// `N × P × C`.
    pub node: Vec<f64>,
    /// `Q` blocks of `M × P × C`.
    pub region: Vec<Vec<f64>>,
    /// `Q` blocks of `M × P × C`.
    pub boundary: Vec<Vec<f64>>,
    pub quantiles: Vec<f64>,
}

impl ForecastBundle {
    fn median_idx(&self) -> usize {
        self.quantiles.iter().position(|&t| t == 0.5).expect("median level present")
    }

    pub fn region_median(&self) -> &[f64] {
        &self.region[self.median_idx()]
    }

    pub fn boundary_median(&self) -> &[f64] {
        &self.boundary[self.median_idx()]
    }

    pub fn is_finite(&self) -> bool {
        self.node
            .iter()
            .chain(self.region.iter().flatten())
            .chain(self.boundary.iter().flatten())
            .all(|v| v.is_finite())
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone)]
pub struct NestModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl NestModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, x_win: &[f64], guidance: Option<&[f64]>, cycle_pos: usize) -> Result<ForecastBundle> {
        let mut g = Graph::new();
        let vars = build_forward(&mut g, &self.params, &self.config, x_win, guidance, cycle_pos)?;
        let take = |v: &Var| g.value(*v).data().to_vec();
        let bundle = ForecastBundle {
            node: take(&vars.node),
            region: vars.region.iter().map(take).collect(),
            boundary: vars.boundary.iter().map(take).collect(),
            quantiles: self.config.quantiles.clone(),
        };
        if !bundle.is_finite() {
            return Err(NestError::NonFinite("forward pass produced non-finite output".into()));
        }
        Ok(bundle)
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(invalid(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(store: &mut ParamStore, name: &str, data: &[f64]) {
        let t = store.get_mut(name).unwrap();
        assert_eq!(t.len(), data.len(), "{name}");
        t.data_mut().copy_from_slice(data);
    }

    fn zero_all(store: &mut ParamStore) {
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn hand_cfg() -> ModelConfig {
        ModelConfig {
            n_nodes: 2,
            n_regions: 2,
            channels: 1,
            lookback: 2,
            patch: 2,
            embed_dim: 2,
            attn_dim: 2,
            layers: 1,
            steps_per_day: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_count_matches_store() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig::tiny(),
            ModelConfig {
                mlp: false,
                cross_attention: false,
                ..ModelConfig::tiny()
            },
        ] {
            let s = init_params(&cfg, 0).unwrap();
            assert_eq!(s.num_scalars(), param_count(&cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.quantiles = vec![0.1, 0.9]));
        assert!(bad(|c| c.quantiles = vec![0.5, 0.1]));
        assert!(bad(|c| c.quantiles = vec![0.0, 0.5]));
        assert!(bad(|c| c.patch = 0));
        assert!(bad(|c| c.huber_delta = 0.0));
    }

    #[test]
    fn encode_past_zero_weights_give_zero() {
        let cfg = hand_cfg();
        let mut s = init_params(&cfg, 1).unwrap();
        zero_all(&mut s);
        let mut g = Graph::new();
        let h = encode_past(&mut g, &s, &cfg, &[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_past_hand_evaluated() {
        let cfg = hand_cfg();
        let mut s = init_params(&cfg, 1).unwrap();
        zero_all(&mut s);
        set(&mut s, "enc.x.w", &[1.0, 0.0, 0.5, 2.0]);
        set(&mut s, "enc.x.b", &[0.1, -0.1]);
        set(&mut s, "emb.node", &[1.0, 1.0, -1.0, 0.0]);
        // Steps 3 and 4 of the cycle: time-of-day slots 3, 0; days 0, 1.
        let mut tod = vec![0.0; 8];
        tod[0] = 2.0;
        tod[6] = 4.0;
        set(&mut s, "emb.tod", &tod);
        let mut dow = vec![0.0; 14];
        dow[3] = 6.0;
        set(&mut s, "emb.dow", &dow);
        let mut g = Graph::new();
        let h = encode_past(&mut g, &s, &cfg, &[1.0, 2.0, 3.0, 4.0], 3).unwrap();
        // TE = mean(tod rows 3, 0) + mean(dow rows 0, 1) = [3, 0] + [0, 3].
        // Node 0: [1,2]·W = [2, 4]; + b = [2.1, 3.9]; + SE = [3.1, 4.9].
        // Node 1: [3,4]·W = [5, 8]; + b = [5.1, 7.9]; + SE = [4.1, 7.9].
        let expect = [6.1, 7.9, 7.1, 10.9];
        for (a, b) in g.value(h).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn timestamp_only_changes_time_embedding() {
        let cfg = hand_cfg();
        let s = init_params(&cfg, 4).unwrap();
        let x = [0.3, -0.2, 1.0, 0.5];
        let mut g = Graph::new();
        let a = encode_past(&mut g, &s, &cfg, &x, 0).unwrap();
        let b = encode_past(&mut g, &s, &cfg, &x, 5).unwrap();
        let te_a = time_embedding(&mut g, &s, &cfg, 0, 2).unwrap();
        let te_b = time_embedding(&mut g, &s, &cfg, 5, 2).unwrap();
        let (va, vb) = (g.value(a).data(), g.value(b).data());
        let (ta, tb) = (g.value(te_a).data(), g.value(te_b).data());
        for i in 0..2 {
            for j in 0..2 {
                let diff = va[i * 2 + j] - vb[i * 2 + j];
                assert!((diff - (ta[j] - tb[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_guidance_cases() {
        let cfg = hand_cfg();
        let mut s = init_params(&cfg, 1).unwrap();
        zero_all(&mut s);
        set(&mut s, "enc.z.w", &[1.0, -1.0, 2.0, 0.5]);
        set(&mut s, "enc.z.b", &[0.25, 0.75]);
        set(&mut s, "emb.region", &[0.0, 1.0, 3.0, 0.0]);
        let mut g = Graph::new();
        let zero = encode_guidance(&mut g, &s, &cfg, None, 0).unwrap();
        assert_eq!(g.value(zero).data(), &[0.25, 1.75, 3.25, 0.75]);
        // Both regions carry [1, 1]: [3, -0.5] + b, then SE_region.
        let h = encode_guidance(&mut g, &s, &cfg, Some(&[1.0, 1.0, 1.0, 1.0]), 0).unwrap();
        assert_eq!(g.value(h).data(), &[3.25, 1.25, 6.25, 0.25]);
    }

    #[test]
    fn zero_value_weights_keep_residual() {
        let cfg = ModelConfig {
            mlp: false,
            ..ModelConfig::tiny()
        };
        let mut s = init_params(&cfg, 2).unwrap();
        set(&mut s, "layer0.td.wv", &vec![0.0; 64]);
        let mut g = Graph::new();
        let hx = g.constant(Tensor::full(&[8, 8], 0.3));
        let hz = g.constant(Tensor::full(&[2, 8], -0.7));
        let (x, _) = cross_scale_layer(&mut g, &s, &cfg, 0, hx, hz).unwrap();
        assert_eq!(g.value(x).data(), g.value(hx).data());
    }

    #[test]
    fn single_region_broadcasts_one_value() {
        let cfg = ModelConfig {
            n_regions: 1,
            mlp: false,
            ..ModelConfig::tiny()
        };
        let s = init_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let hx_t = Tensor::new(vec![8, 8], (0..64).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap();
        let hx = g.constant(hx_t.clone());
        let hz = g.constant(Tensor::new(vec![1, 8], (0..8).map(|v| v as f64 * 0.2).collect()).unwrap());
        let (x, _) = cross_scale_layer(&mut g, &s, &cfg, 0, hx, hz).unwrap();
        let out = g.value(x);
        let delta0: Vec<f64> = (0..8).map(|j| out.get2(0, j) - hx_t.get2(0, j)).collect();
        for i in 1..8 {
            for j in 0..8 {
                assert!((out.get2(i, j) - hx_t.get2(i, j) - delta0[j]).abs() < 1e-12);
            }
        }
    }

    /// Straight-line re-implementation of one layer (no MLP) on plain vectors.
    fn reference_layer(s: &ParamStore, hx: &Tensor, hz: &Tensor) -> (Tensor, Tensor) {
        let p = |n: &str| s.get(n).unwrap().clone();
        let mm = |a: &Tensor, b: &Tensor| crate::numcore::matmul(a, b).unwrap();
        let attn = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let (a, b, d) = (q.rows(), k.rows(), q.cols());
            let mut out = vec![0.0; a * v.cols()];
            for i in 0..a {
                let logits: Vec<f64> = (0..b)
                    .map(|j| (0..d).map(|t| q.get2(i, t) * k.get2(j, t)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..b {
                    for c in 0..v.cols() {
                        out[i * v.cols() + c] += e[j] / z * v.get2(j, c);
                    }
                }
            }
            Tensor::matrix(a, v.cols(), out).unwrap()
        };
        let add = |a: &Tensor, b: &Tensor| {
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
        };
        let td = mm(&attn(&mm(hx, &p("layer0.td.wq")), &mm(hz, &p("layer0.td.wk")), &mm(hz, &p("layer0.td.wv"))), &p("layer0.td.wo"));
        let x = add(hx, &td);
        let bu = mm(&attn(&mm(hz, &p("layer0.bu.wq")), &mm(&x, &p("layer0.bu.wk")), &mm(&x, &p("layer0.bu.wv"))), &p("layer0.bu.wo"));
        let z = add(hz, &bu);
        (x, z)
    }

    #[test]
    fn layer_matches_reference() {
        let cfg = ModelConfig {
            mlp: false,
            attn_dim: 5,
            ..ModelConfig::tiny()
        };
        let s = init_params(&cfg, 8).unwrap();
        let hx_t = Tensor::new(vec![8, 8], (0..64).map(|v| (v as f64 * 0.37).cos()).collect()).unwrap();
        let hz_t = Tensor::new(vec![2, 8], (0..16).map(|v| (v as f64 * 0.11).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let hx = g.constant(hx_t.clone());
        let hz = g.constant(hz_t.clone());
        let (x, z) = cross_scale_layer(&mut g, &s, &cfg, 0, hx, hz).unwrap();
        let (rx, rz) = reference_layer(&s, &hx_t, &hz_t);
        assert!(g.value(x).max_abs_diff(&rx) < 1e-12);
        assert!(g.value(z).max_abs_diff(&rz) < 1e-12);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = ModelConfig::tiny();
        let model = NestModel::new(cfg.clone(), 5).unwrap();
        let x: Vec<f64> = (0..cfg.node_window_len()).map(|v| (v as f64).sin()).collect();
        let z: Vec<f64> = (0..cfg.region_patch_len()).map(|v| (v as f64).cos()).collect();
        let a = model.forward(&x, Some(&z), 3).unwrap();
        let b = model.forward(&x, Some(&z), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.node.len(), 8 * 2);
        assert_eq!(a.region.len(), 3);
        assert!(a.region.iter().chain(&a.boundary).all(|r| r.len() == 2 * 2));
        assert!(model.forward(&x[1..], Some(&z), 0).is_err());
        assert!(model.forward(&x, Some(&z[1..]), 0).is_err());
    }

    #[test]
    fn region_permutation_leaves_node_forecast_unchanged() {
        let cfg = ModelConfig {
            n_regions: 3,
            ..ModelConfig::tiny()
        };
        let model = NestModel::new(cfg.clone(), 6).unwrap();
        let x: Vec<f64> = (0..cfg.node_window_len()).map(|v| (v as f64 * 0.7).sin()).collect();
        let z: Vec<f64> = (0..cfg.region_patch_len()).map(|v| (v as f64 * 0.3).cos()).collect();
        let perm = [2, 0, 1];
        let pc = cfg.patch * cfg.channels;
        let zp: Vec<f64> = perm.iter().flat_map(|&r| z[r * pc..(r + 1) * pc].to_vec()).collect();
        let mut permuted = model.clone();
        let se = model.params.get("emb.region").unwrap();
        let d = cfg.embed_dim;
        let se_p: Vec<f64> = perm.iter().flat_map(|&r| se.data()[r * d..(r + 1) * d].to_vec()).collect();
        permuted.params.get_mut("emb.region").unwrap().data_mut().copy_from_slice(&se_p);
        let a = model.forward(&x, Some(&z), 0).unwrap();
        let b = permuted.forward(&x, Some(&zp), 0).unwrap();
        for (u, v) in a.node.iter().zip(&b.node) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_guidance_boundary_uses_same_tokens() {
        let cfg = ModelConfig::tiny();
        let model = NestModel::new(cfg.clone(), 7).unwrap();
        let x: Vec<f64> = (0..cfg.node_window_len()).map(|v| (v as f64 * 0.2).sin()).collect();
        let zeros = vec![0.0; cfg.region_patch_len()];
        let a = model.forward(&x, None, 1).unwrap();
        let b = model.forward(&x, Some(&zeros), 1).unwrap();
        for (u, v) in a.node.iter().zip(&b.node) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in a.boundary_median().iter().zip(b.boundary_median()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
