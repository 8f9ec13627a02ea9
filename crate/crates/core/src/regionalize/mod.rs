//! Feature-driven regionalisation: chunked Gaussian affinity, normalised
//! Laplacian, spectral embedding, k-means, then region pooling and prototypes.

mod affinity;
mod io;
mod kmeans;
mod spectral;

pub use affinity::{build_affinity, chunk_layout, chunked_sq_distances, median_bandwidth, AffinityGraph, ChunkMode};
pub use io::{load_region_model, read_region_model, save_region_model, write_region_model, REGION_MAGIC};
pub use kmeans::{kmeans, wcss, KMeansConfig, KMeansResult};
pub use spectral::{normalized_laplacian, spectral_embed, SpectralEmbedding, EIGEN_RESIDUAL_LIMIT};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datakit::SeriesTensor;
use crate::error::{invalid, NestError, Result};

/// Default fraction of nodes used as the region count.
pub const DEFAULT_M_RATIO: f64 = 0.2;
/// Default number of temporal chunks for the affinity.
pub const DEFAULT_CHUNKS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    /// Explicit region count; overrides `m_ratio` when set.
    pub n_regions: Option<usize>,
    pub m_ratio: f64,
    pub chunks: usize,
    /// Kernel bandwidth; `None` uses the median pairwise chunked distance.
    pub sigma: Option<f64>,
    pub chunk_mode: ChunkMode,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            n_regions: None,
            m_ratio: DEFAULT_M_RATIO,
            chunks: DEFAULT_CHUNKS,
            sigma: None,
            chunk_mode: ChunkMode::Subsequence,
            n_init: 10,
            max_iter: 300,
            seed: 0,
            threads: 1,
        }
    }
}

impl RegionConfig {
    /// `n_regions` if set, else `round(m_ratio · N)` clamped to `1..=N`.
    pub fn resolve_regions(&self, n: usize) -> usize {
        self.n_regions
            .unwrap_or_else(|| (self.m_ratio * n as f64).round() as usize)
            .clamp(1, n.max(1))
    }
}

/// Hard node → region assignment plus per-region prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionModel {
    pub n_nodes: usize,
    pub n_regions: usize,
    pub chunks: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Region index per node.
    pub assignment: Vec<usize>,
    /// `M × width` row-major; row `m` is the mean flattened series of region `m`.
    pub prototypes: Vec<f64>,
    pub proto_width: usize,
    /// Row-normalised spectral embedding; not persisted.
    pub embedding: Option<DMatrix<f64>>,
}

impl RegionModel {
    /// Builds a model from an explicit assignment (no spectral step).
    pub fn from_assignment(assignment: Vec<usize>, n_regions: usize) -> Result<Self> {
        region_sizes(&assignment, n_regions)?;
        Ok(Self {
            n_nodes: assignment.len(),
            n_regions,
            chunks: 0,
            sigma: 0.0,
            seed: 0,
            assignment,
            prototypes: Vec::new(),
            proto_width: 0,
            embedding: None,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_regions];
        self.assignment.iter().for_each(|&m| s[m] += 1);
        s
    }

    /// One-hot `N × M` matrix.
    pub fn assignment_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_nodes, self.n_regions, |i, m| f64::from(u8::from(self.assignment[i] == m)))
    }

    /// Region means of every step of a series: `M × T × C`.
    pub fn pool_series(&self, x: &SeriesTensor) -> Result<SeriesTensor> {
        if x.nodes() != self.n_nodes {
            return Err(invalid(format!("series has {} nodes, regions expect {}", x.nodes(), self.n_nodes)));
        }
        let (t, c) = (x.steps(), x.channels());
        let sizes = region_sizes(&self.assignment, self.n_regions)?;
        let mut out = vec![0.0; self.n_regions * t * c];
        for (i, &m) in self.assignment.iter().enumerate() {
            let src = x.node_series(i);
            let dst = &mut out[m * t * c..(m + 1) * t * c];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        for (m, &sz) in sizes.iter().enumerate() {
            out[m * t * c..(m + 1) * t * c].iter_mut().for_each(|v| *v /= sz as f64);
        }
        SeriesTensor::new(self.n_regions, t, c, out, x.steps_per_day, x.start_offset)
    }
}

fn region_sizes(assignment: &[usize], m: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0usize; m];
    for &a in assignment {
        if a >= m {
            return Err(invalid(format!("assignment {a} out of range for {m} regions")));
        }
        sizes[a] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(NestError::EmptyRegion(empty));
    }
    Ok(sizes)
}

/// Average pooling of one time step: `x_t` is `N × C`, result `M × C`.
pub fn pool_regions(x_t: &[f64], channels: usize, assignment: &[usize], m: usize) -> Result<Vec<f64>> {
    if x_t.len() != assignment.len() * channels {
        return Err(invalid(format!(
            "{} values do not match {} nodes x {channels} channels",
            x_t.len(),
            assignment.len()
        )));
    }
    let sizes = region_sizes(assignment, m)?;
    let mut out = vec![0.0; m * channels];
    for (i, &r) in assignment.iter().enumerate() {
        for c in 0..channels {
            out[r * channels + c] += x_t[i * channels + c];
        }
    }
    for (r, &sz) in sizes.iter().enumerate() {
        for c in 0..channels {
            out[r * channels + c] /= sz as f64;
        }
    }
    Ok(out)
}

/// Per-region mean of the rows of `x_flat` (`N × width`).
pub fn prototypes(assignment: &[usize], m: usize, x_flat: &[f64], width: usize) -> Result<Vec<f64>> {
    if x_flat.len() != assignment.len() * width {
        return Err(invalid("prototype input does not match assignment"));
    }
    // Same computation as pooling with `width` channels.
    pool_regions(x_flat, width, assignment, m)
}

/// Spectral regionalisation of a (training-split) series.
pub fn regionalize_pipeline(x: &SeriesTensor, cfg: &RegionConfig) -> Result<RegionModel> {
    let n = x.nodes();
    let m = cfg.resolve_regions(n);
    let graph = build_affinity(x, cfg.chunks, cfg.sigma, cfg.chunk_mode)?;
    let lap = normalized_laplacian(&graph.a)?;
    let emb = spectral_embed(&lap, m)?;
    let points: Vec<Vec<f64>> = (0..n).map(|i| emb.u.row(i).iter().copied().collect()).collect();
    let km = kmeans(
        &points,
        &KMeansConfig {
            k: m,
            n_init: cfg.n_init,
            max_iter: cfg.max_iter,
            seed: cfg.seed,
            threads: cfg.threads,
        },
    )?;
    let width = x.steps() * x.channels();
    let protos = prototypes(&km.labels, m, x.values(), width)?;
    Ok(RegionModel {
        n_nodes: n,
        n_regions: m,
        chunks: cfg.chunks,
        sigma: graph.sigma,
        seed: cfg.seed,
        assignment: km.labels,
        prototypes: protos,
        proto_width: width,
        embedding: Some(emb.u),
    })
}
