use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datakit::SeriesTensor;
use crate::error::{invalid, Result};

/// How a chunk of a node's series is represented before distances are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChunkMode {
    /// The full within-chunk subsequence.
    #[default]
    Subsequence,
    /// The per-channel mean over the chunk.
    ChunkMean,
}

#[derive(Debug, Clone)]
pub struct AffinityGraph {
    /// Symmetric, zero diagonal, off-diagonal entries in (0, 1].
    pub a: DMatrix<f64>,
    pub sigma: f64,
    pub chunks: usize,
    pub chunk_len: usize,
    /// First step covered by chunk 0.
    pub chunk_start: usize,
}

/// Chunk geometry: `(start, chunk_len)`. Chunks start on a day boundary when
/// the day length divides the chunk length; trailing steps are dropped.
pub fn chunk_layout(t: usize, chunks: usize, steps_per_day: usize, start_offset: usize) -> Result<(usize, usize)> {
    if chunks == 0 || chunks > t {
        return Err(invalid(format!("chunk count {chunks} must be within 1..={t}")));
    }
    let len = t / chunks;
    if steps_per_day > 0 && len.is_multiple_of(steps_per_day) {
        let align = (steps_per_day - start_offset % steps_per_day) % steps_per_day;
        if align > 0 {
            let aligned_len = (t - align) / chunks / steps_per_day * steps_per_day;
            if aligned_len >= steps_per_day {
                return Ok((align, aligned_len));
            }
        }
    }
    Ok((0, len))
}

/// Per-pair sum over chunks of squared chunk distances, plus the chunk geometry.
pub fn chunked_sq_distances(x: &SeriesTensor, chunks: usize, mode: ChunkMode) -> Result<(DMatrix<f64>, usize, usize)> {
    let (start, len) = chunk_layout(x.steps(), chunks, x.steps_per_day, x.start_offset)?;
    let n = x.nodes();
    let c = x.channels();
    let used = chunks * len;
    // Per-node feature vectors whose squared Euclidean distance is Σ_k ‖X_i^(k) − X_j^(k)‖².
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s = &x.node_series(i)[start * c..(start + used) * c];
            match mode {
                ChunkMode::Subsequence => s.to_vec(),
                ChunkMode::ChunkMean => s
                    .chunks(len * c)
                    .flat_map(|chunk| {
                        (0..c).map(move |ch| chunk.iter().skip(ch).step_by(c).sum::<f64>() / len as f64)
                    })
                    .collect(),
            }
        })
        .collect();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok((d, start, len))
}

/// Median of the per-chunk RMS pairwise distances `sqrt(D_ij / chunks)`.
pub fn median_bandwidth(d: &DMatrix<f64>, chunks: usize) -> f64 {
    let n = d.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (d[(i, j)] / chunks as f64).sqrt())
        .collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let med = if v.len().is_multiple_of(2) { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Gaussian affinity over chunked temporal distances; `sigma = None` selects the median heuristic.
pub fn build_affinity(x: &SeriesTensor, chunks: usize, sigma: Option<f64>, mode: ChunkMode) -> Result<AffinityGraph> {
    if let Some(s) = sigma {
        if !(s > 0.0) {
            return Err(invalid(format!("kernel bandwidth must be > 0, got {s}")));
        }
    }
    let (d, chunk_start, chunk_len) = chunked_sq_distances(x, chunks, mode)?;
    let sigma = sigma.unwrap_or_else(|| median_bandwidth(&d, chunks));
    let scale = 1.0 / (2.0 * sigma * sigma * chunks as f64);
    let n = x.nodes();
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (-d[(i, j)] * scale).exp() });
    Ok(AffinityGraph {
        a,
        sigma,
        chunks,
        chunk_len,
        chunk_start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: &[&[f64]]) -> SeriesTensor {
        let t = rows[0].len();
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        SeriesTensor::new(rows.len(), t, 1, values, 1000, 0).unwrap()
    }

    #[test]
    fn identical_nodes_have_unit_affinity() {
        let x = series(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 9.0, 1.0]]);
        let g = build_affinity(&x, 2, Some(0.7), ChunkMode::Subsequence).unwrap();
        assert_eq!(g.a[(0, 1)], 1.0);
        assert_eq!(g.a[(0, 0)], 0.0);
    }

    #[test]
    fn hand_evaluated_entry() {
        let x = series(&[&[0.0; 4], &[1.0; 4]]);
        let g = build_affinity(&x, 2, Some(1.0), ChunkMode::Subsequence).unwrap();
        assert!((g.a[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        // Chunk means are 0 and 1 per chunk: Σ_k 1 = 2, exp(−2 / (2·1·2)).
        let g = build_affinity(&x, 2, Some(1.0), ChunkMode::ChunkMean).unwrap();
        assert!((g.a[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = series(&[&[0.0; 4], &[1.0; 4]]);
        assert!(build_affinity(&x, 5, Some(1.0), ChunkMode::Subsequence).is_err());
        assert!(build_affinity(&x, 0, Some(1.0), ChunkMode::Subsequence).is_err());
        assert!(build_affinity(&x, 2, Some(0.0), ChunkMode::Subsequence).is_err());
        assert!(build_affinity(&x, 2, Some(-1.0), ChunkMode::Subsequence).is_err());
    }

    #[test]
    fn trailing_steps_dropped_and_day_alignment() {
        assert_eq!(chunk_layout(103, 10, 1000, 0).unwrap(), (0, 10));
        // Chunks of exactly one day, series starting mid-day: shift to the next midnight.
        assert_eq!(chunk_layout(192, 4, 24, 5).unwrap(), (19, 24));
        assert_eq!(chunk_layout(96, 4, 24, 5).unwrap(), (0, 24));
        assert_eq!(chunk_layout(96, 4, 24, 0).unwrap(), (0, 24));
        // Day length does not divide chunk length: no alignment.
        assert_eq!(chunk_layout(100, 10, 24, 5).unwrap(), (0, 10));
    }
}
