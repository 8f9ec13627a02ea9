use serde::{Deserialize, Serialize};

use super::SeriesTensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SeriesTensor,
    pub val: SeriesTensor,
    pub test: SeriesTensor,
    /// `[0, train_end, val_end, T]` on the original time axis.
    pub bounds: [usize; 4],
}

/// Contiguous, ordered, disjoint train/val/test ranges; each must hold at least `min_len` steps.
pub fn chronological_split(data: &SeriesTensor, spec: &SplitSpec, min_len: usize) -> Result<Splits> {
    let ratios = [spec.train, spec.val, spec.test];
    if ratios.iter().any(|&r| !(r > 0.0)) || ((ratios.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let t = data.steps();
    // Tiny epsilon keeps e.g. 0.6 * 100 from flooring to 59.
    let train_end = (t as f64 * spec.train + 1e-9).floor() as usize;
    let val_end = (t as f64 * (spec.train + spec.val) + 1e-9).floor() as usize;
    let lens = [train_end, val_end - train_end, t - val_end];
    if lens.iter().any(|&l| l < min_len.max(1)) {
        return Err(invalid(format!(
            "series of {t} steps too short: split lengths {lens:?}, each needs at least {min_len}"
        )));
    }
    Ok(Splits {
        train: data.slice_time(0, train_end)?,
        val: data.slice_time(train_end, val_end)?,
        test: data.slice_time(val_end, t)?,
        bounds: [0, train_end, val_end, t],
    })
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-node, per-channel z-score fitted on a training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &SeriesTensor) -> Self {
        let (n, t, c) = (train.nodes(), train.steps(), train.channels());
        let mut mean = vec![0.0; n * c];
        let mut std = vec![0.0; n * c];
        for i in 0..n {
            for ch in 0..c {
                let m = (0..t).map(|s| train.get(i, s, ch)).sum::<f64>() / t as f64;
                let var = (0..t).map(|s| (train.get(i, s, ch) - m).powi(2)).sum::<f64>() / t as f64;
                mean[i * c + ch] = m;
                std[i * c + ch] = var.sqrt().max(STD_FLOOR);
            }
        }
        Self { channels: c, mean, std }
    }

    pub fn nodes(&self) -> usize {
        self.mean.len() / self.channels
    }

    #[inline]
    pub fn forward(&self, node: usize, channel: usize, v: f64) -> f64 {
        let k = node * self.channels + channel;
        (v - self.mean[k]) / self.std[k]
    }

    #[inline]
    pub fn inverse(&self, node: usize, channel: usize, z: f64) -> f64 {
        let k = node * self.channels + channel;
        z * self.std[k] + self.mean[k]
    }

    fn check(&self, data: &SeriesTensor) -> Result<()> {
        if data.nodes() != self.nodes() || data.channels() != self.channels {
            return Err(invalid(format!(
                "normalizer fitted for {}x{} but data is {}x{}",
                self.nodes(),
                self.channels,
                data.nodes(),
                data.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, data: &SeriesTensor) -> Result<SeriesTensor> {
        self.check(data)?;
        let mut out = data.clone();
        for i in 0..data.nodes() {
            for s in 0..data.steps() {
                for ch in 0..data.channels() {
                    out.set(i, s, ch, self.forward(i, ch, data.get(i, s, ch)));
                }
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, data: &SeriesTensor) -> Result<SeriesTensor> {
        self.check(data)?;
        let mut out = data.clone();
        for i in 0..data.nodes() {
            for s in 0..data.steps() {
                for ch in 0..data.channels() {
                    out.set(i, s, ch, self.inverse(i, ch, data.get(i, s, ch)));
                }
            }
        }
        Ok(out)
    }

    /// Inverse transform of a flat `N × steps × C` block.
    pub fn denormalize_block(&self, block: &[f64], steps: usize) -> Vec<f64> {
        let c = self.channels;
        block
            .iter()
            .enumerate()
            .map(|(idx, &z)| {
                let node = idx / (steps * c);
                self.inverse(node, idx % c, z)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, t: usize) -> SeriesTensor {
        let values = (0..n * t).map(|v| v as f64 * 0.5 - 3.0).collect();
        SeriesTensor::new(n, t, 1, values, 24, 0).unwrap()
    }

    #[test]
    fn sixty_twenty_twenty() {
        let s = chronological_split(&ramp(2, 100), &SplitSpec::default(), 1).unwrap();
        assert_eq!((s.train.steps(), s.val.steps(), s.test.steps()), (60, 20, 20));
        assert_eq!(s.bounds, [0, 60, 80, 100]);
        assert_eq!(s.val.start_offset, 60);
        assert_eq!(s.test.get(1, 0, 0), ramp(2, 100).get(1, 80, 0));
    }

    #[test]
    fn too_short_rejected() {
        assert!(chronological_split(&ramp(1, 30), &SplitSpec::default(), 20).is_err());
        let bad = SplitSpec {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(chronological_split(&ramp(1, 30), &bad, 1).is_err());
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let s = SeriesTensor::new(1, 5, 1, vec![4.0; 5], 24, 0).unwrap();
        let nz = Normalizer::fit(&s);
        assert_eq!(nz.std[0], STD_FLOOR);
        assert!(nz.normalize(&s).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_and_centering() {
        let data = ramp(3, 50);
        let nz = Normalizer::fit(&data);
        let z = nz.normalize(&data).unwrap();
        for i in 0..3 {
            let m: f64 = (0..50).map(|s| z.get(i, s, 0)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-10);
        }
        let back = nz.denormalize(&z).unwrap();
        for (a, b) in back.values().iter().zip(data.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
