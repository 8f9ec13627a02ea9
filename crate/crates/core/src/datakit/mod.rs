//! Series containers, synthetic data with planted regions, splitting,
//! normalisation and the dataset file format.

mod io;
mod split;
mod synthetic;

pub use io::{dataset_file_size, load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use split::{chronological_split, Normalizer, SplitSpec, Splits};
pub use synthetic::{generate_synthetic, planted_separation, SyntheticData, SyntheticSpec};

use crate::error::{invalid, Result};

pub const DAYS_PER_WEEK: usize = 7;

/// `N × T × C` observations plus calendar metadata.
///
/// Values are row-major: `values[(node * T + step) * C + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTensor {
    n: usize,
    t: usize,
    c: usize,
    values: Vec<f64>,
    pub steps_per_day: usize,
    pub days_per_week: usize,
    /// Position of the first step within the day/week cycle.
    pub start_offset: usize,
    pub labels: Option<Vec<usize>>,
}

impl SeriesTensor {
    pub fn new(
        n: usize,
        t: usize,
        c: usize,
        values: Vec<f64>,
        steps_per_day: usize,
        start_offset: usize,
    ) -> Result<Self> {
        if n == 0 || t == 0 || c == 0 || steps_per_day == 0 {
            return Err(invalid(format!(
                "series extents must be positive (N={n}, T={t}, C={c}, steps_per_day={steps_per_day})"
            )));
        }
        if values.len() != n * t * c {
            return Err(invalid(format!("expected {} values, got {}", n * t * c, values.len())));
        }
        Ok(Self {
            n,
            t,
            c,
            values,
            steps_per_day,
            days_per_week: DAYS_PER_WEEK,
            start_offset,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(invalid(format!("{} labels for {} nodes", labels.len(), self.n)));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, node: usize, step: usize, channel: usize) -> f64 {
        self.values[(node * self.t + step) * self.c + channel]
    }

    #[inline]
    pub fn set(&mut self, node: usize, step: usize, channel: usize, v: f64) {
        self.values[(node * self.t + step) * self.c + channel] = v;
    }

    /// One node's full `T × C` history, contiguous.
    pub fn node_series(&self, node: usize) -> &[f64] {
        let w = self.t * self.c;
        &self.values[node * w..(node + 1) * w]
    }

    /// `N × len × C` block starting at `start`, flattened per node (`[node][step][channel]`).
    pub fn window(&self, start: usize, len: usize) -> Vec<f64> {
        debug_assert!(start + len <= self.t);
        let mut out = Vec::with_capacity(self.n * len * self.c);
        for i in 0..self.n {
            let base = (i * self.t + start) * self.c;
            out.extend_from_slice(&self.values[base..base + len * self.c]);
        }
        out
    }

    /// Contiguous time range as a new tensor; calendar offset advanced accordingly.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(invalid(format!("time range {start}..{end} invalid for T={}", self.t)));
        }
        let len = end - start;
        Ok(Self {
            n: self.n,
            t: len,
            c: self.c,
            values: self.window(start, len),
            steps_per_day: self.steps_per_day,
            days_per_week: self.days_per_week,
            start_offset: self.start_offset + start,
            labels: self.labels.clone(),
        })
    }

    /// Time-of-day slot of local step `step`.
    pub fn time_of_day(&self, step: usize) -> usize {
        (self.start_offset + step) % self.steps_per_day
    }

    pub fn day_of_week(&self, step: usize) -> usize {
        ((self.start_offset + step) / self.steps_per_day) % self.days_per_week
    }
}
