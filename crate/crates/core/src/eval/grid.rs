//! Scale grid, multi-scale generation, window calibration and best-of-N.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::lm::{adapter_injection, generate, FrozenLm, GenerationConfig, GenerationRecord, RenderedTemplate, ScaleMode};

/// Default external scales, roughly geometric with ratio φ.
pub const DEFAULT_SCALES: [f64; 12] = [0.1, 0.2, 0.3, 0.5, 0.8, 1.3, 2.1, 3.4, 5.5, 8.9, 14.4, 23.3];
pub const DEFAULT_WINDOW: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    values: Vec<f64>,
    window: usize,
    window_start: usize,
}

impl Default for ScaleGrid {
    fn default() -> Self {
        Self {
            values: DEFAULT_SCALES.to_vec(),
            window: DEFAULT_WINDOW,
            window_start: 0,
        }
    }
}

impl ScaleGrid {
    pub fn new(values: Vec<f64>, window: usize) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("scales must be positive and finite"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("scales must be strictly increasing"));
        }
        if window == 0 || window > values.len() {
            return Err(Error::invalid(format!(
                "window {window} not in 1..={}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            window,
            window_start: 0,
        })
    }

    pub fn with_start(mut self, start: usize) -> Result<Self> {
        if start > self.window_count() - 1 {
            return Err(Error::invalid(format!(
                "window start {start} leaves fewer than {} scales",
                self.window
            )));
        }
        self.window_start = start;
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn window_start(&self) -> usize {
        self.window_start
    }

    /// Number of distinct consecutive windows.
    pub fn window_count(&self) -> usize {
        self.values.len() - self.window + 1
    }

    /// Indices into `values` of the active window.
    pub fn active_indices(&self) -> std::ops::Range<usize> {
        self.window_start..self.window_start + self.window
    }

    pub fn active(&self) -> &[f64] {
        &self.values[self.active_indices()]
    }

    /// Scales of the window starting at `start`.
    pub fn window_at(&self, start: usize) -> Option<&[f64]> {
        self.values.get(start..start + self.window)
    }
}

/// Which part of the grid to generate at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScope {
    Window,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledGeneration {
    pub vector_id: String,
    pub scale: f64,
    /// Index of `scale` in the full grid.
    pub grid_index: usize,
    #[serde(flatten)]
    pub record: GenerationRecord,
}

/// Sampling seed for one (item, scale) cell, independent of evaluation order.
pub fn cell_seed(base: u64, id: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(id.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// One generation per scale in `scope`.
#[allow(clippy::too_many_arguments)]
pub fn generate_multiscale(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    vector_id: &str,
    h: &[f64],
    grid: &ScaleGrid,
    scope: GridScope,
    gen: &GenerationConfig,
    mode: ScaleMode,
) -> Result<Vec<ScaledGeneration>> {
    let indices = match scope {
        GridScope::Window => grid.active_indices(),
        GridScope::Full => 0..grid.values().len(),
    };
    indices
        .map(|i| {
            let scale = grid.values()[i];
            let spec = adapter_injection(adapter, h, scale, mode)?;
            let cfg = GenerationConfig {
                seed: cell_seed(gen.seed, vector_id, i),
                ..*gen
            };
            let record = generate(lm, template, &spec, &cfg)?;
            Ok(ScaledGeneration {
                vector_id: vector_id.to_string(),
                scale,
                grid_index: i,
                record,
            })
        })
        .collect()
}

/// Maximum of `values`.
pub fn best_of_n(values: &[f64]) -> Result<f64> {
    values
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::invalid("best-of-N over an empty list"))
}

/// Window start maximizing the mean (over items) best-of-window score.
///
/// `scores[item][i]` is the metric at grid index `i`; higher is better. Ties
/// go to the smaller start.
pub fn calibrate_window_scores(grid: &ScaleGrid, scores: &[Vec<f64>]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("calibration subset is empty"));
    }
    let n = grid.values().len();
    if let Some(bad) = scores.iter().find(|s| s.len() != n) {
        return Err(Error::Shape(format!(
            "calibration row has {} scores for a {n}-scale grid",
            bad.len()
        )));
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for start in 0..grid.window_count() {
        let mean = scores
            .iter()
            .map(|s| best_of_n(&s[start..start + grid.window()]))
            .sum::<Result<f64>>()?
            / scores.len() as f64;
        if mean > best.0 {
            best = (mean, start);
        }
    }
    Ok(best.1)
}

/// Generate over the full grid for each calibration vector, score every
/// generation with `metric`, and pick the best window.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_window(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    subset: &[(String, Vec<f64>)],
    grid: &ScaleGrid,
    gen: &GenerationConfig,
    mode: ScaleMode,
    metric: &dyn Fn(usize, &ScaledGeneration) -> Result<f64>,
) -> Result<usize> {
    let mut scores = Vec::with_capacity(subset.len());
    for (item, (id, h)) in subset.iter().enumerate() {
        let gens = generate_multiscale(adapter, lm, template, id, h, grid, GridScope::Full, gen, mode)?;
        scores.push(gens.iter().map(|g| metric(item, g)).collect::<Result<Vec<f64>>>()?);
    }
    calibrate_window_scores(grid, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_literal() {
        let g = ScaleGrid::default();
        assert_eq!(g.values(), &[0.1, 0.2, 0.3, 0.5, 0.8, 1.3, 2.1, 3.4, 5.5, 8.9, 14.4, 23.3]);
        assert_eq!(g.window(), 6);
        let w = g.clone().with_start(3).unwrap();
        assert_eq!(w.active(), &[0.5, 0.8, 1.3, 2.1, 3.4, 5.5]);
        assert!(g.clone().with_start(7).is_err());
        let full = ScaleGrid::new(DEFAULT_SCALES.to_vec(), 12).unwrap();
        assert_eq!(full.active(), g.values());
    }

    #[test]
    fn grid_validation() {
        assert!(ScaleGrid::new(vec![1.0, 1.0], 1).is_err());
        assert!(ScaleGrid::new(vec![1.0, 2.0], 3).is_err());
        assert!(ScaleGrid::new(vec![-1.0, 2.0], 1).is_err());
        assert!(ScaleGrid::new(vec![], 1).is_err());
    }

    #[test]
    fn calibration_ties_and_peaks() {
        let g = ScaleGrid::default();
        let flat = vec![vec![0.5; 12]; 3];
        assert_eq!(calibrate_window_scores(&g, &flat).unwrap(), 0);
        let single = ScaleGrid::new(vec![1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(calibrate_window_scores(&single, &[vec![0.0, 1.0, 0.0]]).unwrap(), 0);
        assert!(calibrate_window_scores(&g, &[]).is_err());
    }

    #[test]
    fn best_of_n_basics() {
        assert_eq!(best_of_n(&[0.2, 0.7, 0.4]).unwrap(), 0.7);
        assert_eq!(best_of_n(&[-3.0]).unwrap(), -3.0);
        assert!(best_of_n(&[]).is_err());
    }

    proptest! {
        #[test]
        fn windows_are_consecutive(n in 1usize..12, start in 0usize..12) {
            let g = ScaleGrid::default();
            let n = n.min(12);
            let g = ScaleGrid::new(g.values().to_vec(), n).unwrap();
            if let Ok(w) = g.clone().with_start(start) {
                let idx: Vec<usize> = w.active_indices().collect();
                prop_assert!(idx.windows(2).all(|p| p[1] == p[0] + 1));
                prop_assert_eq!(idx.len(), n);
                prop_assert_eq!(w.active(), &g.values()[start..start + n]);
            } else {
                prop_assert!(start + n > 12);
            }
        }

        #[test]
        fn calibration_matches_brute_force(scores in proptest::collection::vec(proptest::collection::vec(0u8..5, 12), 1..6)) {
            let g = ScaleGrid::default();
            let s: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let got = calibrate_window_scores(&g, &s).unwrap();
            let means: Vec<f64> = (0..7).map(|st| s.iter().map(|r| r[st..st + 6].iter().cloned().fold(f64::MIN, f64::max)).sum::<f64>()).collect();
            let top = means.iter().cloned().fold(f64::MIN, f64::max);
            let want = means.iter().position(|&m| m == top).unwrap();
            prop_assert_eq!(got, want);
        }
    }
}
