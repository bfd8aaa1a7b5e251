//! End-to-end protocols: held-out retrieval per model variant and the
//! validation sweep over `K` and `α`.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{pool_dataset, train_linear, Variant};
use crate::corpus::{ConsumptionPanel, EmbeddingTable};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{holdout_split, mean_precision_at_k, HoldoutSplit, RetrievalResult};
use crate::model::{forward_trajectory, HyperParams, ModelParams};
use crate::training::{train, TrainConfig};
use crate::transfer::{fit_new_user, FitConfig};

pub const RETRIEVAL_KS: [usize; 4] = [1, 3, 5, 10];

/// Final reconstruction of every user under trained parameters.
pub fn final_reconstructions(data: &Dataset, params: &ModelParams, hp: &HyperParams) -> Result<Vec<Array1<f64>>> {
    (0..data.n_users())
        .map(|u| Ok(forward_trajectory(data, u, params, hp)?.final_r().expect("non-empty trajectory")))
        .collect()
}

/// Trains `variant` on the split's truncated histories and returns each
/// user's reconstruction at their last training period.
pub fn predict_holdout(
    split: &HoldoutSplit,
    table: &EmbeddingTable,
    variant: Variant,
    hp: &HyperParams,
    cfg: &TrainConfig,
) -> Result<Vec<Array1<f64>>> {
    match variant {
        Variant::Full => {
            let out = train(&split.train, hp, cfg)?;
            final_reconstructions(&split.train, &out.params, hp)
        }
        Variant::NoSmoothing => {
            let hp = HyperParams { alpha: 1.0, ..hp.clone() };
            let out = train(&split.train, &hp, cfg)?;
            final_reconstructions(&split.train, &out.params, &hp)
        }
        Variant::NoDynamics => {
            let pooled = pool_dataset(&split.train, table)?;
            let out = train(&pooled, hp, cfg)?;
            final_reconstructions(&pooled, &out.params, hp)
        }
        Variant::NoNonlinearity => {
            let (model, _) = train_linear(&split.train, hp, cfg)?;
            Ok((0..split.n_users())
                .map(|u| model.reconstructions(u, hp).pop().expect("non-empty history"))
                .collect())
        }
    }
}

/// MP@k for every `k` in `ks`.
pub fn retrieval_curve(
    predictions: &[Array1<f64>],
    targets: &[Array1<f64>],
    ks: &[usize],
    a: usize,
) -> Result<Vec<RetrievalResult>> {
    ks.iter().map(|&k| mean_precision_at_k(predictions, targets, k, a)).collect()
}

/// Holdout split plus MP@k of one variant.
pub fn evaluate_variant(
    panel: &ConsumptionPanel,
    table: &EmbeddingTable,
    variant: Variant,
    a: usize,
    ks: &[usize],
    hp: &HyperParams,
    cfg: &TrainConfig,
) -> Result<Vec<RetrievalResult>> {
    let split = holdout_split(panel, table, a)?;
    let preds = predict_holdout(&split, table, variant, hp, cfg)?;
    retrieval_curve(&preds, &split.targets, ks, a)
}

/// Seeded split of `0..n` into training and validation users, with
/// `valid_fraction` of them (at least one) held out.
pub fn split_users(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1.min(n), n);
    let mut valid = idx.split_off(n - n_valid);
    idx.sort_unstable();
    valid.sort_unstable();
    (idx, valid)
}

pub const VALIDATION_FRACTION: f64 = 0.1;

/// Validation MP@1 of parameters trained on other users: each validation
/// user's embedding is fitted on all but their last active period with the
/// shared parameters frozen, and their final reconstruction must retrieve
/// their last period's content among the validation users.
pub fn validation_mp1(
    valid: &HoldoutSplit,
    params: &ModelParams,
    hp: &HyperParams,
    fit: &FitConfig,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(valid.n_users());
    for u in 0..valid.n_users() {
        let f = fit_new_user(valid.train.periods(u), valid.train.contents(u), params, hp, fit)?;
        preds.push(f.trajectory.final_r().expect("non-empty trajectory"));
    }
    Ok(mean_precision_at_k(&preds, &valid.targets, 1, valid.a)?.mean_precision)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub alpha: f64,
    pub mp1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Row-major over `ks` then `alphas`.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, ki: usize, ai: usize) -> &SweepCell {
        &self.cells[ki * self.alphas.len() + ai]
    }

    /// Best successful cell; the first one wins ties.
    pub fn argmax(&self) -> Option<&SweepCell> {
        self.cells
            .iter()
            .filter(|c| c.mp1.is_some())
            .fold(None, |best: Option<&SweepCell>, c| match best {
                Some(b) if b.mp1 >= c.mp1 => Some(b),
                _ => Some(c),
            })
    }

    /// For one `K` row, best MP@1 over the interior `α` values and over the
    /// two endpoints.
    pub fn interior_vs_edges(&self, ki: usize) -> Option<(f64, f64)> {
        let n = self.alphas.len();
        if n < 3 {
            return None;
        }
        let val = |ai: usize| self.cell(ki, ai).mp1.unwrap_or(f64::NEG_INFINITY);
        let interior = (1..n - 1).map(val).fold(f64::NEG_INFINITY, f64::max);
        Some((interior, val(0).max(val(n - 1))))
    }
}

/// Trains on a seeded 90% of users for every `(K, α)` and scores each cell
/// by [`validation_mp1`] on the remaining 10%. A failing cell is recorded
/// and the sweep continues.
pub fn run_sweep(
    panel: &ConsumptionPanel,
    table: &EmbeddingTable,
    ks: &[usize],
    alphas: &[f64],
    base: &HyperParams,
    cfg: &TrainConfig,
    split_seed: u64,
) -> Result<SweepGrid> {
    if ks.is_empty() || alphas.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    let (train_idx, valid_idx) = split_users(panel.n_users(), VALIDATION_FRACTION, split_seed);
    let train_data = Dataset::new(panel.subset(&train_idx)?, table)?;
    let valid = holdout_split(&panel.subset(&valid_idx)?, table, 1)?;
    let mut cells = Vec::with_capacity(ks.len() * alphas.len());
    for &k in ks {
        for &alpha in alphas {
            let hp = HyperParams { k, alpha, ..base.clone() };
            let fit = FitConfig::from_hyper_params(&hp);
            let result = train(&train_data, &hp, cfg).and_then(|out| validation_mp1(&valid, &out.params, &hp, &fit));
            let cell = match result {
                Ok(mp1) => SweepCell { k, alpha, mp1: Some(mp1), error: None },
                Err(e) => {
                    log::warn!("sweep cell K={k} alpha={alpha} failed: {e}");
                    SweepCell { k, alpha, mp1: None, error: Some(e.to_string()) }
                }
            };
            cells.push(cell);
        }
    }
    Ok(SweepGrid { ks: ks.to_vec(), alphas: alphas.to_vec(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn user_split_is_seeded_and_disjoint() {
        let (a, b) = split_users(50, 0.1, 3);
        assert_eq!(b.len(), 5);
        assert_eq!(a.len(), 45);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_users(50, 0.1, 3), (a, b));
        assert_ne!(split_users(50, 0.1, 4).1, split_users(50, 0.1, 3).1);
    }

    #[test]
    fn argmax_and_interior() {
        let cell = |alpha, mp1| SweepCell { k: 5, alpha, mp1, error: None };
        let grid = SweepGrid {
            ks: vec![5],
            alphas: vec![0.1, 0.5, 0.9],
            cells: vec![cell(0.1, Some(0.2)), cell(0.5, Some(0.4)), cell(0.9, None)],
        };
        assert_eq!(grid.argmax().unwrap().alpha, 0.5);
        assert_eq!(grid.interior_vs_edges(0), Some((0.4, 0.2)));
    }
}
