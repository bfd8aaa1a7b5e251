//! Trajectories for users unseen at training time.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Demographics;
use crate::error::{Error, Result};
use crate::model::{forward_sequence, init_user_embedding, HyperParams, ModelParams, UserTrajectory};
use crate::training::{adam_step, user_backward, user_loss, AdamState, Gradients};

pub const DEFAULT_FIT_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seed of the random initial embedding.
    pub seed: u64,
}

impl FitConfig {
    pub fn from_hyper_params(hp: &HyperParams) -> Self {
        Self { epochs: DEFAULT_FIT_EPOCHS, learning_rate: hp.learning_rate, seed: hp.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewUserFit {
    pub user_embedding: Vec<f64>,
    pub trajectory: UserTrajectory,
    pub fit_loss: f64,
    /// Loss before the first step and after every epoch.
    pub loss_history: Vec<f64>,
}

/// SHA-256 over the shared matrices (`W_l`, `W_u`, `W_r`, `V`), used to
/// confirm they are untouched by new-user fitting.
pub fn frozen_checksum(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for t in [&params.w_l, &params.w_u, &params.w_r, &params.v] {
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fits only a fresh user-embedding row against frozen shared parameters,
/// one Adam step per epoch over the user's full trace.
pub fn fit_new_user(
    periods: &[usize],
    contents: &[Array1<f64>],
    frozen: &ModelParams,
    hp: &HyperParams,
    cfg: &FitConfig,
) -> Result<NewUserFit> {
    if contents.is_empty() {
        return Err(Error::EmptyTraces);
    }
    if periods.len() != contents.len() {
        return Err(Error::InvalidArgument("periods and contents differ in length".into()));
    }
    frozen.check_shapes(frozen.n_users(), hp.k, hp.d)?;
    if let Some(c) = contents.iter().find(|c| c.len() != hp.d) {
        return Err(Error::DimensionMismatch { expected: hp.d, found: c.len() });
    }
    let mut emb = Array2::from_shape_vec(
        (1, hp.d),
        init_user_embedding(frozen.n_users().max(1), hp.d, cfg.seed).to_vec(),
    )
    .expect("1 x d");
    let mut adam = AdamState::new([&emb]);
    let mut scratch = Gradients::zeros_like(&ModelParams { e_a: Array2::zeros((0, hp.d)), ..frozen.clone() });
    let mut history = vec![user_loss(contents, emb.row(0), frozen, hp)?];
    for _ in 0..cfg.epochs {
        let mut g = Array2::zeros((1, hp.d));
        user_backward(contents, emb.row(0), frozen, hp, &mut scratch, g.row_mut(0))?;
        if g.iter().any(|x: &f64| !x.is_finite()) {
            return Err(Error::NonFinite("gradient of the new user embedding".into()));
        }
        adam_step(&mut [&mut emb], &[&g], &mut adam, cfg.learning_rate)?;
        history.push(user_loss(contents, emb.row(0), frozen, hp)?);
    }
    let trajectory = forward_sequence(periods, contents, emb.row(0), frozen, hp)?;
    Ok(NewUserFit {
        user_embedding: emb.row(0).to_vec(),
        trajectory,
        fit_loss: *history.last().expect("initial loss recorded"),
        loss_history: history,
    })
}

/// Number of attributes on which two profiles hold the same value.
pub fn demographic_similarity(a: &Demographics, b: &Demographics) -> usize {
    a.iter().filter(|(k, v)| b.get(*k) == Some(v)).count()
}

/// Weighting for a user with no traces: the mean final weighting of the `m`
/// known users sharing the most demographic values (ties to the lower
/// index), renormalized. If no known user shares any value, the mean over
/// all known users.
pub fn cold_start(profile: &Demographics, known: &[(Demographics, Array1<f64>)], m: usize) -> Result<Array1<f64>> {
    if known.is_empty() {
        return Err(Error::InvalidArgument("cold start needs at least one known user".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("neighbor count m must be at least 1".into()));
    }
    let mut scored: Vec<(usize, usize)> =
        known.iter().enumerate().map(|(i, (d, _))| (demographic_similarity(profile, d), i)).collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let chosen: Vec<usize> = if scored[0].0 == 0 {
        (0..known.len()).collect()
    } else {
        scored.iter().take(m).map(|&(_, i)| i).collect()
    };
    let mut mean = Array1::zeros(known[0].1.len());
    for &i in &chosen {
        mean += &known[i].1;
    }
    let sum = mean.sum();
    if sum <= 0.0 {
        return Err(Error::InvalidArgument("neighbor weightings sum to zero".into()));
    }
    Ok(mean / sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn demo(pairs: &[(&str, &str)]) -> Demographics {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn single_neighbor_is_copied() {
        let known = vec![
            (demo(&[("zip", "02110")]), array![0.2, 0.8]),
            (demo(&[("zip", "02139")]), array![0.6, 0.4]),
        ];
        let w = cold_start(&demo(&[("zip", "02139")]), &known, 1).unwrap();
        assert_eq!(w, array![0.6, 0.4]);
    }

    #[test]
    fn two_neighbors_are_averaged() {
        let known = vec![
            (demo(&[("zip", "a"), ("device", "mobile")]), array![0.2, 0.8]),
            (demo(&[("zip", "b"), ("device", "mobile")]), array![0.6, 0.4]),
            (demo(&[("zip", "c"), ("device", "desktop")]), array![1.0, 0.0]),
        ];
        let w = cold_start(&demo(&[("device", "mobile")]), &known, 2).unwrap();
        assert_abs_diff_eq!(w, array![0.4, 0.6], epsilon = 1e-12);
    }

    #[test]
    fn no_shared_attribute_falls_back_to_global_mean() {
        let known = vec![
            (demo(&[("zip", "a")]), array![0.2, 0.8]),
            (demo(&[("zip", "b")]), array![0.6, 0.4]),
            (demo(&[("zip", "c")]), array![1.0, 0.0]),
        ];
        let w = cold_start(&demo(&[("zip", "z")]), &known, 1).unwrap();
        assert_abs_diff_eq!(w, array![0.6, 0.4], epsilon = 1e-12);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let known = vec![
            (demo(&[("zip", "a")]), array![0.2, 0.8]),
            (demo(&[("zip", "a")]), array![0.6, 0.4]),
        ];
        let w = cold_start(&demo(&[("zip", "a")]), &known, 1).unwrap();
        assert_eq!(w, array![0.2, 0.8]);
    }

    #[test]
    fn empty_traces_are_rejected() {
        let hp = HyperParams::new(2, 3);
        let params = crate::model::init_params(2, &hp);
        let cfg = FitConfig::from_hyper_params(&hp);
        assert!(matches!(fit_new_user(&[], &[], &params, &hp, &cfg), Err(Error::EmptyTraces)));
    }

    #[test]
    fn zero_epoch_fit_keeps_the_initial_embedding() {
        let hp = HyperParams { seed: 4, ..HyperParams::new(2, 3) };
        let params = crate::model::init_params(5, &hp);
        let cfg = FitConfig { epochs: 0, ..FitConfig::from_hyper_params(&hp) };
        let fit = fit_new_user(&[0], &[array![1.0, 0.0, 0.0]], &params, &hp, &cfg).unwrap();
        assert_eq!(fit.user_embedding, init_user_embedding(5, 3, 4).to_vec());
        assert_eq!(fit.loss_history.len(), 1);
    }
}
