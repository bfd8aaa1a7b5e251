//! Ablated model variants: no smoothing, no dynamics and no nonlinearity.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConsumptionPanel, EmbeddingTable, TokenCounts, UserHistory};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{is_endpoint, reconstruct, smooth, HyperParams};
use crate::training::{
    adam_step, relative_error, restart_seed, shuffle_rng, AdamState, EarlyStop, LossReport, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_nonlinearity: bool,
    pub no_dynamics: bool,
    pub no_smoothing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoNonlinearity,
    NoDynamics,
    NoSmoothing,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Full, Self::NoNonlinearity, Self::NoDynamics, Self::NoSmoothing];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoNonlinearity => "no-nonlinearity",
            Self::NoDynamics => "no-dynamics",
            Self::NoSmoothing => "no-smoothing",
        }
    }
}

/// Model family plus the hyperparameters it trains with.
#[derive(Debug, Clone, PartialEq)]
pub struct AblatedConfig {
    pub variant: Variant,
    pub hp: HyperParams,
}

/// Resolves at most one ablation flag into a configuration. Only
/// `no_smoothing` touches the hyperparameters (α = 1).
pub fn ablate(flags: AblationFlags, hp: &HyperParams) -> Result<AblatedConfig> {
    let set = [flags.no_nonlinearity, flags.no_dynamics, flags.no_smoothing];
    if set.iter().filter(|&&f| f).count() > 1 {
        return Err(Error::CombinedAblation);
    }
    let mut hp = hp.clone();
    let variant = if flags.no_nonlinearity {
        Variant::NoNonlinearity
    } else if flags.no_dynamics {
        Variant::NoDynamics
    } else if flags.no_smoothing {
        hp.alpha = 1.0;
        Variant::NoSmoothing
    } else {
        Variant::Full
    };
    Ok(AblatedConfig { variant, hp })
}

/// Collapses every user's history into one pseudo-period holding the summed
/// counts, placed at the user's last active period.
pub fn pool_panel(panel: &ConsumptionPanel) -> Result<ConsumptionPanel> {
    let users = panel
        .users()
        .iter()
        .map(|u| {
            let mut pooled = TokenCounts::new();
            for c in &u.counts {
                for (&t, &n) in c {
                    *pooled.entry(t).or_default() += n;
                }
            }
            UserHistory {
                id: u.id.clone(),
                periods: u.periods.last().map(|&p| vec![p]).unwrap_or_default(),
                counts: if u.counts.is_empty() { Vec::new() } else { vec![pooled] },
                demographics: u.demographics.clone(),
            }
        })
        .collect();
    ConsumptionPanel::new(users, panel.n_periods(), panel.vocab_size())
}

pub fn pool_dataset(data: &Dataset, table: &EmbeddingTable) -> Result<Dataset> {
    Dataset::new(pool_panel(data.panel())?, table)
}

/// Offset that keeps the simplex projection away from division by zero.
pub const LINEAR_FLOOR: f64 = 1e-8;

/// The reduced linear factorization: shared attributes `V` and a directly
/// trainable weighting per user and active period,
///
/// ```text
/// q = (max(p, 0) + floor) / Σ (max(p, 0) + floor)
/// u = α·q + (1-α)·u_prev, rescaled to sum 1
/// r = Vᵀ · u
/// ```
///
/// with no hidden layer, softmax, or recurrent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub v: Array2<f64>,
    /// Per user, one row per active period.
    pub p: Vec<Array2<f64>>,
}

struct LinearStep {
    raw: Array1<f64>,
    raw_sum: f64,
    q: Array1<f64>,
    blend_sum: f64,
    u: Array1<f64>,
    r: Array1<f64>,
}

impl LinearModel {
    /// `V` as in the full model; weightings uniform on `[0, 1)`.
    pub fn init(data: &Dataset, hp: &HyperParams) -> Self {
        let (k, d) = (hp.k, hp.d);
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let bound = 1.0 / (k as f64).sqrt();
        let v = Array2::from_shape_simple_fn((k, d), || rng.random_range(-bound..=bound));
        let p = (0..data.n_users())
            .map(|u| Array2::from_shape_simple_fn((data.periods(u).len(), k), || rng.random_range(0.0..1.0)))
            .collect();
        Self { v, p }
    }

    pub fn k(&self) -> usize {
        self.v.nrows()
    }

    fn steps(&self, user: usize, hp: &HyperParams) -> Vec<LinearStep> {
        let mut u_prev = hp.initial_state.vector(self.k());
        let mut out = Vec::with_capacity(self.p[user].nrows());
        for row in self.p[user].rows() {
            let raw = row.mapv(|x| x.max(0.0) + LINEAR_FLOOR);
            let raw_sum = raw.sum();
            let q = &raw / raw_sum;
            let (u, blend_sum) = smooth(&q, &u_prev, hp.alpha);
            let r = reconstruct(&self.v, &u);
            out.push(LinearStep { raw, raw_sum, q, blend_sum, u: u.clone(), r });
            u_prev = u;
        }
        out
    }

    pub fn trajectory(&self, user: usize, hp: &HyperParams) -> Vec<Array1<f64>> {
        self.steps(user, hp).into_iter().map(|s| s.u).collect()
    }

    /// Reconstruction at every active period of `user`.
    pub fn reconstructions(&self, user: usize, hp: &HyperParams) -> Vec<Array1<f64>> {
        self.steps(user, hp).into_iter().map(|s| s.r).collect()
    }

    pub fn loss(&self, data: &Dataset, hp: &HyperParams) -> f64 {
        (0..data.n_users())
            .map(|user| {
                self.steps(user, hp)
                    .iter()
                    .zip(data.contents(user))
                    .map(|(s, c)| (&s.r - c).mapv(|x| x * x).sum())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Gradients of the total loss for `V` and every user's weightings.
    pub fn backward(&self, data: &Dataset, hp: &HyperParams) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut gv = Array2::zeros(self.v.raw_dim());
        let mut gp: Vec<Array2<f64>> = self.p.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        for user in 0..data.n_users() {
            self.backward_user(data, user, hp, &mut gv, &mut gp[user]);
        }
        (gv, gp)
    }

    fn backward_user(&self, data: &Dataset, user: usize, hp: &HyperParams, gv: &mut Array2<f64>, gp: &mut Array2<f64>) {
        let alpha = hp.alpha;
        let steps = self.steps(user, hp);
        let mut du_next = Array1::<f64>::zeros(self.k());
        for (t, (step, c)) in steps.iter().zip(data.contents(user)).enumerate().rev() {
            let dr = (&step.r - c) * 2.0;
            for (mut row, &w) in gv.rows_mut().into_iter().zip(&step.u) {
                row.scaled_add(w, &dr);
            }
            let du = self.v.dot(&dr) + &du_next;
            let dm = if is_endpoint(alpha) {
                du
            } else {
                let proj = du.dot(&step.u);
                (du - proj) / step.blend_sum
            };
            let dq = &dm * alpha;
            du_next = if alpha == 1.0 { Array1::zeros(self.k()) } else { &dm * (1.0 - alpha) };
            if alpha != 0.0 {
                let proj = dq.dot(&step.q);
                let draw = (dq - proj) / step.raw_sum;
                for (j, g) in draw.iter().enumerate() {
                    if step.raw[j] > LINEAR_FLOOR {
                        gp[[t, j]] += g;
                    }
                }
            }
        }
    }
}

/// Fits a [`LinearModel`] with the same batching, optimizer, stopping rule
/// and restarts as the full model. Returns the model and the per-epoch
/// losses of the kept restart.
pub fn train_linear(data: &Dataset, hp: &HyperParams, cfg: &TrainConfig) -> Result<(LinearModel, Vec<LossReport>)> {
    hp.validate()?;
    if data.dim() != hp.d {
        return Err(Error::DimensionMismatch { expected: hp.d, found: data.dim() });
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let mut best: Option<(LinearModel, Vec<LossReport>)> = None;
    for r in 0..cfg.restarts {
        let hp_r = HyperParams { seed: restart_seed(hp.seed, r), ..hp.clone() };
        let run = train_linear_once(data, &hp_r, cfg)?;
        let total = |reps: &[LossReport]| reps.last().expect("initial loss").total_loss;
        if best.as_ref().is_none_or(|b| total(&run.1) < total(&b.1)) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn train_linear_once(data: &Dataset, hp: &HyperParams, cfg: &TrainConfig) -> Result<(LinearModel, Vec<LossReport>)> {
    let mut model = LinearModel::init(data, hp);
    let n_obs = data.n_observations().max(1) as f64;
    let report = |epoch: usize, total: f64| LossReport {
        epoch,
        total_loss: total,
        mean_loss_per_observation: total / n_obs,
        wall_ms: 0,
    };
    let mut reports = vec![report(0, model.loss(data, hp))];
    let mut adam = AdamState::new(std::iter::once(&model.v).chain(model.p.iter()));
    let mut rng = shuffle_rng(hp.seed);
    let mut order: Vec<usize> = (0..data.n_users()).collect();
    let mut stopper = EarlyStop::new(cfg);
    stopper.observe(reports[0].mean_loss_per_observation);
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gv = Array2::zeros(model.v.raw_dim());
            let mut gp: Vec<Array2<f64>> = model.p.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            for &user in batch {
                model.backward_user(data, user, hp, &mut gv, &mut gp[user]);
            }
            let grads: Vec<&Array2<f64>> = std::iter::once(&gv).chain(gp.iter()).collect();
            let mut params: Vec<&mut Array2<f64>> =
                std::iter::once(&mut model.v).chain(model.p.iter_mut()).collect();
            adam_step(&mut params, &grads, &mut adam, hp.learning_rate)?;
        }
        let total = model.loss(data, hp);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("linear model loss at epoch {epoch}")));
        }
        reports.push(report(epoch, total));
        if stopper.observe(total / n_obs) {
            break;
        }
    }
    Ok((model, reports))
}

/// Max relative error of [`LinearModel::backward`] against central differences.
pub fn linear_finite_diff_check(model: &LinearModel, data: &Dataset, hp: &HyperParams, eps: f64) -> f64 {
    let (gv, gp) = model.backward(data, hp);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut check = |probe: &mut LinearModel, get: &dyn Fn(&mut LinearModel) -> &mut f64, analytic: f64| {
        let orig = *get(probe);
        *get(probe) = orig + eps;
        let plus = probe.loss(data, hp);
        *get(probe) = orig - eps;
        let minus = probe.loss(data, hp);
        *get(probe) = orig;
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
    };
    for idx in ndarray::indices(model.v.raw_dim()) {
        check(&mut probe, &|m| &mut m.v[idx], gv[idx]);
    }
    for (user, g) in gp.iter().enumerate() {
        for idx in ndarray::indices(g.raw_dim()) {
            check(&mut probe, &|m| &mut m.p[user][idx], g[idx]);
        }
    }
    worst
}

/// Summary of which flags map to which variant, for reporting.
pub fn variant_flags() -> BTreeMap<&'static str, AblationFlags> {
    BTreeMap::from([
        ("nonlin", AblationFlags { no_nonlinearity: true, ..Default::default() }),
        ("dynamics", AblationFlags { no_dynamics: true, ..Default::default() }),
        ("smoothing", AblationFlags { no_smoothing: true, ..Default::default() }),
    ])
}
