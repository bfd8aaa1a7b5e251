//! Reconstruction loss, backpropagation through time and Adam.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_steps, init_params, is_endpoint, HyperParams, ModelParams, StepCache, PARAM_NAMES};

/// `∂L/∂θ` for every trainable matrix, shape-matched to [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_l: Array2<f64>,
    pub w_u: Array2<f64>,
    pub w_r: Array2<f64>,
    pub v: Array2<f64>,
    pub e_a: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            w_l: Array2::zeros(p.w_l.raw_dim()),
            w_u: Array2::zeros(p.w_u.raw_dim()),
            w_r: Array2::zeros(p.w_r.raw_dim()),
            v: Array2::zeros(p.v.raw_dim()),
            e_a: Array2::zeros(p.e_a.raw_dim()),
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 5] {
        [&self.w_l, &self.w_u, &self.w_r, &self.v, &self.e_a]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 5] {
        [&mut self.w_l, &mut self.w_u, &mut self.w_r, &mut self.v, &mut self.e_a]
    }

    /// Fails on the first parameter holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub total_loss: f64,
    #[serde(rename = "mean_loss")]
    pub mean_loss_per_observation: f64,
    pub wall_ms: u64,
}

fn squared_error(c: &Array1<f64>, r: &Array1<f64>) -> f64 {
    c.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Sum over users and active periods of `‖c − r‖²`.
pub fn loss(data: &Dataset, params: &ModelParams, hp: &HyperParams) -> Result<LossReport> {
    let mut total = 0.0;
    for user in 0..data.n_users() {
        total += user_loss(data.contents(user), params.e_a.row(user), params, hp)?;
    }
    Ok(report(0, total, data.n_observations(), 0))
}

fn report(epoch: usize, total: f64, n_obs: usize, wall_ms: u64) -> LossReport {
    LossReport {
        epoch,
        total_loss: total,
        mean_loss_per_observation: if n_obs == 0 { 0.0 } else { total / n_obs as f64 },
        wall_ms,
    }
}

/// Reconstruction loss of a single user's content sequence.
pub fn user_loss(
    contents: &[Array1<f64>],
    user: ArrayView1<f64>,
    params: &ModelParams,
    hp: &HyperParams,
) -> Result<f64> {
    let steps = forward_steps(contents, user, params, hp)?;
    Ok(steps.iter().zip(contents).map(|(s, c)| squared_error(c, &s.r)).sum())
}

fn add_outer(target: &mut Array2<f64>, left: &Array1<f64>, right: &Array1<f64>) {
    for (mut row, &a) in target.rows_mut().into_iter().zip(left) {
        if a != 0.0 {
            row.scaled_add(a, right);
        }
    }
}

/// Backpropagates one user's loss and accumulates into `grads`; the user's
/// embedding gradient is added to `user_grad`. Returns the user's loss.
pub(crate) fn user_backward(
    contents: &[Array1<f64>],
    user: ArrayView1<f64>,
    params: &ModelParams,
    hp: &HyperParams,
    grads: &mut Gradients,
    mut user_grad: ArrayViewMut1<f64>,
) -> Result<f64> {
    let steps: Vec<StepCache> = forward_steps(contents, user, params, hp)?;
    let d = contents.first().map_or(0, |c| c.len());
    let alpha = hp.alpha;
    let mut total = 0.0;
    let mut du_next = Array1::<f64>::zeros(params.k());
    for (step, c) in steps.iter().zip(contents).rev() {
        total += squared_error(c, &step.r);
        let dr = (&step.r - c) * 2.0;
        add_outer(&mut grads.v, &step.u, &dr);
        let du = params.v.dot(&dr) + &du_next;

        // Rescaling u = m / Σm.
        let dm = if is_endpoint(alpha) {
            du
        } else {
            let proj = du.dot(&step.u);
            (du - proj) / step.blend_sum
        };
        let ds = &dm * alpha;
        let mut du_prev = if alpha == 1.0 { Array1::zeros(params.k()) } else { &dm * (1.0 - alpha) };

        // Softmax.
        let dz = if alpha == 0.0 {
            Array1::zeros(params.k())
        } else {
            let inner = ds.dot(&step.s);
            &step.s * &(ds - inner)
        };
        add_outer(&mut grads.w_u, &dz, &step.l);
        add_outer(&mut grads.w_r, &dz, &step.u_prev);
        du_prev += &params.w_r.t().dot(&dz);

        let dl = params.w_u.t().dot(&dz);
        let dpre = Array1::from_iter(
            dl.iter().zip(&step.pre).map(|(g, &p)| if p > 0.0 { *g } else { 0.0 }),
        );
        add_outer(&mut grads.w_l, &dpre, &step.input);
        let dinput = params.w_l.t().dot(&dpre);
        user_grad.scaled_add(1.0, &dinput.slice(ndarray::s![d..]));
        du_next = du_prev;
    }
    Ok(total)
}

/// Exact gradient of the total reconstruction loss, including the full
/// recurrence and the simplex rescaling. The ReLU subgradient at 0 is 0.
pub fn backward(data: &Dataset, params: &ModelParams, hp: &HyperParams) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    for user in 0..data.n_users() {
        accumulate_user(data, user, params, hp, &mut grads)?;
    }
    grads.check_finite()?;
    Ok(grads)
}

fn accumulate_user(
    data: &Dataset,
    user: usize,
    params: &ModelParams,
    hp: &HyperParams,
    grads: &mut Gradients,
) -> Result<f64> {
    let mut user_grad = Array1::zeros(params.d());
    let l = user_backward(
        data.contents(user),
        params.e_a.row(user),
        params,
        hp,
        grads,
        user_grad.view_mut(),
    )?;
    grads.e_a.row_mut(user).scaled_add(1.0, &user_grad);
    Ok(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let m: Vec<_> = shapes.into_iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            epsilon: Self::EPSILON,
        }
    }

    pub fn for_params(p: &ModelParams) -> Self {
        Self::new(p.tensors())
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Array2<f64>],
    grads: &[&Array2<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::InvalidArgument("adam state does not match parameter list".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return Err(Error::ShapeMismatch {
                what: "adam parameter",
                expected: m.shape().to_vec(),
                found: p.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut **p)
            .and(&**g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Users per mini-batch; gradients are summed within a batch.
    pub batch_size: usize,
    /// L2 penalty coefficient added to the gradient. Off by default.
    pub weight_decay: f64,
    /// Stop when the mean loss moves by less than this...
    pub early_stop_tol: f64,
    /// ...for this many consecutive epochs. Zero disables early stopping.
    pub early_stop_patience: usize,
    /// Independent initialisations; the one with the lowest final loss is kept.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, weight_decay: 0.0, early_stop_tol: 1e-6, early_stop_patience: 3, restarts: 1 }
    }
}

/// Seed of restart `r`. Restart 0 uses the configured seed, so a single
/// run is unaffected by the restart machinery.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64) << 32)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Index of the restart that was kept.
    pub restart: usize,
    /// Entry 0 is the loss at initialisation, entry `e` the loss after epoch `e`.
    pub reports: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn initial(&self) -> &LossReport {
        &self.reports[0]
    }

    pub fn last(&self) -> &LossReport {
        self.reports.last().expect("reports always hold the initial loss")
    }
}

/// Tracks consecutive small changes of the mean loss.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    tol: f64,
    patience: usize,
    calm: usize,
    last: Option<f64>,
}

impl EarlyStop {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { tol: cfg.early_stop_tol, patience: cfg.early_stop_patience, calm: 0, last: None }
    }

    pub fn observe(&mut self, mean: f64) -> bool {
        if let Some(prev) = self.last {
            if (prev - mean).abs() < self.tol {
                self.calm += 1;
            } else {
                self.calm = 0;
            }
        }
        self.last = Some(mean);
        self.patience > 0 && self.calm >= self.patience
    }
}

pub(crate) fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Trains from a fresh initialisation. Every epoch shuffles the users,
/// walks them in mini-batches and takes one Adam step per batch. Serial and
/// bit-reproducible for a fixed seed.
pub fn train(data: &Dataset, hp: &HyperParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(data, hp, cfg, |_, _, _| Ok(()))
}

/// As [`train`], calling `on_epoch(restart, report, params)` after every
/// completed epoch of every restart.
pub fn train_with_callback<F>(
    data: &Dataset,
    hp: &HyperParams,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &LossReport, &ModelParams) -> Result<()>,
{
    hp.validate()?;
    if data.dim() != hp.d {
        return Err(Error::DimensionMismatch { expected: hp.d, found: data.dim() });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    let mut best: Option<TrainOutcome> = None;
    for r in 0..cfg.restarts {
        let hp_r = HyperParams { seed: restart_seed(hp.seed, r), ..hp.clone() };
        let mut outcome = train_once(data, &hp_r, cfg, |rep, p| on_epoch(r, rep, p))?;
        outcome.restart = r;
        if cfg.restarts > 1 {
            log::info!("restart {r}: final loss {:.6e}", outcome.last().total_loss);
        }
        if best.as_ref().is_none_or(|b| outcome.last().total_loss < b.last().total_loss) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn train_once<F>(data: &Dataset, hp: &HyperParams, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&LossReport, &ModelParams) -> Result<()>,
{
    let start = Instant::now();
    let mut params = init_params(data.n_users(), hp);
    let mut reports = vec![loss(data, &params, hp)?];
    check_loss(&reports[0])?;
    let mut adam = AdamState::for_params(&params);
    let mut rng = shuffle_rng(hp.seed);
    let mut order: Vec<usize> = (0..data.n_users()).collect();
    let mut stopper = EarlyStop::new(cfg);
    stopper.observe(reports[0].mean_loss_per_observation);

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&params);
            for &user in batch {
                accumulate_user(data, user, &params, hp, &mut grads)?;
            }
            if cfg.weight_decay > 0.0 {
                for (g, p) in grads.tensors_mut().into_iter().zip(params.tensors()) {
                    g.scaled_add(cfg.weight_decay, p);
                }
            }
            grads.check_finite()?;
            let g = grads.tensors();
            adam_step(&mut params.tensors_mut(), &g, &mut adam, hp.learning_rate)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let mut rep = loss(data, &params, hp)?;
        rep.epoch = epoch;
        rep.wall_ms = start.elapsed().as_millis() as u64;
        check_loss(&rep)?;
        on_epoch(&rep, &params)?;
        let mean = rep.mean_loss_per_observation;
        reports.push(rep);
        if stopper.observe(mean) {
            log::info!("early stop after epoch {epoch}: mean loss settled at {mean:.6e}");
            break;
        }
    }
    Ok(TrainOutcome { params, restart: 0, reports })
}

fn check_loss(rep: &LossReport) -> Result<()> {
    if rep.total_loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss at epoch {}", rep.epoch)))
    }
}

/// Entries above which [`finite_diff_check`] samples instead of sweeping.
pub const FULL_SWEEP_LIMIT: usize = 4096;

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Max relative error between `grads` and central differences of the loss.
pub fn finite_diff_against(
    data: &Dataset,
    params: &ModelParams,
    hp: &HyperParams,
    grads: &Gradients,
    epsilon: f64,
) -> Result<f64> {
    let total: usize = params.tensors().iter().map(|t| t.len()).sum();
    let mut coords: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |j| (ti, j)))
        .collect();
    if total > FULL_SWEEP_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x6772_6164);
        coords = (0..FULL_SWEEP_LIMIT)
            .map(|_| coords[rng.random_range(0..coords.len())])
            .collect();
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (ti, j) in coords {
        let original = params.tensors()[ti].as_slice().expect("standard layout")[j];
        let set = |p: &mut ModelParams, v: f64| {
            p.tensors_mut()[ti].as_slice_mut().expect("standard layout")[j] = v;
        };
        set(&mut probe, original + epsilon);
        let plus = loss(data, &probe, hp)?.total_loss;
        set(&mut probe, original - epsilon);
        let minus = loss(data, &probe, hp)?.total_loss;
        set(&mut probe, original);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.tensors()[ti].as_slice().expect("standard layout")[j];
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Max relative error between [`backward`] and central differences.
pub fn finite_diff_check(
    data: &Dataset,
    params: &ModelParams,
    hp: &HyperParams,
    epsilon: f64,
) -> Result<f64> {
    let grads = backward(data, params, hp)?;
    finite_diff_against(data, params, hp, &grads, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = array![[0.5, -1.0]];
        let g = Array2::zeros((1, 2));
        let mut st = AdamState::new([&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, array![[0.5, -1.0]]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = array![[3.0, -0.02, 1e-9]];
        let mut p = Array2::zeros((1, 3));
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.001).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let expect = -0.001 * gi / (gi.abs() + 1e-8);
            assert_abs_diff_eq!(*pi, expect, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p[[0, 0]], -0.001, epsilon = 1e-10);
    }

    #[test]
    fn adam_is_deterministic() {
        let g = array![[0.3, -0.7]];
        let run = || {
            let mut p = array![[1.0, 2.0]];
            let mut st = AdamState::new([&p]);
            adam_step(&mut [&mut p], &[&g], &mut st, 0.01).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = Array2::zeros((2, 2));
        let g = Array2::zeros((2, 2));
        let mut st = AdamState::new([&Array2::zeros((1, 2))]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, 0.1).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_abs_diff_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn early_stop_needs_consecutive_calm_epochs() {
        let mut es = EarlyStop::new(&TrainConfig::default());
        assert!(!es.observe(1.0));
        assert!(!es.observe(1.0));
        assert!(!es.observe(0.5));
        assert!(!es.observe(0.5));
        assert!(!es.observe(0.5));
        assert!(es.observe(0.5));
    }
}
