//! Trainable parameters and the forward pass.
//!
//! For each active period of a user the model computes
//!
//! ```text
//! l   = relu(W_l · [c ; e])                  hidden state (d)
//! s   = softmax(W_u · l + W_r · u_prev)      attribute proposal (K)
//! u   = α·s + (1-α)·u_prev, rescaled to sum 1
//! r   = Vᵀ · u                               reconstruction (d)
//! ```
//!
//! where `c` is the period's content embedding and `e` the user's row of `E_a`.

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Recurrent state fed into the first active period of every user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// `1/K` in every coordinate.
    #[default]
    Uniform,
    /// The zero vector; the first blend is then rescaled back onto the simplex.
    Zero,
}

impl InitialState {
    pub fn vector(self, k: usize) -> Array1<f64> {
        match self {
            InitialState::Uniform => Array1::from_elem(k, 1.0 / k as f64),
            InitialState::Zero => Array1::zeros(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of latent content attributes.
    pub k: usize,
    /// Embedding dimensionality.
    pub d: usize,
    /// Smoothing weight on the fresh softmax proposal.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial_state: InitialState,
}

impl HyperParams {
    pub const DEFAULT_K: usize = 30;
    pub const DEFAULT_ALPHA: f64 = 0.5;
    pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
    pub const DEFAULT_EPOCHS: usize = 30;

    pub fn new(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            alpha: Self::DEFAULT_ALPHA,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            epochs: Self::DEFAULT_EPOCHS,
            seed: 0,
            initial_state: InitialState::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidHyperParam { name: "k", reason: "must be at least 1".into() });
        }
        if self.d == 0 {
            return Err(Error::InvalidHyperParam { name: "d", reason: "must be at least 1".into() });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidHyperParam {
                name: "alpha",
                reason: format!("{} is outside [0, 1]", self.alpha),
            });
        }
        if self.alpha == 0.0 && self.initial_state == InitialState::Zero {
            return Err(Error::InvalidHyperParam {
                name: "alpha",
                reason: "0 keeps a zero initial state at zero forever".into(),
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidHyperParam {
                name: "learning_rate",
                reason: format!("{} is not a positive real", self.learning_rate),
            });
        }
        Ok(())
    }
}

/// Everything the reconstruction loss optimises. `W_l` acts on the
/// concatenation `[content ; user]` and is therefore `d × 2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_l: Array2<f64>,
    pub w_u: Array2<f64>,
    pub w_r: Array2<f64>,
    pub v: Array2<f64>,
    pub e_a: Array2<f64>,
}

pub const PARAM_NAMES: [&str; 5] = ["W_l", "W_u", "W_r", "V", "E_a"];

impl ModelParams {
    pub fn zeros(n: usize, k: usize, d: usize) -> Self {
        Self {
            w_l: Array2::zeros((d, 2 * d)),
            w_u: Array2::zeros((k, d)),
            w_r: Array2::zeros((k, k)),
            v: Array2::zeros((k, d)),
            e_a: Array2::zeros((n, d)),
        }
    }

    pub fn n_users(&self) -> usize {
        self.e_a.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.nrows()
    }

    pub fn d(&self) -> usize {
        self.v.ncols()
    }

    /// Matrices in checkpoint order.
    pub fn tensors(&self) -> [&Array2<f64>; 5] {
        [&self.w_l, &self.w_u, &self.w_r, &self.v, &self.e_a]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 5] {
        [&mut self.w_l, &mut self.w_u, &mut self.w_r, &mut self.v, &mut self.e_a]
    }

    pub fn check_shapes(&self, n: usize, k: usize, d: usize) -> Result<()> {
        let expected = [(d, 2 * d), (k, d), (k, k), (k, d), (n, d)];
        for ((name, t), shape) in PARAM_NAMES.iter().zip(self.tensors()).zip(expected) {
            if t.dim() != shape {
                return Err(Error::ShapeMismatch {
                    what: name,
                    expected: vec![shape.0, shape.1],
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// Fills every matrix i.i.d. uniform on `±1/sqrt(fan_in)`, where `fan_in` is
/// the dimension of the vector the matrix multiplies (`n` for the one-hot
/// user lookup). Matrices are drawn in checkpoint order from one stream.
pub fn init_params(n: usize, hp: &HyperParams) -> ModelParams {
    let (k, d) = (hp.k, hp.d);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    ModelParams {
        w_l: fill_uniform(&mut rng, (d, 2 * d), 2 * d),
        w_u: fill_uniform(&mut rng, (k, d), d),
        w_r: fill_uniform(&mut rng, (k, k), k),
        v: fill_uniform(&mut rng, (k, d), k),
        e_a: fill_uniform(&mut rng, (n, d), n),
    }
}

/// A fresh user-embedding row drawn like the rows of `E_a`.
pub fn init_user_embedding(n: usize, d: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_uniform(&mut rng, (1, d), n).row(0).to_owned()
}

pub fn relu(v: ArrayView1<f64>) -> Array1<f64> {
    v.mapv(|x| if x > 0.0 { x } else { 0.0 })
}

/// Max-subtracted softmax.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out = z.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// `relu(W_l · [content ; user])`.
pub fn hidden_state(
    content: ArrayView1<f64>,
    user: ArrayView1<f64>,
    w_l: &Array2<f64>,
) -> Result<Array1<f64>> {
    let (pre, _) = hidden_preactivation(content, user, w_l)?;
    Ok(relu(pre.view()))
}

/// Returns the pre-activation and the concatenated input.
pub(crate) fn hidden_preactivation(
    content: ArrayView1<f64>,
    user: ArrayView1<f64>,
    w_l: &Array2<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let width = content.len() + user.len();
    if w_l.ncols() != width {
        return Err(Error::ShapeMismatch {
            what: "W_l",
            expected: vec![w_l.nrows(), width],
            found: w_l.shape().to_vec(),
        });
    }
    let input = concatenate(Axis(0), &[content, user]).expect("1-d concatenation");
    Ok((w_l.dot(&input), input))
}

/// Blends a fresh proposal `s` with the previous state and rescales onto the
/// simplex. At `alpha == 1` the proposal is returned untouched and at
/// `alpha == 0` the previous state is, so both endpoints are exact.
pub fn smooth(s: &Array1<f64>, u_prev: &Array1<f64>, alpha: f64) -> (Array1<f64>, f64) {
    if alpha == 1.0 {
        return (s.clone(), 1.0);
    }
    if alpha == 0.0 {
        return (u_prev.clone(), 1.0);
    }
    let mut u = s * alpha + u_prev * (1.0 - alpha);
    let sum = u.sum();
    debug_assert!(sum > 0.0);
    u /= sum;
    (u, sum)
}

pub(crate) fn is_endpoint(alpha: f64) -> bool {
    alpha == 0.0 || alpha == 1.0
}

/// One recurrent step from hidden state `l` and previous factor `u_prev`.
pub fn user_factor_step(
    l: ArrayView1<f64>,
    u_prev: &Array1<f64>,
    w_u: &Array2<f64>,
    w_r: &Array2<f64>,
    alpha: f64,
) -> Array1<f64> {
    let z = w_u.dot(&l) + w_r.dot(u_prev);
    smooth(&softmax(z.view()), u_prev, alpha).0
}

/// `Vᵀ · u`.
pub fn reconstruct(v: &Array2<f64>, u: &Array1<f64>) -> Array1<f64> {
    v.t().dot(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrajectory {
    pub periods: Vec<usize>,
    /// User factor per period, on the K-simplex.
    pub u: Vec<Vec<f64>>,
    /// Hidden state per period.
    pub l: Vec<Vec<f64>>,
    /// Reconstruction per period.
    pub r: Vec<Vec<f64>>,
}

impl UserTrajectory {
    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }

    pub fn final_u(&self) -> Option<Array1<f64>> {
        self.u.last().map(|u| Array1::from(u.clone()))
    }

    pub fn final_r(&self) -> Option<Array1<f64>> {
        self.r.last().map(|r| Array1::from(r.clone()))
    }
}

/// Intermediate values of one step kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub input: Array1<f64>,
    pub pre: Array1<f64>,
    pub l: Array1<f64>,
    pub s: Array1<f64>,
    pub u_prev: Array1<f64>,
    pub blend_sum: f64,
    pub u: Array1<f64>,
    pub r: Array1<f64>,
}

/// Runs the recurrence over a user's content embeddings in period order.
pub(crate) fn forward_steps(
    contents: &[Array1<f64>],
    user: ArrayView1<f64>,
    params: &ModelParams,
    hp: &HyperParams,
) -> Result<Vec<StepCache>> {
    let mut u_prev = hp.initial_state.vector(params.k());
    let mut steps = Vec::with_capacity(contents.len());
    for c in contents {
        let (pre, input) = hidden_preactivation(c.view(), user, &params.w_l)?;
        let l = relu(pre.view());
        let z = params.w_u.dot(&l) + params.w_r.dot(&u_prev);
        let s = softmax(z.view());
        let (u, blend_sum) = smooth(&s, &u_prev, hp.alpha);
        let r = reconstruct(&params.v, &u);
        steps.push(StepCache { input, pre, l, s, u_prev: u_prev.clone(), blend_sum, u: u.clone(), r });
        u_prev = u;
    }
    Ok(steps)
}

pub(crate) fn trajectory_from_steps(periods: &[usize], steps: &[StepCache]) -> UserTrajectory {
    UserTrajectory {
        periods: periods.to_vec(),
        u: steps.iter().map(|s| s.u.to_vec()).collect(),
        l: steps.iter().map(|s| s.l.to_vec()).collect(),
        r: steps.iter().map(|s| s.r.to_vec()).collect(),
    }
}

/// Trajectory of an arbitrary content sequence for the given user embedding.
pub fn forward_sequence(
    periods: &[usize],
    contents: &[Array1<f64>],
    user: ArrayView1<f64>,
    params: &ModelParams,
    hp: &HyperParams,
) -> Result<UserTrajectory> {
    let steps = forward_steps(contents, user, params, hp)?;
    Ok(trajectory_from_steps(periods, &steps))
}

pub fn forward_trajectory(
    data: &Dataset,
    user: usize,
    params: &ModelParams,
    hp: &HyperParams,
) -> Result<UserTrajectory> {
    let contents = data.contents(user);
    if contents.is_empty() {
        return Err(Error::NoActivePeriods(user));
    }
    if user >= params.n_users() {
        return Err(Error::UnknownUser(format!("index {user}")));
    }
    forward_sequence(data.periods(user), contents, params.e_a.row(user), params, hp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s};

    fn hp(k: usize, d: usize, alpha: f64, seed: u64) -> HyperParams {
        HyperParams { alpha, seed, ..HyperParams::new(k, d) }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(4, &hp(3, 5, 0.5, 7));
        let b = init_params(4, &hp(3, 5, 0.5, 7));
        assert_eq!(a, b);
        let c = init_params(4, &hp(3, 5, 0.5, 8));
        assert_ne!(a, c);
        let bound = 1.0 / (10.0f64).sqrt();
        assert!(a.w_l.iter().all(|x| x.abs() <= bound));
        assert!(a.e_a.iter().all(|x| x.abs() <= 0.5));
        a.check_shapes(4, 3, 5).unwrap();
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(array![-1.0, 0.0, 2.0].view()), array![0.0, 0.0, 2.0]);
        assert_eq!(relu(array![-3.0, -0.5].view()), array![0.0, 0.0]);
        let v = array![-1.0, 4.0, 0.25];
        assert_eq!(relu(relu(v.view()).view()), relu(v.view()));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(array![0.0, 0.0, 0.0].view());
        for x in &u {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let u = softmax(array![2f64.ln(), 0.0, 0.0].view());
        assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.25, epsilon = 1e-15);
        let u = softmax(array![1000.0, 0.0].view());
        assert!(u.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(u[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hidden_state_cases() {
        let c = array![0.3, 0.7];
        let e = array![-1.0, 2.0];
        let zero = Array2::zeros((2, 4));
        assert_eq!(hidden_state(c.view(), e.view(), &zero).unwrap(), array![0.0, 0.0]);
        let mut block = Array2::zeros((2, 4));
        block.slice_mut(s![.., ..2]).assign(&Array2::eye(2));
        assert_eq!(hidden_state(c.view(), e.view(), &block).unwrap(), c);
        assert!(hidden_state(c.view(), e.view(), &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn hidden_state_matches_dense_loop() {
        let p = init_params(1, &hp(2, 4, 0.5, 3));
        let c = array![0.1, -0.2, 0.3, 0.9];
        let e = p.e_a.row(0);
        let got = hidden_state(c.view(), e, &p.w_l).unwrap();
        let x: Vec<f64> = c.iter().chain(e.iter()).copied().collect();
        for i in 0..4 {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += p.w_l[[i, j]] * xj;
            }
            assert_abs_diff_eq!(got[i], acc.max(0.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn smoothing_endpoints_and_blend() {
        let s = array![0.8, 0.2];
        let prev = array![0.4, 0.6];
        assert_eq!(smooth(&s, &prev, 1.0).0, s);
        assert_eq!(smooth(&s, &prev, 0.0).0, prev);
        let (u, _) = smooth(&s, &prev, 0.5);
        assert_abs_diff_eq!(u[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn user_factor_step_without_smoothing_is_softmax() {
        let p = init_params(1, &hp(3, 2, 1.0, 1));
        let l = array![0.5, 1.5];
        let prev = array![0.2, 0.3, 0.5];
        let expect = softmax((p.w_u.dot(&l) + p.w_r.dot(&prev)).view());
        assert_eq!(user_factor_step(l.view(), &prev, &p.w_u, &p.w_r, 1.0), expect);
    }

    #[test]
    fn reconstruct_cases() {
        let v = array![[1.0, 2.0], [3.0, -4.0], [0.0, 1.0]];
        assert_eq!(reconstruct(&v, &array![0.0, 1.0, 0.0]), array![3.0, -4.0]);
        let r = reconstruct(&v, &Array1::from_elem(3, 1.0 / 3.0));
        assert_abs_diff_eq!(r[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_initial_state_lands_on_simplex() {
        let p = init_params(1, &hp(3, 2, 0.3, 1));
        let h = HyperParams { initial_state: InitialState::Zero, ..hp(3, 2, 0.3, 1) };
        let steps = forward_steps(&[array![0.2, 0.4]], p.e_a.row(0), &p, &h).unwrap();
        assert_abs_diff_eq!(steps[0].u.sum(), 1.0, epsilon = 1e-12);
        for (a, b) in steps[0].u.iter().zip(&steps[0].s) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hyperparam_validation() {
        assert!(hp(3, 2, 1.5, 0).validate().is_err());
        assert!(hp(0, 2, 0.5, 0).validate().is_err());
        assert!(hp(3, 2, 0.0, 0).validate().is_ok());
        let frozen = HyperParams { initial_state: InitialState::Zero, ..hp(3, 2, 0.0, 0) };
        assert!(frozen.validate().is_err());
    }
}
