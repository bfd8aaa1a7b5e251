use dynmf::model::{forward_trajectory, init_params, HyperParams, InitialState};
use dynmf::synth::random_dataset;
use dynmf::training::{backward, finite_diff_against, finite_diff_check, loss};
use dynmf::Dataset;
use ndarray::Array1;

fn instance(seed: u64) -> Dataset {
    random_dataset(3, 4, 5, 20, seed).unwrap()
}

fn hp(alpha: f64, seed: u64) -> HyperParams {
    HyperParams { alpha, seed, ..HyperParams::new(3, 5) }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..5 {
        let data = instance(seed);
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let hp = hp(alpha, seed);
            let params = init_params(3, &hp);
            let err = finite_diff_check(&data, &params, &hp, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed} alpha {alpha}: {err:e}");
        }
    }
}

#[test]
fn zero_initial_state_gradient_matches() {
    let data = instance(9);
    let hp = HyperParams { initial_state: InitialState::Zero, ..hp(0.4, 9) };
    let params = init_params(3, &hp);
    assert!(finite_diff_check(&data, &params, &hp, 1e-5).unwrap() < 1e-4);
}

#[test]
fn corrupted_gradient_is_detected() {
    let data = instance(1);
    let hp = hp(0.5, 1);
    let params = init_params(3, &hp);
    let mut grads = backward(&data, &params, &hp).unwrap();
    grads.w_u.mapv_inplace(|g| -g);
    assert!(finite_diff_against(&data, &params, &hp, &grads, 1e-5).unwrap() > 0.3);
}

#[test]
fn frozen_dynamics_get_no_gradient() {
    let data = instance(2);
    let hp = hp(0.0, 2);
    let params = init_params(3, &hp);
    let grads = backward(&data, &params, &hp).unwrap();
    assert!(grads.w_u.iter().all(|g| *g == 0.0));
    assert!(grads.w_r.iter().all(|g| *g == 0.0));
    assert!(grads.w_l.iter().all(|g| *g == 0.0));
    assert!(grads.v.iter().any(|g| *g != 0.0));
}

#[test]
fn single_observation_v_gradient_is_outer_product() {
    let data = random_dataset(1, 1, 5, 20, 3).unwrap();
    let hp = hp(0.5, 3);
    let params = init_params(1, &hp);
    let traj = forward_trajectory(&data, 0, &params, &hp).unwrap();
    let u = Array1::from(traj.u[0].clone());
    let r = Array1::from(traj.r[0].clone());
    let c = &data.contents(0)[0];
    let grads = backward(&data, &params, &hp).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let expected = 2.0 * u[i] * (r[j] - c[j]);
            assert!((grads.v[[i, j]] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_is_sum_of_squared_reconstruction_errors() {
    let data = instance(4);
    let hp = hp(0.5, 4);
    let params = init_params(3, &hp);
    let mut expected = 0.0;
    for user in 0..3 {
        let traj = forward_trajectory(&data, user, &params, &hp).unwrap();
        for (r, c) in traj.r.iter().zip(data.contents(user)) {
            expected += r.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    let got = loss(&data, &params, &hp).unwrap();
    assert!((got.total_loss - expected).abs() < 1e-12);
    assert!((got.mean_loss_per_observation - expected / 12.0).abs() < 1e-12);
}
