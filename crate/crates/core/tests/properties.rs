use dynmf::corpus::{embed_content, ConsumptionPanel, Demographics, EmbeddingTable, TokenCounts, UserHistory};
use dynmf::eval::{classify_trajectory, mean_precision_at_k, score_intrusion, IntrusionItem, IntrusionResponse};
use dynmf::model::{forward_trajectory, init_params, HyperParams, InitialState, ModelParams};
use dynmf::synth::align_factors;
use dynmf::training::loss;
use dynmf::transfer::{cold_start, fit_new_user, frozen_checksum, FitConfig};
use dynmf::Dataset;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn table(vocab: usize, d: usize, values: &[f64]) -> EmbeddingTable {
    EmbeddingTable::new(Array2::from_shape_fn((vocab, d), |(i, j)| values[(i * d + j) % values.len()])).unwrap()
}

fn counts_strategy(vocab: usize) -> impl Strategy<Value = TokenCounts> {
    prop::collection::btree_map(0..vocab, 1u32..5, 1..6)
}

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Array1<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d).prop_map(Array1::from), n)
}

fn rotate(v: &Array1<f64>, angles: &[f64]) -> Array1<f64> {
    let mut out = v.clone();
    let d = out.len();
    let mut a = angles.iter().cycle();
    for i in 0..d {
        for j in i + 1..d {
            let t = *a.next().unwrap();
            let (x, y) = (out[i], out[j]);
            out[i] = t.cos() * x - t.sin() * y;
            out[j] = t.sin() * x + t.cos() * y;
        }
    }
    out
}

fn small_panel(users: Vec<Vec<TokenCounts>>) -> ConsumptionPanel {
    let tau = users.iter().map(Vec::len).max().unwrap_or(1);
    let histories = users
        .into_iter()
        .enumerate()
        .map(|(i, counts)| UserHistory {
            id: format!("u{i}"),
            periods: (0..counts.len()).collect(),
            counts,
            demographics: Demographics::new(),
        })
        .collect();
    ConsumptionPanel::new(histories, tau, 12).unwrap()
}

fn scaled(params: &mut ModelParams, scale: f64) {
    for t in params.tensors_mut() {
        t.mapv_inplace(|x| x * scale);
    }
}

proptest! {
    #[test]
    fn user_factors_stay_on_the_simplex(
        users in prop::collection::vec(prop::collection::vec(counts_strategy(12), 1..7), 1..4),
        values in prop::collection::vec(-2.0f64..2.0, 8..40),
        alpha in prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0],
        zero in any::<bool>(),
        scale in 0.1f64..20.0,
        seed in any::<u64>(),
    ) {
        let n = users.len();
        let data = Dataset::new(small_panel(users), &table(12, 4, &values)).unwrap();
        let initial_state = if zero && alpha > 0.0 { InitialState::Zero } else { InitialState::Uniform };
        let hp = HyperParams { alpha, seed, initial_state, ..HyperParams::new(3, 4) };
        let mut params = init_params(n, &hp);
        scaled(&mut params, scale);
        for user in 0..n {
            for u in forward_trajectory(&data, user, &params, &hp).unwrap().u {
                prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(u.iter().all(|x| *x >= 0.0));
            }
        }
    }

    #[test]
    fn merged_content_is_the_count_weighted_mean(
        a in counts_strategy(10),
        b in counts_strategy(10),
        values in prop::collection::vec(0.1f64..2.0, 30),
    ) {
        let t = table(10, 3, &values);
        let mut merged = a.clone();
        for (tok, c) in &b {
            *merged.entry(*tok).or_default() += c;
        }
        let (wa, wb) = (a.values().sum::<u32>() as f64, b.values().sum::<u32>() as f64);
        let expected = (embed_content(&a, &t).unwrap() * wa + embed_content(&b, &t).unwrap() * wb) / (wa + wb);
        let got = embed_content(&merged, &t).unwrap();
        for (x, y) in got.iter().zip(&expected) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_ignores_user_order(
        users in prop::collection::vec(prop::collection::vec(counts_strategy(12), 1..5), 2..5),
        values in prop::collection::vec(-2.0f64..2.0, 8..40),
        seed in any::<u64>(),
        rot in any::<usize>(),
    ) {
        let n = users.len();
        let t = table(12, 4, &values);
        let panel = small_panel(users);
        let hp = HyperParams { seed, ..HyperParams::new(3, 4) };
        let params = init_params(n, &hp);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let mut permuted = params.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted.e_a.row_mut(new).assign(&params.e_a.row(old));
        }
        let base = loss(&Dataset::new(panel.clone(), &t).unwrap(), &params, &hp).unwrap().total_loss;
        let moved = loss(&Dataset::new(panel.subset(&perm).unwrap(), &t).unwrap(), &permuted, &hp).unwrap().total_loss;
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn retrieval_is_rotation_invariant(
        preds in vectors(12, 4),
        targets in vectors(12, 4),
        angles in prop::collection::vec(0.0f64..6.28, 6),
        k in 1usize..12,
    ) {
        let r = |vs: &[Array1<f64>]| vs.iter().map(|v| rotate(v, &angles)).collect::<Vec<_>>();
        let plain = mean_precision_at_k(&preds, &targets, k, 1).unwrap();
        let turned = mean_precision_at_k(&r(&preds), &r(&targets), k, 1).unwrap();
        prop_assert_eq!(plain.per_user_hits, turned.per_user_hits);
    }

    #[test]
    fn retrieval_precision_grows_with_k(preds in vectors(10, 3), targets in vectors(10, 3)) {
        let mut last = 0.0;
        for k in 1..=10 {
            let mp = mean_precision_at_k(&preds, &targets, k, 1).unwrap().mean_precision;
            prop_assert!(mp >= last);
            last = mp;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn intrusion_scores_match_a_direct_count(
        picks in prop::collection::vec((0usize..3, 0usize..4), 0..30),
    ) {
        let items: Vec<IntrusionItem> = (0..3)
            .map(|k| IntrusionItem {
                attribute_index: k,
                members: vec![format!("m{k}a"), format!("m{k}b"), format!("m{k}c")],
                intruder: format!("x{k}"),
                shuffled: vec![format!("m{k}b"), format!("x{k}"), format!("m{k}a"), format!("m{k}c")],
            })
            .collect();
        let responses: Vec<IntrusionResponse> = picks
            .iter()
            .enumerate()
            .map(|(i, &(k, w))| IntrusionResponse {
                subject_id: format!("s{i}"),
                attribute_index: k,
                chosen_token: items[k].shuffled[w].clone(),
            })
            .collect();
        let scores = score_intrusion(&items, &responses).unwrap();
        for k in 0..3 {
            let n = picks.iter().filter(|p| p.0 == k).count();
            let hits = picks.iter().filter(|p| p.0 == k && p.1 == 1).count();
            prop_assert_eq!(scores[k].responses, n);
            prop_assert_eq!(scores[k].correct, hits);
            prop_assert_eq!(scores[k].precision, (n > 0).then(|| hits as f64 / n as f64));
        }
    }

    #[test]
    fn repeating_the_last_period_keeps_the_label(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..8),
    ) {
        let before = classify_trajectory(&rows, 4).label;
        let mut longer = rows.clone();
        longer.push(rows.last().unwrap().clone());
        prop_assert_eq!(classify_trajectory(&longer, 4).label, before);
    }

    #[test]
    fn cold_start_lands_on_the_simplex(
        known in prop::collection::vec((0u8..3, 0u8..3, prop::collection::vec(0.01f64..1.0, 4)), 1..15),
        zip in 0u8..3,
        m in 1usize..6,
    ) {
        let known: Vec<(Demographics, Array1<f64>)> = known
            .into_iter()
            .map(|(z, dev, w)| {
                let demo = [("zip".to_string(), z.to_string()), ("device".to_string(), dev.to_string())].into();
                let w = Array1::from(w);
                let s = w.sum();
                (demo, w / s)
            })
            .collect();
        let profile: Demographics = [("zip".to_string(), zip.to_string())].into();
        let u = cold_start(&profile, &known, m).unwrap();
        prop_assert!((u.sum() - 1.0).abs() < 1e-12);
        prop_assert!(u.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn alignment_recovers_a_permutation(
        centroids in vectors(4, 6),
        order in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        noise in vectors(4, 6),
    ) {
        prop_assume!(centroids.iter().all(|c| c.dot(c) > 0.5));
        let truth = Array2::from_shape_fn((4, 6), |(i, j)| centroids[i][j]);
        let off_diagonal = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| dynmf::eval::cosine(truth.row(i), truth.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(off_diagonal < 0.7);
        let est = Array2::from_shape_fn((4, 6), |(i, j)| centroids[order[i]][j] + 0.01 * noise[i][j]);
        let pairs = align_factors(&est, &truth).unwrap();
        for p in &pairs {
            prop_assert_eq!(order[p.estimated], p.truth);
        }
        // No other assignment has a higher total cosine.
        let total: f64 = pairs.iter().map(|p| p.cosine).sum();
        let best = permutations(4)
            .into_iter()
            .map(|perm| (0..4).map(|i| dynmf::eval::cosine(est.row(i), truth.row(perm[i]))).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((total - best).abs() < 1e-12);
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn new_user_fit_leaves_the_model_untouched() {
    let values: Vec<f64> = (0..48).map(|i| ((i * 37 % 17) as f64 - 8.0) / 4.0).collect();
    let t = table(12, 4, &values);
    let cells: Vec<Vec<TokenCounts>> =
        (0..3).map(|u| (0..5).map(|p| [((u + p) % 12, 1u32), ((u * p + 3) % 12, 2)].into()).collect()).collect();
    let data = Dataset::new(small_panel(cells), &t).unwrap();
    let hp = HyperParams { learning_rate: 0.01, seed: 5, ..HyperParams::new(3, 4) };
    let params = init_params(2, &hp);
    let before = frozen_checksum(&params);
    let cfg = FitConfig { epochs: 25, ..FitConfig::from_hyper_params(&hp) };
    let fit = fit_new_user(data.periods(2), data.contents(2), &params, &hp, &cfg).unwrap();
    assert_eq!(frozen_checksum(&params), before);
    assert_eq!(fit.loss_history.len(), 26);
    assert!(fit.fit_loss < fit.loss_history[0]);
    assert_eq!(fit.trajectory.len(), 5);
}
