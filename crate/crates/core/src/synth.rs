//! Desk-scale consumption panels with known topics and drifting user mixtures.
//!
//! Every topic owns a disjoint block of tokens whose embeddings scatter
//! around an orthonormal topic centroid. Each user follows a mixture path
//! over topics (stable, a persistent switch, or vacillation between two
//! states) and each period draws single-topic headlines from that mixture.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{ConsumptionEvent, ConsumptionPanel, Demographics, EmbeddingTable, TokenCounts, UserHistory, Vocabulary};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{cosine, TrajectoryLabel};

const TOPIC_PREFIXES: [&str; 12] = [
    "sport", "polit", "metro", "arts", "biz", "tech", "food", "travel", "health", "science",
    "opinion", "weather",
];

/// Relative size of the per-token noise around its topic centroid.
pub const TOKEN_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Drift {
    None,
    /// State A before `switch_period`, state B from it on.
    Persistent { switch_period: usize },
    /// A and B alternate in blocks of `period_length` periods.
    Vacillating { period_length: usize },
    /// Users cycle through none / persistent / vacillating by index.
    Mixed { switch_period: usize, period_length: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub k_true: usize,
    pub n: usize,
    pub tau: usize,
    pub vocab_size: usize,
    /// Mean number of tokens a user reads per period.
    pub tokens_per_period: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_headline_len")]
    pub headline_len: usize,
    /// Range of the per-user exponent `γ` in the topic rank profile
    /// `(K - rank)^γ`; larger values concentrate users on their top topic.
    #[serde(default = "default_profile_gamma")]
    pub profile_gamma: [f64; 2],
    /// Overdispersion of the per-period token count. Zero gives Poisson
    /// counts; a positive value `φ` draws the Poisson mean from a gamma with
    /// shape `1/φ`, so reading volume varies more between periods.
    #[serde(default)]
    pub activity_dispersion: f64,
    pub drift: Drift,
    pub seed: u64,
}

fn default_dim() -> usize {
    16
}

fn default_headline_len() -> usize {
    5
}

fn default_profile_gamma() -> [f64; 2] {
    [1.0, 2.0]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InfeasibleSpec(m));
        if self.k_true < 2 {
            return fail("k_true must be at least 2".into());
        }
        if self.vocab_size < 20 * self.k_true {
            return fail(format!("vocab_size {} below 20 x k_true", self.vocab_size));
        }
        if self.k_true > self.dim {
            return fail(format!("dim {} cannot hold {} orthogonal centroids", self.dim, self.k_true));
        }
        if self.n == 0 || self.tau == 0 {
            return fail("n and tau must be positive".into());
        }
        if !(self.tokens_per_period > 0.0 && self.tokens_per_period.is_finite()) {
            return fail("tokens_per_period must be positive".into());
        }
        if !(self.activity_dispersion >= 0.0 && self.activity_dispersion.is_finite()) {
            return fail("activity_dispersion must be non-negative".into());
        }
        let [g0, g1] = self.profile_gamma;
        if !(g0 > 0.0 && g0 <= g1 && g1.is_finite()) {
            return fail(format!("profile_gamma {g0}..{g1} must be a positive, ordered range"));
        }
        if self.headline_len == 0 {
            return fail("headline_len must be positive".into());
        }
        let (switch, length) = match self.drift {
            Drift::None => (None, None),
            Drift::Persistent { switch_period } => (Some(switch_period), None),
            Drift::Vacillating { period_length } => (None, Some(period_length)),
            Drift::Mixed { switch_period, period_length } => (Some(switch_period), Some(period_length)),
        };
        if let Some(s) = switch {
            if s == 0 || s >= self.tau {
                return fail(format!("switch_period {s} must lie in 1..{}", self.tau));
            }
        }
        if let Some(l) = length {
            if l == 0 || 2 * l >= self.tau {
                return fail(format!("period_length {l} needs tau > 2 x period_length"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub label: TrajectoryLabel,
    /// Mixture over topics at every period `0..tau`.
    pub mixtures: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub topic_names: Vec<String>,
    /// Mean token embedding per topic block.
    pub topic_centroids: Vec<Vec<f64>>,
    pub users: Vec<UserTruth>,
    /// Token to topic index.
    pub section_labels: BTreeMap<String, usize>,
}

impl SyntheticGroundTruth {
    pub fn centroid_matrix(&self) -> Array2<f64> {
        let k = self.topic_centroids.len();
        let d = self.topic_centroids.first().map_or(0, Vec::len);
        Array2::from_shape_fn((k, d), |(i, j)| self.topic_centroids[i][j])
    }

    pub fn user(&self, id: &str) -> Option<&UserTruth> {
        self.users.iter().find(|u| u.user_id == id)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub events: Vec<ConsumptionEvent>,
    /// Generator token order; row `i` of `embeddings` belongs to `tokens[i]`.
    pub tokens: Vec<String>,
    pub embeddings: Array2<f64>,
    pub truth: SyntheticGroundTruth,
}

impl SyntheticCorpus {
    /// Embedding rows re-aligned to `vocab`; tokens the generator never made
    /// get the zero row.
    pub fn table_for(&self, vocab: &Vocabulary) -> Result<EmbeddingTable> {
        let index: BTreeMap<&str, usize> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut m = Array2::zeros((vocab.len(), self.embeddings.ncols()));
        for (row, tok) in vocab.tokens().iter().enumerate() {
            if let Some(&src) = index.get(tok.as_str()) {
                m.row_mut(row).assign(&self.embeddings.row(src));
            }
        }
        EmbeddingTable::new(m)
    }

    pub fn write_glove<W: std::io::Write>(&self, out: W) -> Result<()> {
        crate::corpus::write_glove(
            self.tokens.iter().map(String::as_str).zip(self.embeddings.rows()),
            out,
        )
    }
}

fn topic_name(k: usize) -> String {
    TOPIC_PREFIXES
        .get(k)
        .map_or_else(|| format!("topic{k}x"), |p| p.to_string())
}

fn orthonormal_centroids(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = Array1::from_shape_simple_fn(d, || normal.sample(rng));
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    Array2::from_shape_fn((k, d), |(i, j)| basis[i][j])
}

/// Topic weight by rank, `(K - rank)^gamma`, normalised to sum 1. Adjacent
/// ranks stay well apart, so sampling noise rarely reorders them.
fn rank_profile(k: usize, gamma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|r| ((k - r) as f64).powf(gamma)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

fn label_for(drift: Drift, user: usize) -> (TrajectoryLabel, Drift) {
    match drift {
        Drift::None => (TrajectoryLabel::Stable, drift),
        Drift::Persistent { .. } => (TrajectoryLabel::EvolvingPersistent, drift),
        Drift::Vacillating { .. } => (TrajectoryLabel::EvolvingVacillating, drift),
        Drift::Mixed { switch_period, period_length } => match user % 3 {
            0 => (TrajectoryLabel::Stable, Drift::None),
            1 => (TrajectoryLabel::EvolvingPersistent, Drift::Persistent { switch_period }),
            _ => (TrajectoryLabel::EvolvingVacillating, Drift::Vacillating { period_length }),
        },
    }
}

fn mixture_path(rng: &mut ChaCha8Rng, k: usize, tau: usize, drift: Drift, gamma: [f64; 2]) -> Vec<Vec<f64>> {
    let profile = rank_profile(k, rng.random_range(gamma[0]..=gamma[1]));
    let mut topics: Vec<usize> = (0..k).collect();
    topics.shuffle(rng);
    let mut state_a = vec![0.0; k];
    for (rank, &t) in topics.iter().enumerate() {
        state_a[t] = profile[rank];
    }
    // B promotes the rank-2 or rank-3 topic to the top.
    let mut state_b = state_a.clone();
    let partner = topics[rng.random_range(1..3.min(k))];
    state_b.swap(topics[0], partner);
    (0..tau)
        .map(|t| {
            let use_b = match drift {
                Drift::None | Drift::Mixed { .. } => false,
                Drift::Persistent { switch_period } => t >= switch_period,
                Drift::Vacillating { period_length } => (t / period_length) % 2 == 1,
            };
            if use_b { state_b.clone() } else { state_a.clone() }
        })
        .collect()
}

/// Number of tokens read in one period, at least one: Poisson around
/// `mean`, or gamma-Poisson with overdispersion `dispersion` when positive.
pub fn sample_token_count(rng: &mut impl Rng, mean: f64, dispersion: f64) -> usize {
    let rate = if dispersion > 0.0 {
        let shape = 1.0 / dispersion;
        Gamma::new(shape, mean / shape).expect("positive shape and scale").sample(rng).max(f64::MIN_POSITIVE)
    } else {
        mean
    };
    let draw: f64 = Poisson::new(rate).expect("positive mean").sample(rng);
    (draw as usize).max(1)
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + user as u64);
    rng
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let (k, d) = (spec.k_true, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids = orthonormal_centroids(&mut rng, k, d);
    let noise = Normal::new(0.0, TOKEN_NOISE / (d as f64).sqrt()).expect("valid normal");

    let topic_names: Vec<String> = (0..k).map(topic_name).collect();
    let mut tokens = Vec::with_capacity(spec.vocab_size);
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut section_labels = BTreeMap::new();
    let mut embeddings = Array2::zeros((spec.vocab_size, d));
    for i in 0..spec.vocab_size {
        let topic = i % k;
        let tok = format!("{}{:03}", topic_names[topic], i / k);
        let mut row = centroids.row(topic).to_owned();
        row.mapv_inplace(|x| x + noise.sample(&mut rng));
        embeddings.row_mut(i).assign(&row);
        blocks[topic].push(i);
        section_labels.insert(tok.clone(), topic);
        tokens.push(tok);
    }
    // Centroids reported as the realised block means.
    let mut means = Array2::zeros((k, d));
    for (t, block) in blocks.iter().enumerate() {
        for &i in block {
            let mut row = means.row_mut(t);
            row += &embeddings.row(i);
        }
        means.row_mut(t).mapv_inplace(|x| x / block.len() as f64);
    }

    let devices = ["desktop", "mobile", "tablet"];
    let mut events = Vec::new();
    let mut users = Vec::with_capacity(spec.n);
    for user in 0..spec.n {
        let mut urng = user_rng(spec.seed, user);
        let (label, drift) = label_for(spec.drift, user);
        let path = mixture_path(&mut urng, k, spec.tau, drift, spec.profile_gamma);
        let user_id = format!("u{user:05}");
        let top = argmax(&path[0]);
        let mut demographics = Demographics::new();
        demographics.insert("zip".into(), format!("02{:01}{:02}", top % 10, urng.random_range(0..3)));
        demographics.insert("device".into(), devices[urng.random_range(0..devices.len())].into());
        let mut first = true;
        for (period, mixture) in path.iter().enumerate() {
            let weights = WeightedIndex::new(mixture).expect("valid mixture");
            let mut remaining = sample_token_count(&mut urng, spec.tokens_per_period, spec.activity_dispersion);
            while remaining > 0 {
                let len = remaining.min(spec.headline_len);
                remaining -= len;
                let topic = weights.sample(&mut urng);
                let block = &blocks[topic];
                let text = (0..len)
                    .map(|_| tokens[block[urng.random_range(0..block.len())]].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                events.push(ConsumptionEvent {
                    user_id: user_id.clone(),
                    period,
                    text,
                    section: Some(topic_names[topic].clone()),
                    demographics: first.then(|| demographics.clone()),
                });
                first = false;
            }
        }
        users.push(UserTruth { user_id, label, mixtures: path });
    }

    let truth = SyntheticGroundTruth {
        topic_names,
        topic_centroids: means.rows().into_iter().map(|r| r.to_vec()).collect(),
        users,
        section_labels,
    };
    Ok(SyntheticCorpus { events, tokens, embeddings, truth })
}

/// Small dense instance for gradient checks: `n` users active in every one
/// of `tau` periods, each cell holding one to three random tokens from a
/// vocabulary of `vocab_size` standard-normal embeddings of dimension `d`.
pub fn random_dataset(n: usize, tau: usize, d: usize, vocab_size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || tau == 0 || d == 0 || vocab_size == 0 {
        return Err(Error::InvalidArgument("random_dataset sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let table = EmbeddingTable::new(Array2::from_shape_simple_fn((vocab_size, d), || normal.sample(&mut rng)))?;
    let users = (0..n)
        .map(|i| UserHistory {
            id: format!("u{i}"),
            periods: (0..tau).collect(),
            counts: (0..tau)
                .map(|_| {
                    let mut c = TokenCounts::new();
                    for _ in 0..rng.random_range(1..=3) {
                        *c.entry(rng.random_range(0..vocab_size)).or_default() += 1;
                    }
                    c
                })
                .collect(),
            demographics: Demographics::new(),
        })
        .collect();
    Dataset::new(ConsumptionPanel::new(users, tau, vocab_size)?, &table)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub estimated: usize,
    pub truth: usize,
    pub cosine: f64,
}

/// Greedy maximum-cosine matching of estimated factor rows to true
/// centroids: repeatedly take the most similar remaining pair.
pub fn align_factors(estimated: &Array2<f64>, centroids: &Array2<f64>) -> Result<Vec<MatchedPair>> {
    if estimated.nrows() < centroids.nrows() {
        return Err(Error::InvalidArgument(format!(
            "need at least {} estimated rows, got {}",
            centroids.nrows(),
            estimated.nrows()
        )));
    }
    let mut pairs: Vec<MatchedPair> = Vec::new();
    for i in 0..estimated.nrows() {
        for j in 0..centroids.nrows() {
            pairs.push(MatchedPair {
                estimated: i,
                truth: j,
                cosine: cosine(estimated.row(i), centroids.row(j)),
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.cosine
            .total_cmp(&a.cosine)
            .then(a.estimated.cmp(&b.estimated))
            .then(a.truth.cmp(&b.truth))
    });
    let mut used_est = vec![false; estimated.nrows()];
    let mut used_true = vec![false; centroids.nrows()];
    let mut matched = Vec::with_capacity(centroids.nrows());
    for p in pairs {
        if !used_est[p.estimated] && !used_true[p.truth] {
            used_est[p.estimated] = true;
            used_true[p.truth] = true;
            matched.push(p);
        }
    }
    matched.sort_by_key(|p| p.truth);
    Ok(matched)
}

pub fn mean_matched_cosine(pairs: &[MatchedPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.cosine).sum::<f64>() / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    pub(crate) fn spec(drift: Drift) -> SyntheticSpec {
        SyntheticSpec {
            k_true: 4,
            n: 12,
            tau: 10,
            vocab_size: 120,
            tokens_per_period: 20.0,
            dim: 8,
            headline_len: 5,
            profile_gamma: [1.0, 2.0],
            activity_dispersion: 0.0,
            drift,
            seed: 9,
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut s = spec(Drift::None);
        s.vocab_size = 60;
        assert!(generate(&s).is_err());
        let s = SyntheticSpec { k_true: 1, ..spec(Drift::None) };
        assert!(s.validate().is_err());
        assert!(spec(Drift::Persistent { switch_period: 10 }).validate().is_err());
        assert!(spec(Drift::Vacillating { period_length: 5 }).validate().is_err());
        assert!(spec(Drift::Vacillating { period_length: 4 }).validate().is_ok());
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&spec(Drift::None)).unwrap();
        let b = generate(&spec(Drift::None)).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        crate::corpus::write_events_jsonl(&a.events, &mut ba).unwrap();
        crate::corpus::write_events_jsonl(&b.events, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let (mut ga, mut gb) = (Vec::new(), Vec::new());
        a.write_glove(&mut ga).unwrap();
        b.write_glove(&mut gb).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn centroids_are_near_orthogonal() {
        let c = generate(&spec(Drift::None)).unwrap().truth.centroid_matrix();
        for i in 0..c.nrows() {
            for j in 0..i {
                assert!(cosine(c.row(i), c.row(j)).abs() < 0.5);
            }
        }
    }

    #[test]
    fn mixtures_stay_on_simplex() {
        let corpus = generate(&spec(Drift::Mixed { switch_period: 5, period_length: 2 })).unwrap();
        for u in &corpus.truth.users {
            for m in &u.mixtures {
                assert_abs_diff_eq!(m.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                assert!(m.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn align_identity_and_negation() {
        let c = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let perm = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let m = align_factors(&perm, &c).unwrap();
        assert!(m.iter().all(|p| (p.cosine - 1.0).abs() < 1e-12));
        assert_eq!(m.iter().map(|p| p.estimated).collect::<Vec<_>>(), [1, 2, 0]);

        let mut neg = c.clone();
        neg.row_mut(1).mapv_inplace(|x| -x);
        let m = align_factors(&neg, &c).unwrap();
        assert_abs_diff_eq!(m[1].cosine, -1.0);
        assert_abs_diff_eq!(m[0].cosine, 1.0);
        assert_abs_diff_eq!(m[2].cosine, 1.0);
    }
}
