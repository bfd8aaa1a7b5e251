//! Browser bindings: generate a synthetic panel, train a small model on it
//! and explore how the smoothing weight shapes a trajectory.
//!
//! Every operation takes and returns JSON strings. The plain functions are
//! usable (and tested) natively; the `#[wasm_bindgen]` wrappers turn errors
//! into JavaScript exceptions.

use dynmf::corpus::{assemble_panel, build_vocabulary};
use dynmf::eval::{classify_trajectory, DEFAULT_TOP_M};
use dynmf::model::{forward_trajectory, smooth, HyperParams, InitialState};
use dynmf::synth::{align_factors, generate, SyntheticCorpus, SyntheticSpec};
use dynmf::training::{train_with_callback, TrainConfig};
use dynmf::Dataset;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Users whose paths are returned for plotting.
pub const SHOWN_USERS: usize = 6;

#[derive(Debug, Serialize)]
pub struct UserPath {
    pub id: String,
    pub label: String,
    /// True topic mixture per period.
    pub truth: Vec<Vec<f64>>,
    /// Learned weights per period, columns reordered to the matched topics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learned: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learned_label: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct PanelSummary {
    pub users: usize,
    pub periods: usize,
    pub events: usize,
    pub tokens: usize,
    pub topics: Vec<String>,
    pub label_counts: Vec<(String, usize)>,
    pub shown: Vec<UserPath>,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct DemoTraining {
    pub k: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DemoTraining {
    fn default() -> Self {
        Self { k: 0, alpha: 0.5, epochs: 60, learning_rate: 0.01, seed: 1 }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainingSummary {
    pub mean_loss: Vec<f64>,
    /// Cosine between each true topic centroid and its matched attribute.
    pub recovery: Vec<f64>,
    pub taxonomy_accuracy: f64,
    pub shown: Vec<UserPath>,
}

#[derive(Debug, Serialize)]
pub struct SmoothedPath {
    pub u: Vec<Vec<f64>>,
    pub label: String,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_spec(spec_json: &str) -> Result<(SyntheticSpec, SyntheticCorpus), String> {
    let spec: SyntheticSpec = serde_json::from_str(spec_json).map_err(err)?;
    let corpus = generate(&spec).map_err(err)?;
    Ok((spec, corpus))
}

fn truth_paths(corpus: &SyntheticCorpus) -> Vec<UserPath> {
    corpus
        .truth
        .users
        .iter()
        .take(SHOWN_USERS)
        .map(|u| UserPath {
            id: u.user_id.clone(),
            label: u.label.as_str().into(),
            truth: u.mixtures.clone(),
            learned: None,
            learned_label: None,
        })
        .collect()
}

pub fn describe_panel(spec_json: &str) -> Result<String, String> {
    let (spec, corpus) = parse_spec(spec_json)?;
    let label_counts = dynmf::eval::TrajectoryLabel::ALL
        .iter()
        .map(|l| (l.as_str().to_string(), corpus.truth.users.iter().filter(|u| u.label == *l).count()))
        .collect();
    let summary = PanelSummary {
        users: spec.n,
        periods: spec.tau,
        events: corpus.events.len(),
        tokens: corpus.tokens.len(),
        topics: corpus.truth.topic_names.clone(),
        label_counts,
        shown: truth_paths(&corpus),
    };
    serde_json::to_string(&summary).map_err(err)
}

pub fn train_panel(spec_json: &str, training_json: &str) -> Result<String, String> {
    let (spec, corpus) = parse_spec(spec_json)?;
    let demo: DemoTraining = serde_json::from_str(training_json).map_err(err)?;
    let vocab = build_vocabulary(&corpus.events, &dynmf::stopwords::english(), 1).map_err(err)?;
    let table = corpus.table_for(&vocab).map_err(err)?;
    let panel = assemble_panel(&corpus.events, &vocab, 1).map_err(err)?;
    let data = Dataset::new(panel, &table).map_err(err)?;
    let hp = HyperParams {
        k: if demo.k == 0 { spec.k_true } else { demo.k },
        d: table.dim(),
        alpha: demo.alpha,
        learning_rate: demo.learning_rate,
        epochs: demo.epochs,
        seed: demo.seed,
        initial_state: InitialState::Uniform,
    };
    let outcome = train_with_callback(&data, &hp, &TrainConfig::default(), |_, _, _| Ok(())).map_err(err)?;
    let pairs = align_factors(&outcome.params.v, &corpus.truth.centroid_matrix()).map_err(err)?;

    let mut correct = 0;
    let mut shown = truth_paths(&corpus);
    for user in 0..data.n_users() {
        let traj = forward_trajectory(&data, user, &outcome.params, &hp).map_err(err)?;
        let label = traj.classify(DEFAULT_TOP_M).label;
        let id = &data.panel().user(user).id;
        let truth = corpus.truth.user(id).ok_or_else(|| format!("no ground truth for {id}"))?;
        correct += usize::from(label == truth.label);
        if let Some(path) = shown.iter_mut().find(|p| &p.id == id) {
            let reordered = traj.u.iter().map(|u| pairs.iter().map(|p| u[p.estimated]).collect()).collect();
            path.learned = Some(reordered);
            path.learned_label = Some(label.as_str().into());
        }
    }
    let summary = TrainingSummary {
        mean_loss: outcome.reports.iter().map(|r| r.mean_loss_per_observation).collect(),
        recovery: pairs.iter().map(|p| p.cosine).collect(),
        taxonomy_accuracy: correct as f64 / data.n_users() as f64,
        shown,
    };
    serde_json::to_string(&summary).map_err(err)
}

/// Feeds a sequence of proposal weightings through the smoothing step alone.
pub fn smooth_proposals(proposals_json: &str, alpha: f64) -> Result<String, String> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(format!("alpha {alpha} is outside [0, 1]"));
    }
    let proposals: Vec<Vec<f64>> = serde_json::from_str(proposals_json).map_err(err)?;
    let k = proposals.first().map(Vec::len).ok_or("no proposals")?;
    if k == 0 || proposals.iter().any(|p| p.len() != k) {
        return Err("proposals must be non-empty and of equal length".into());
    }
    let mut u_prev = InitialState::Uniform.vector(k);
    let mut path = Vec::with_capacity(proposals.len());
    for p in proposals {
        let s = Array1::from(p);
        let total = s.sum();
        if total <= 0.0 || s.iter().any(|x| *x < 0.0) {
            return Err("proposals must be non-negative with a positive sum".into());
        }
        let (u, _) = smooth(&(s / total), &u_prev, alpha);
        path.push(u.to_vec());
        u_prev = u;
    }
    let label = classify_trajectory(&path, DEFAULT_TOP_M).label.as_str().into();
    serde_json::to_string(&SmoothedPath { u: path, label }).map_err(err)
}

#[wasm_bindgen(js_name = describePanel)]
pub fn describe_panel_js(spec_json: &str) -> Result<String, JsError> {
    describe_panel(spec_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainPanel)]
pub fn train_panel_js(spec_json: &str, training_json: &str) -> Result<String, JsError> {
    train_panel(spec_json, training_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = smoothProposals)]
pub fn smooth_proposals_js(proposals_json: &str, alpha: f64) -> Result<String, JsError> {
    smooth_proposals(proposals_json, alpha).map_err(|e| JsError::new(&e))
}
