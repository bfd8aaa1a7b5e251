//! A trained model on disk: the checkpoint plus sidecar files holding what
//! the checkpoint header does not, and the JSON-lines trajectory store.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dynmf::checkpoint::Checkpoint;
use dynmf::corpus::{parse_embeddings, ConsumptionPanel, Demographics, EmbeddingTable, Vocabulary};
use dynmf::model::{forward_sequence, HyperParams, UserTrajectory};
use dynmf::training::TrainConfig;
use dynmf::transfer::{fit_new_user, FitConfig};
use dynmf::Dataset;
use serde::{Deserialize, Serialize};

/// Everything needed to reuse a checkpoint on new events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub tokens: Vec<String>,
    pub stopwords: Vec<String>,
    /// Row `i` of `E_a` belongs to `users[i]`.
    pub users: Vec<String>,
    pub min_active: usize,
    pub min_count: usize,
    /// Horizon held out of every user's history at training time, if any.
    pub holdout: Option<usize>,
    pub hyper_params: HyperParams,
    pub train_config: TrainConfig,
    pub epochs_run: usize,
    pub final_mean_loss: f64,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "meta.json")
}

pub fn embeddings_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "embeddings.txt")
}

pub fn log_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, "log.jsonl")
}

fn sidecar(ckpt: &Path, suffix: &str) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    ckpt.with_file_name(name)
}

pub struct TrainedModel {
    pub ckpt: Checkpoint,
    pub meta: ModelMeta,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    /// `E_a` row by user id.
    pub rows: HashMap<String, usize>,
}

impl TrainedModel {
    pub fn save(path: &Path, ckpt: &Checkpoint, meta: &ModelMeta, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
        ckpt.save(path).with_context(|| format!("writing {}", path.display()))?;
        let mut out = BufWriter::new(File::create(meta_path(path))?);
        serde_json::to_writer_pretty(&mut out, meta)?;
        out.write_all(b"\n")?;
        out.flush()?;
        table.write_glove(vocab, File::create(embeddings_path(path))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let meta_file = meta_path(path);
        let meta: ModelMeta = serde_json::from_reader(BufReader::new(
            File::open(&meta_file).with_context(|| format!("opening {}", meta_file.display()))?,
        ))
        .with_context(|| format!("parsing {}", meta_file.display()))?;
        let stopwords: BTreeSet<String> = meta.stopwords.iter().cloned().collect();
        let vocab = Vocabulary::from_tokens(meta.tokens.clone(), stopwords)?;
        ckpt.check_vocab(&vocab)?;
        if meta.users.len() != ckpt.header.n {
            bail!("{} lists {} users but the checkpoint has {}", meta_file.display(), meta.users.len(), ckpt.header.n);
        }
        let emb_file = embeddings_path(path);
        let loaded = parse_embeddings(
            BufReader::new(File::open(&emb_file).with_context(|| format!("opening {}", emb_file.display()))?),
            &vocab,
            Some(ckpt.header.d),
        )?;
        let rows = meta.users.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self { ckpt, meta, vocab, table: loaded.table, rows })
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams { initial_state: self.meta.hyper_params.initial_state, ..self.ckpt.hyper_params() }
    }

    pub fn fit_config(&self, epochs: usize) -> FitConfig {
        FitConfig { epochs, ..FitConfig::from_hyper_params(&self.meta.hyper_params) }
    }

    /// Trajectory of panel user `u`: a forward pass with the trained
    /// embedding for a known user, a frozen-parameter fit otherwise.
    pub fn trajectory(&self, data: &Dataset, u: usize, fit: &FitConfig) -> Result<(UserTrajectory, bool)> {
        let hp = self.hyper_params();
        let id = &data.panel().user(u).id;
        match self.rows.get(id) {
            Some(&row) => Ok((
                forward_sequence(data.periods(u), data.contents(u), self.ckpt.params.e_a.row(row), &self.ckpt.params, &hp)?,
                true,
            )),
            None => Ok((fit_new_user(data.periods(u), data.contents(u), &self.ckpt.params, &hp, fit)?.trajectory, false)),
        }
    }
}

/// One line of the trajectory store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub user_id: String,
    #[serde(default)]
    pub demographics: Demographics,
    pub periods: Vec<usize>,
    /// User factor per active period.
    pub u: Vec<Vec<f64>>,
    /// Whether the user embedding came from training rather than a fit.
    #[serde(default)]
    pub known: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_history: Option<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn new(panel: &ConsumptionPanel, u: usize, traj: &UserTrajectory, known: bool) -> Self {
        let user = panel.user(u);
        Self {
            user_id: user.id.clone(),
            demographics: user.demographics.clone(),
            periods: traj.periods.clone(),
            u: traj.u.clone(),
            known,
            fit_loss: None,
            loss_history: None,
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if rec.u.is_empty() {
            bail!("{} line {}: user {} has an empty trajectory", path.display(), i + 1, rec.user_id);
        }
        records.push(rec);
    }
    Ok(records)
}
