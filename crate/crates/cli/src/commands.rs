//! Subcommand implementations. Each writes machine-readable output under the
//! configured output directory and returns a human summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use dynmf::ablation::{ablate, Variant};
use dynmf::checkpoint::Checkpoint;
use dynmf::corpus::{
    assemble_panel, build_vocabulary, load_embeddings, read_events, ConsumptionEvent, Demographics,
};
use dynmf::eval::{
    cosine_report, generate_intrusion_items, holdout_split, mean_precision_at_k, score_intrusion,
    IntrusionItem, IntrusionResponse,
};
use dynmf::experiment::{evaluate_variant, run_sweep};
use dynmf::model::{init_params, HyperParams};
use dynmf::synth::{generate, random_dataset, SyntheticSpec};
use dynmf::training::{finite_diff_check, train_with_callback};
use dynmf::transfer::{cold_start, fit_new_user, frozen_checksum};
use dynmf::Dataset;
use ndarray::Array1;

use crate::config::RunConfig;
use crate::store::{log_path, read_store, write_jsonl, ModelMeta, TrainedModel, TrajectoryRecord};

/// Result of a subcommand that ran to completion. `ok` is false when the
/// command finished but found a failure it must report through the exit
/// code, such as a gradient check above tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: String,
    pub ok: bool,
}

impl Report {
    fn ok(summary: String) -> Self {
        Self { summary, ok: true }
    }
}

fn out_file(cfg: &RunConfig, explicit: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => cfg.out_dir.join(default_name),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn stopwords(cfg: &RunConfig) -> Result<std::collections::BTreeSet<String>> {
    match &cfg.stopwords {
        Some(p) => Ok(dynmf::stopwords::parse_list(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )),
        None => Ok(dynmf::stopwords::english()),
    }
}

fn load_events(cfg: &RunConfig) -> Result<Vec<ConsumptionEvent>> {
    let path = cfg.require_events()?;
    read_events(path).with_context(|| format!("reading events {}", path.display()))
}

/// Panel over `model`'s vocabulary, keeping users with at least `min_active`
/// active periods.
fn model_panel(model: &TrainedModel, events: &[ConsumptionEvent], min_active: usize) -> Result<Dataset> {
    let panel = assemble_panel(events, &model.vocab, min_active)?;
    Ok(Dataset::new(panel, &model.table)?)
}

pub fn synth(spec_path: &Path, out_dir: &Path) -> Result<Report> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    let corpus = generate(&spec)?;
    fs::create_dir_all(out_dir)?;
    let events = out_dir.join("events.jsonl");
    dynmf::corpus::write_events_jsonl(&corpus.events, File::create(&events)?)?;
    let truth = out_dir.join("truth.json");
    let mut w = BufWriter::new(File::create(&truth)?);
    serde_json::to_writer_pretty(&mut w, &corpus.truth)?;
    w.flush()?;
    let emb = out_dir.join("embeddings.txt");
    corpus.write_glove(File::create(&emb)?)?;
    Ok(Report::ok(format!(
        "generated {} users, {} events, {} tokens, {} topics\nwrote {}, {}, {}",
        spec.n,
        corpus.events.len(),
        corpus.tokens.len(),
        spec.k_true,
        events.display(),
        truth.display(),
        emb.display()
    )))
}

pub fn train(cfg: &RunConfig, out: Option<&Path>, holdout: Option<usize>) -> Result<Report> {
    let events = load_events(cfg)?;
    let vocab = build_vocabulary(&events, &stopwords(cfg)?, cfg.min_count)?;
    let emb_path = cfg.require_embeddings()?;
    let loaded = load_embeddings(emb_path, &vocab, cfg.d).with_context(|| format!("reading {}", emb_path.display()))?;
    if !loaded.misses.is_empty() {
        log::warn!("{} of {} vocabulary tokens have no embedding; their rows are zero", loaded.misses.len(), vocab.len());
    }
    let table = loaded.table;
    let hp = cfg.hyper_params(table.dim());
    let panel = assemble_panel(&events, &vocab, cfg.min_active)?;
    let data = match holdout {
        Some(a) => holdout_split(&panel, &table, a)?.train,
        None => Dataset::new(panel, &table)?,
    };
    ensure!(data.n_users() > 0, "no user is active in at least {} periods", cfg.min_active);

    let ckpt_path = out_file(cfg, out.or(cfg.checkpoint.as_deref()), "model.ckpt")?;
    let mut log = BufWriter::new(File::create(log_path(&ckpt_path))?);
    let outcome = train_with_callback(&data, &hp, &cfg.train_config(), |restart, rep, _| {
        log::info!("restart {restart} epoch {} mean loss {:.6e}", rep.epoch, rep.mean_loss_per_observation);
        let mut line = serde_json::to_value(rep)?;
        line["restart"] = restart.into();
        serde_json::to_writer(&mut log, &line)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;

    let meta = ModelMeta {
        tokens: vocab.tokens().to_vec(),
        stopwords: vocab.stopwords().iter().cloned().collect(),
        users: data.panel().users().iter().map(|u| u.id.clone()).collect(),
        min_active: cfg.min_active,
        min_count: cfg.min_count,
        holdout,
        hyper_params: hp.clone(),
        train_config: cfg.train_config(),
        epochs_run: outcome.last().epoch,
        final_mean_loss: outcome.last().mean_loss_per_observation,
    };
    let initial_loss = outcome.initial().mean_loss_per_observation;
    let restart = outcome.restart;
    let ckpt = Checkpoint::new(outcome.params, &hp, &vocab);
    TrainedModel::save(&ckpt_path, &ckpt, &meta, &vocab, &table)?;
    Ok(Report::ok(format!(
        "trained K={} d={} alpha={} on {} users ({} observations, vocabulary {})\n\
         mean loss {:.6e} -> {:.6e} after {} epochs (restart {} of {})\nwrote {}",
        hp.k,
        hp.d,
        hp.alpha,
        data.n_users(),
        data.n_observations(),
        vocab.len(),
        initial_loss,
        meta.final_mean_loss,
        meta.epochs_run,
        restart + 1,
        cfg.restarts,
        ckpt_path.display()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Mp,
    Cosine,
    Both,
}

pub fn eval(cfg: &RunConfig, metric: Metric, out: Option<&Path>) -> Result<Report> {
    let model = TrainedModel::load(cfg.require_checkpoint()?)?;
    let events = load_events(cfg)?;
    let panel = assemble_panel(&events, &model.vocab, model.meta.min_active)?;
    let split = holdout_split(&panel, &model.table, cfg.a)?;
    if model.meta.holdout.is_none_or(|h| h < cfg.a) {
        log::warn!(
            "checkpoint was trained without holding out {} periods; known users' targets were seen in training",
            cfg.a
        );
    }
    let fit = model.fit_config(cfg.fit_epochs);
    let mut preds = Vec::with_capacity(split.n_users());
    let mut fitted = 0;
    for u in 0..split.n_users() {
        let (traj, known) = model.trajectory(&split.train, u, &fit)?;
        fitted += usize::from(!known);
        preds.push(traj.final_r().expect("kept users have a training period"));
    }

    let path = out_file(cfg, out, "eval.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["model".to_string(), "a".to_string(), "users".to_string()];
    let mut row = vec!["full".to_string(), cfg.a.to_string(), split.n_users().to_string()];
    let mut summary = format!(
        "evaluated {} users at horizon a={} ({} fitted as new users, {} excluded)\n",
        split.n_users(),
        cfg.a,
        fitted,
        split.excluded.len()
    );
    if metric != Metric::Cosine {
        for &k in &cfg.eval_k {
            let r = mean_precision_at_k(&preds, &split.targets, k, cfg.a)?;
            header.push(format!("mp@{k}"));
            row.push(format!("{:.6}", r.mean_precision));
            writeln!(summary, "  MP@{k:<3} {:.2}", 100.0 * r.mean_precision)?;
        }
    }
    if metric != Metric::Mp {
        let c = cosine_report(&preds, &split.targets)?;
        header.extend(["cos_mean".into(), "cos_std".into()]);
        row.extend([format!("{:.6}", c.mean), format!("{:.6}", c.std)]);
        writeln!(summary, "  cosine {:.4} ± {:.4}", c.mean, c.std)?;
    }
    w.write_record(&header)?;
    w.write_record(&row)?;
    w.flush()?;
    write!(summary, "wrote {}", path.display())?;
    Ok(Report::ok(summary))
}

pub fn infer(cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    let model = TrainedModel::load(cfg.require_checkpoint()?)?;
    let events = load_events(cfg)?;
    let data = model_panel(&model, &events, 1)?;
    let hp = model.hyper_params();
    let fit = model.fit_config(cfg.fit_epochs);
    let before = frozen_checksum(&model.ckpt.params);
    let mut records = Vec::with_capacity(data.n_users());
    for u in 0..data.n_users() {
        let f = fit_new_user(data.periods(u), data.contents(u), &model.ckpt.params, &hp, &fit)?;
        let mut rec = TrajectoryRecord::new(data.panel(), u, &f.trajectory, false);
        rec.fit_loss = Some(f.fit_loss);
        rec.loss_history = Some(f.loss_history);
        records.push(rec);
    }
    ensure!(frozen_checksum(&model.ckpt.params) == before, "shared parameters changed during fitting");
    let path = out_file(cfg, out, "infer.jsonl")?;
    write_jsonl(&path, &records)?;
    let mean_loss = records.iter().filter_map(|r| r.fit_loss).sum::<f64>() / records.len().max(1) as f64;
    Ok(Report::ok(format!(
        "fitted {} users over {} epochs each with shared parameters frozen (checksum {})\n\
         mean fit loss {:.6e}\nwrote {}",
        records.len(),
        fit.epochs,
        &before[..12],
        mean_loss,
        path.display()
    )))
}

/// Known users' trajectories, as a store, from the checkpoint and events.
fn trajectories_of(model: &TrainedModel, cfg: &RunConfig, min_active: usize) -> Result<Vec<TrajectoryRecord>> {
    let events = load_events(cfg)?;
    let data = model_panel(model, &events, min_active)?;
    let fit = model.fit_config(cfg.fit_epochs);
    (0..data.n_users())
        .map(|u| {
            let (traj, known) = model.trajectory(&data, u, &fit)?;
            Ok(TrajectoryRecord::new(data.panel(), u, &traj, known))
        })
        .collect()
}

pub fn coldstart(cfg: &RunConfig, demographics: &Path, store: Option<&Path>, m: usize, out: Option<&Path>) -> Result<Report> {
    let profile: Demographics = serde_json::from_str(
        &fs::read_to_string(demographics).with_context(|| format!("reading {}", demographics.display()))?,
    )
    .with_context(|| format!("{} must hold a JSON object of string values", demographics.display()))?;
    let records = match store {
        Some(p) => read_store(p)?,
        None => {
            let model = TrainedModel::load(cfg.require_checkpoint()?)?;
            trajectories_of(&model, cfg, model.meta.min_active)?
        }
    };
    ensure!(!records.is_empty(), "the trajectory store is empty");
    let k = records[0].u[0].len();
    if let Some(ck) = cfg.checkpoint.as_deref().filter(|_| store.is_some()) {
        let header = Checkpoint::load(ck)?.header;
        ensure!(header.k == k, "store vectors have {k} attributes but the checkpoint has K={}", header.k);
    }
    let known: Vec<(Demographics, Array1<f64>)> = records
        .iter()
        .map(|r| (r.demographics.clone(), Array1::from(r.u.last().expect("non-empty").clone())))
        .collect();
    if known.iter().any(|(_, u)| u.len() != k) {
        bail!("trajectory store mixes vectors of different lengths");
    }
    let u = cold_start(&profile, &known, m)?;
    let path = out_file(cfg, out, "coldstart.json")?;
    let body = serde_json::json!({ "demographics": profile, "m": m, "u": u.to_vec() });
    fs::write(&path, format!("{body}\n"))?;
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    let top: Vec<String> = order.iter().take(5).map(|&i| format!("{i}:{:.3}", u[i])).collect();
    Ok(Report::ok(format!(
        "cold-start weighting from {} known users (m={m})\n  top attributes {}\nwrote {}",
        known.len(),
        top.join(" "),
        path.display()
    )))
}

pub fn intrude(cfg: &RunConfig, out: Option<&Path>, responses: Option<&Path>) -> Result<Report> {
    let model = TrainedModel::load(cfg.require_checkpoint()?)?;
    let items = generate_intrusion_items(&model.ckpt.params.v, &model.table, &model.vocab, cfg.seed)?;
    let path = out_file(cfg, out, "intrusion_items.json")?;
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &items)?;
    w.flush()?;
    let mut summary = format!("generated {} intrusion items\nwrote {}", items.len(), path.display());
    if let Some(resp) = responses {
        let scored = score_responses(&items, resp)?;
        let scores_path = path.with_file_name("intrusion_scores.csv");
        let mut w = csv::Writer::from_path(&scores_path)?;
        w.write_record(["attribute_index", "responses", "correct", "precision"])?;
        for s in &scored {
            w.write_record([
                s.attribute_index.to_string(),
                s.responses.to_string(),
                s.correct.to_string(),
                s.precision.map(|p| format!("{p:.6}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        let answered: Vec<f64> = scored.iter().filter_map(|s| s.precision).collect();
        let mean = answered.iter().sum::<f64>() / answered.len().max(1) as f64;
        write!(
            summary,
            "\nscored {} responses; mean model precision {:.3} over {} answered items\nwrote {}",
            scored.iter().map(|s| s.responses).sum::<usize>(),
            mean,
            answered.len(),
            scores_path.display()
        )?;
    }
    Ok(Report::ok(summary))
}

fn score_responses(items: &[IntrusionItem], path: &Path) -> Result<Vec<dynmf::eval::IntrusionScore>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let responses: Vec<IntrusionResponse> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(score_intrusion(items, &responses)?)
}

pub fn trajectories(cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    let model = TrainedModel::load(cfg.require_checkpoint()?)?;
    let records = trajectories_of(&model, cfg, 1)?;
    let path = out_file(cfg, out, "trajectories.csv")?;
    let k = model.ckpt.header.k;
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["user_id".to_string(), "period".to_string()];
    header.extend((0..k).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in &records {
        for (p, u) in rec.periods.iter().zip(&rec.u) {
            let mut row = vec![rec.user_id.clone(), p.to_string()];
            row.extend(u.iter().map(|x| format!("{x:.6}")));
            w.write_record(&row)?;
        }
        let label = dynmf::eval::classify_trajectory(&rec.u, dynmf::eval::DEFAULT_TOP_M.min(k)).label;
        *labels.entry(label.as_str()).or_default() += 1;
    }
    w.flush()?;
    let store = path.with_extension("jsonl");
    write_jsonl(&store, &records)?;
    let known = records.iter().filter(|r| r.known).count();
    Ok(Report::ok(format!(
        "{} trajectories ({} known users, {} fitted)\n  classes {:?}\nwrote {} and {}",
        records.len(),
        known,
        records.len() - known,
        labels,
        path.display(),
        store.display()
    )))
}

/// Instance sizes for `gradcheck`: (n, τ, d, K).
pub fn gradcheck_dims(name: &str) -> Result<(usize, usize, usize, usize)> {
    match name {
        "small" => Ok((3, 4, 5, 3)),
        "medium" => Ok((8, 6, 10, 5)),
        other => bail!("unknown gradcheck size {other:?}; expected small or medium"),
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

pub fn gradcheck(cfg: &RunConfig, dims: &str, out: Option<&Path>) -> Result<Report> {
    let (n, tau, d, k) = gradcheck_dims(dims)?;
    let start = Instant::now();
    let data = random_dataset(n, tau, d, 4 * d, cfg.seed)?;
    let mut results = Vec::new();
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.5, 1.0] {
        let hp = HyperParams { alpha, seed: cfg.seed, initial_state: cfg.initial_state, ..HyperParams::new(k, d) };
        let params = init_params(n, &hp);
        let err = finite_diff_check(&data, &params, &hp, GRADCHECK_EPSILON)?;
        worst = worst.max(err);
        results.push(serde_json::json!({ "alpha": alpha, "max_relative_error": err }));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < GRADCHECK_TOLERANCE;
    let path = out_file(cfg, out, "gradcheck.json")?;
    let body = serde_json::json!({
        "n": n, "tau": tau, "d": d, "K": k, "epsilon": GRADCHECK_EPSILON,
        "tolerance": GRADCHECK_TOLERANCE, "results": results, "max_relative_error": worst,
        "pass": pass, "seconds": elapsed,
    });
    fs::write(&path, format!("{body}\n"))?;
    Ok(Report {
        summary: format!(
            "gradient check n={n} tau={tau} d={d} K={k}: max relative error {worst:.3e} ({}) in {elapsed:.2}s\nwrote {}",
            if pass { "pass" } else { "FAIL" },
            path.display()
        ),
        ok: pass,
    })
}

/// Training inputs shared by `ablate` and `sweep`.
fn training_inputs(cfg: &RunConfig) -> Result<(dynmf::corpus::ConsumptionPanel, dynmf::corpus::EmbeddingTable)> {
    let events = load_events(cfg)?;
    let vocab = build_vocabulary(&events, &stopwords(cfg)?, cfg.min_count)?;
    let loaded = load_embeddings(cfg.require_embeddings()?, &vocab, cfg.d)?;
    let panel = assemble_panel(&events, &vocab, cfg.min_active)?;
    Ok((panel, loaded.table))
}

pub fn ablate_cmd(cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    let (panel, table) = training_inputs(cfg)?;
    let hp = cfg.hyper_params(table.dim());
    let ablated = ablate(cfg.ablation.flags(), &hp)?;
    let mut variants = vec![Variant::Full];
    if ablated.variant != Variant::Full {
        variants.push(ablated.variant);
    }
    let path = out_file(cfg, out, "ablation.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["model".to_string(), "a".to_string()];
    header.extend(cfg.eval_k.iter().map(|k| format!("mp@{k}")));
    w.write_record(&header)?;
    let mut summary = format!("holdout a={} over {} users\n", cfg.a, panel.n_users());
    for v in variants {
        let curve = evaluate_variant(&panel, &table, v, cfg.a, &cfg.eval_k, &hp, &cfg.train_config())?;
        let mut row = vec![v.as_str().to_string(), cfg.a.to_string()];
        row.extend(curve.iter().map(|r| format!("{:.6}", r.mean_precision)));
        w.write_record(&row)?;
        let cols: Vec<String> = curve.iter().map(|r| format!("MP@{} {:.2}", r.k, 100.0 * r.mean_precision)).collect();
        writeln!(summary, "  {:<16} {}", v.as_str(), cols.join("  "))?;
    }
    w.flush()?;
    write!(summary, "wrote {}", path.display())?;
    Ok(Report::ok(summary))
}

pub fn sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    let (panel, table) = training_inputs(cfg)?;
    let hp = cfg.hyper_params(table.dim());
    let grid = run_sweep(&panel, &table, &cfg.grid_k, &cfg.grid_alpha, &hp, &cfg.train_config(), cfg.seed)?;
    let path = out_file(cfg, out, "sweep.csv")?;
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["K", "alpha", "mp1", "error"])?;
    for c in &grid.cells {
        w.write_record([
            c.k.to_string(),
            c.alpha.to_string(),
            c.mp1.map(|m| format!("{m:.6}")).unwrap_or_default(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut summary = format!("{:>6}", "K \\ α");
    for a in &grid.alphas {
        write!(summary, "{a:>8.2}")?;
    }
    summary.push('\n');
    for (ki, k) in grid.ks.iter().enumerate() {
        write!(summary, "{k:>6}")?;
        for ai in 0..grid.alphas.len() {
            match grid.cell(ki, ai).mp1 {
                Some(m) => write!(summary, "{:>8.2}", 100.0 * m)?,
                None => write!(summary, "{:>8}", "err")?,
            }
        }
        summary.push('\n');
    }
    let failed = grid.cells.iter().filter(|c| c.error.is_some()).count();
    if let Some(best) = grid.argmax() {
        writeln!(summary, "best K={} α={} MP@1 {:.2}", best.k, best.alpha, 100.0 * best.mp1.unwrap_or(0.0))?;
    }
    if failed > 0 {
        writeln!(summary, "{failed} cells failed")?;
    }
    write!(summary, "wrote {}", path.display())?;
    Ok(Report { summary, ok: failed == 0 })
}
