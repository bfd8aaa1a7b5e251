//! Raw consumption events, the vocabulary, pretrained word embeddings and the
//! per-user, per-period panel the model consumes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Users active in fewer distinct periods than this are dropped from the panel.
pub const DEFAULT_MIN_ACTIVE: usize = 5;
pub const DEFAULT_MIN_COUNT: usize = 1;

/// Sparse bag of words for one (user, period) cell: token index to positive count.
pub type TokenCounts = BTreeMap<usize, u32>;

/// Demographic attributes attached to a user, e.g. `zip` or `device`.
pub type Demographics = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionEvent {
    pub user_id: String,
    pub period: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<Demographics>,
}

/// Lowercases `text`, splits it on non-alphanumeric characters and drops
/// pure-digit fragments and stopwords. Order of the surviving tokens is kept.
pub fn tokenize(text: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|frag| !frag.is_empty())
        .map(str::to_lowercase)
        .filter(|tok| !tok.chars().all(|c| c.is_ascii_digit()))
        .filter(|tok| !stopwords.contains(tok))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    stopwords: BTreeSet<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list. Duplicates and
    /// stopwords are rejected.
    pub fn from_tokens(tokens: Vec<String>, stopwords: BTreeSet<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if stopwords.contains(tok) {
                return Err(Error::InvalidArgument(format!("token {tok:?} is a stopword")));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index, stopwords })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn stopwords(&self) -> &BTreeSet<String> {
        &self.stopwords
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// Tokenizes `text` with this vocabulary's stopwords and maps known
    /// tokens to their indices; unknown tokens are skipped.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text, &self.stopwords)
            .iter()
            .filter_map(|t| self.get(t))
            .collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One token per line; the line number is the index.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R, stopwords: BTreeSet<String>) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in input.lines() {
            let line = line?;
            let tok = line.trim();
            if !tok.is_empty() {
                tokens.push(tok.to_string());
            }
        }
        Self::from_tokens(tokens, stopwords)
    }
}

/// Collects every token occurring at least `min_count` times across the
/// events, sorted lexicographically.
pub fn build_vocabulary(
    events: &[ConsumptionEvent],
    stopwords: &BTreeSet<String>,
    min_count: usize,
) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for ev in events {
        for tok in tokenize(&ev.text, stopwords) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let tokens: Vec<String> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .map(|(t, _)| t)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    Vocabulary::from_tokens(tokens, stopwords.clone())
}

/// Fixed word-embedding matrix, one row per vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.ncols() == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn row(&self, token: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(token)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Writes the table in GloVe text format aligned to `vocab`.
    pub fn write_glove<W: Write>(&self, vocab: &Vocabulary, out: W) -> Result<()> {
        write_glove(
            vocab.tokens().iter().map(String::as_str).zip(self.matrix.rows()),
            out,
        )
    }
}

/// Writes `(token, vector)` pairs as GloVe text. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_glove<'a, W, I>(rows: I, out: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, ArrayView1<'a, f64>)>,
{
    let mut out = BufWriter::new(out);
    for (tok, row) in rows {
        write!(out, "{tok}")?;
        for v in row {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEmbeddings {
    pub table: EmbeddingTable,
    /// Vocabulary tokens absent from the file; their rows are zero.
    pub misses: Vec<String>,
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    expected_dim: Option<usize>,
) -> Result<LoadedEmbeddings> {
    let file = File::open(path)?;
    parse_embeddings(BufReader::new(file), vocab, expected_dim)
}

/// Parses GloVe text (`token f1 f2 ... fd` per line) and aligns rows to
/// `vocab`. The first occurrence of a duplicated token wins.
pub fn parse_embeddings<R: BufRead>(
    input: R,
    vocab: &Vocabulary,
    expected_dim: Option<usize>,
) -> Result<LoadedEmbeddings> {
    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = lineno + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| Error::EmbeddingFormat {
                    line: line_no,
                    reason: format!("bad float {p:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::EmbeddingFormat { line: line_no, reason: "no vector values".into() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmbeddingFormat { line: line_no, reason: "non-finite value".into() });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::EmbeddingFormat {
                    line: line_no,
                    reason: format!("expected {d} values, found {}", values.len()),
                })
            }
            Some(_) => {}
        }
        if let Some(idx) = vocab.get(token) {
            if rows[idx].is_none() {
                rows[idx] = Some(values);
            }
        }
    }
    let d = dim.ok_or(Error::EmbeddingFormat { line: 0, reason: "file holds no vectors".into() })?;
    if let Some(expected) = expected_dim {
        if expected != d {
            return Err(Error::DimensionMismatch { expected, found: d });
        }
    }
    let mut matrix = Array2::zeros((vocab.len(), d));
    let mut misses = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        match row {
            Some(values) => matrix.row_mut(i).assign(&Array1::from(values)),
            None => misses.push(vocab.token(i).to_string()),
        }
    }
    Ok(LoadedEmbeddings { table: EmbeddingTable::new(matrix)?, misses })
}

/// Count-weighted mean of the embedding rows for the tokens in `counts`.
///
/// All-zero rows (tokens missing from the embedding file) contribute to
/// neither numerator nor denominator; if nothing remains the zero vector is
/// returned.
pub fn embed_content(counts: &TokenCounts, table: &EmbeddingTable) -> Result<Array1<f64>> {
    if counts.is_empty() {
        return Err(Error::EmptyContent);
    }
    let mut acc = Array1::zeros(table.dim());
    let mut weight = 0.0;
    for (&tok, &count) in counts {
        if tok >= table.len() {
            return Err(Error::TokenOutOfRange { index: tok, size: table.len() });
        }
        let row = table.row(tok);
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        acc.scaled_add(f64::from(count), &row);
        weight += f64::from(count);
    }
    if weight > 0.0 {
        acc /= weight;
    }
    Ok(acc)
}

/// Everything the panel knows about one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub id: String,
    /// Strictly increasing active periods.
    pub periods: Vec<usize>,
    /// Token counts aligned with `periods`; every map is non-empty.
    pub counts: Vec<TokenCounts>,
    pub demographics: Demographics,
}

impl UserHistory {
    pub fn n_active(&self) -> usize {
        self.periods.len()
    }
}

/// Per-user, per-period sparse token counts. Users are indexed `0..n` in
/// first-appearance order; periods with no consumption are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsumptionPanel {
    n_periods: usize,
    vocab_size: usize,
    users: Vec<UserHistory>,
    user_index: HashMap<String, usize>,
}

impl ConsumptionPanel {
    pub fn new(users: Vec<UserHistory>, n_periods: usize, vocab_size: usize) -> Result<Self> {
        let mut user_index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if u.periods.len() != u.counts.len() {
                return Err(Error::InvalidArgument(format!(
                    "user {}: periods and counts differ in length",
                    u.id
                )));
            }
            if u.periods.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "user {}: active periods not strictly increasing",
                    u.id
                )));
            }
            if u.periods.iter().any(|&p| p >= n_periods) {
                return Err(Error::InvalidArgument(format!("user {}: period beyond range", u.id)));
            }
            for c in &u.counts {
                if c.is_empty() || c.values().any(|&v| v == 0) {
                    return Err(Error::InvalidArgument(format!(
                        "user {}: empty cell or zero count",
                        u.id
                    )));
                }
                if let Some((&tok, _)) = c.iter().next_back() {
                    if tok >= vocab_size {
                        return Err(Error::TokenOutOfRange { index: tok, size: vocab_size });
                    }
                }
            }
            if user_index.insert(u.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate user id {}", u.id)));
            }
        }
        Ok(Self { n_periods, vocab_size, users, user_index })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn users(&self) -> &[UserHistory] {
        &self.users
    }

    pub fn user(&self, index: usize) -> &UserHistory {
        &self.users[index]
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn active(&self, user: usize) -> &[usize] {
        &self.users[user].periods
    }

    /// Number of (user, active period) cells.
    pub fn n_observations(&self) -> usize {
        self.users.iter().map(|u| u.periods.len()).sum()
    }

    /// Keeps only the listed users, in the given order.
    pub fn subset(&self, users: &[usize]) -> Result<Self> {
        let histories = users.iter().map(|&i| self.users[i].clone()).collect();
        Self::new(histories, self.n_periods, self.vocab_size)
    }
}

/// Aggregates events into a panel. Tokens outside `vocab` are ignored; a
/// period becomes active only if at least one in-vocabulary token was read.
/// Users active in fewer than `min_active` periods are dropped.
pub fn assemble_panel(
    events: &[ConsumptionEvent],
    vocab: &Vocabulary,
    min_active: usize,
) -> Result<ConsumptionPanel> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: HashMap<String, BTreeMap<usize, TokenCounts>> = HashMap::new();
    let mut demographics: HashMap<String, Demographics> = HashMap::new();
    let mut n_periods = 0;
    for ev in events {
        if !cells.contains_key(&ev.user_id) {
            order.push(ev.user_id.clone());
            cells.insert(ev.user_id.clone(), BTreeMap::new());
        }
        n_periods = n_periods.max(ev.period + 1);
        if let Some(demo) = &ev.demographics {
            demographics
                .entry(ev.user_id.clone())
                .or_default()
                .extend(demo.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let tokens = vocab.encode(&ev.text);
        if tokens.is_empty() {
            continue;
        }
        let user_cells = cells.get_mut(&ev.user_id).expect("inserted above");
        let cell = user_cells.entry(ev.period).or_default();
        for tok in tokens {
            *cell.entry(tok).or_default() += 1;
        }
    }
    let mut users = Vec::new();
    for id in order {
        let user_cells = cells.remove(&id).unwrap_or_default();
        if user_cells.len() < min_active || user_cells.is_empty() {
            continue;
        }
        let (periods, counts): (Vec<_>, Vec<_>) = user_cells.into_iter().unzip();
        let demographics = demographics.remove(&id).unwrap_or_default();
        users.push(UserHistory { id, periods, counts, demographics });
    }
    ConsumptionPanel::new(users, n_periods, vocab.len())
}

fn validate_event(ev: &ConsumptionEvent, line: usize) -> Result<()> {
    if ev.text.trim().is_empty() {
        return Err(Error::InvalidEvent { line, reason: "empty text".into() });
    }
    if ev.user_id.is_empty() {
        return Err(Error::InvalidEvent { line, reason: "empty user_id".into() });
    }
    Ok(())
}

/// Reads JSON-lines events, one object per non-blank line.
pub fn read_events_jsonl<R: BufRead>(input: R) -> Result<Vec<ConsumptionEvent>> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: ConsumptionEvent = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidEvent { line: i + 1, reason: e.to_string() })?;
        validate_event(&ev, i + 1)?;
        events.push(ev);
    }
    Ok(events)
}

#[derive(Debug, Deserialize)]
struct CsvEvent {
    user_id: String,
    period: usize,
    text: String,
    #[serde(default)]
    section: Option<String>,
    #[serde(default)]
    demographics: Option<String>,
}

/// Reads CSV events with a header row naming `user_id,period,text` and the
/// optional `section` and `demographics` columns. Demographics are a JSON
/// object encoded in the cell.
pub fn read_events_csv<R: std::io::Read>(input: R) -> Result<Vec<ConsumptionEvent>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut events = Vec::new();
    for (i, rec) in reader.deserialize::<CsvEvent>().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let demographics = match rec.demographics.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(
                serde_json::from_str::<Demographics>(raw)
                    .map_err(|e| Error::InvalidEvent { line, reason: e.to_string() })?,
            ),
        };
        let ev = ConsumptionEvent {
            user_id: rec.user_id,
            period: rec.period,
            text: rec.text,
            section: rec.section.filter(|s| !s.is_empty()),
            demographics,
        };
        validate_event(&ev, line)?;
        events.push(ev);
    }
    Ok(events)
}

/// Reads events from a `.csv` file or, for any other extension, JSON lines.
pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<ConsumptionEvent>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        read_events_csv(file)
    } else {
        read_events_jsonl(BufReader::new(file))
    }
}

pub fn write_events_jsonl<W: Write>(events: &[ConsumptionEvent], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
