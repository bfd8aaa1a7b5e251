use std::cmp::Ordering;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::cosine;
use crate::corpus::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Holdout horizon, in active periods.
    pub a: usize,
    pub k: usize,
    pub mean_precision: f64,
    pub per_user_hits: Vec<bool>,
}

/// Fraction of users whose own content vector is among the `k` nearest
/// content vectors to their prediction by cosine similarity. Candidates that
/// tie with the user's own vector rank ahead of it when their index is lower.
/// A zero-norm prediction or target is a miss.
pub fn mean_precision_at_k(
    user_vectors: &[Array1<f64>],
    content_vectors: &[Array1<f64>],
    k: usize,
    a: usize,
) -> Result<RetrievalResult> {
    if user_vectors.len() != content_vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            user_vectors.len(),
            content_vectors.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let norm = |v: &Array1<f64>| v.dot(v).sqrt();
    let mut hits = Vec::with_capacity(user_vectors.len());
    for (i, r) in user_vectors.iter().enumerate() {
        if norm(r) == 0.0 || norm(&content_vectors[i]) == 0.0 {
            log::warn!("user {i}: zero-norm vector, counted as a miss");
            hits.push(false);
            continue;
        }
        let sims: Vec<f64> = content_vectors.iter().map(|c| cosine(r.view(), c.view())).collect();
        let own = sims[i];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        hits.push(ahead < k);
    }
    let mean_precision = if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    };
    Ok(RetrievalResult { a, k, mean_precision, per_user_hits: hits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and population standard deviation of per-user `cos(r_i, c_i)`.
pub fn cosine_report(user_vectors: &[Array1<f64>], content_vectors: &[Array1<f64>]) -> Result<CosineReport> {
    if user_vectors.len() != content_vectors.len() || user_vectors.is_empty() {
        return Err(Error::InvalidArgument("need equally many, non-zero predictions and targets".into()));
    }
    let sims: Vec<f64> = user_vectors
        .iter()
        .zip(content_vectors)
        .enumerate()
        .map(|(i, (r, c))| {
            if r.dot(r) == 0.0 || c.dot(c) == 0.0 {
                log::warn!("user {i}: zero-norm vector, similarity taken as 0");
            }
            cosine(r.view(), c.view())
        })
        .collect();
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(CosineReport { mean, std: var.sqrt() })
}

/// Every vocabulary token ordered by cosine similarity to `row`, descending,
/// ties broken lexicographically.
pub fn ranked_tokens(row: ndarray::ArrayView1<f64>, table: &EmbeddingTable, vocab: &Vocabulary) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> =
        (0..table.len()).map(|t| (t, cosine(row, table.row(t)))).collect();
    ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => vocab.token(a.0).cmp(vocab.token(b.0)),
        o => o,
    });
    ranked
}

/// The `top_n` nearest vocabulary tokens to every row of `v`.
pub fn content_attribute_words(
    v: &Array2<f64>,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<Vec<Vec<String>>> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    if table.len() != vocab.len() || v.ncols() != table.dim() {
        return Err(Error::DimensionMismatch { expected: table.dim(), found: v.ncols() });
    }
    v.rows()
        .into_iter()
        .enumerate()
        .map(|(k, row)| {
            if row.dot(&row) == 0.0 {
                return Err(Error::DegenerateAttribute(k));
            }
            Ok(ranked_tokens(row, table, vocab)
                .into_iter()
                .take(top_n)
                .map(|(t, _)| vocab.token(t).to_string())
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::collections::BTreeSet;

    #[test]
    fn identical_vectors_retrieve_themselves() {
        let c = vec![array![1.0, 0.2], array![0.0, 1.0], array![-1.0, 0.5]];
        let r = mean_precision_at_k(&c, &c, 1, 1).unwrap();
        assert_eq!(r.mean_precision, 1.0);
    }

    #[test]
    fn shifted_orthogonal_targets_all_miss() {
        let c: Vec<Array1<f64>> =
            (0..4).map(|i| Array1::from_shape_fn(4, |j| if i == j { 1.0 } else { 0.0 })).collect();
        let r: Vec<Array1<f64>> = (0..4).map(|i| c[(i + 1) % 4].clone()).collect();
        let res = mean_precision_at_k(&r, &c, 1, 1).unwrap();
        assert_eq!(res.mean_precision, 0.0);
        // Own vector has cosine 0 and ties with two others: rank depends on index.
        let res = mean_precision_at_k(&r, &c, 2, 1).unwrap();
        assert_eq!(res.per_user_hits, [true, false, false, false]);
    }

    #[test]
    fn zero_prediction_is_a_miss() {
        let c = vec![array![1.0, 0.0], array![0.0, 1.0]];
        let r = vec![array![0.0, 0.0], array![0.0, 1.0]];
        let res = mean_precision_at_k(&r, &c, 2, 1).unwrap();
        assert_eq!(res.per_user_hits, [false, true]);
        assert_eq!(res.mean_precision, 0.5);
    }

    #[test]
    fn cosine_report_cases() {
        let c = vec![array![1.0, 2.0], array![3.0, -1.0]];
        let rep = cosine_report(&c, &c).unwrap();
        assert_abs_diff_eq!(rep.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.std, 0.0, epsilon = 1e-12);

        let r = vec![array![-1.0, -2.0], array![3.0, -1.0]];
        let rep = cosine_report(&r, &c).unwrap();
        assert_abs_diff_eq!(rep.mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.std, 1.0, epsilon = 1e-12);
    }

    fn small_vocab() -> (Vocabulary, EmbeddingTable) {
        let vocab = Vocabulary::from_tokens(
            ["ant", "bee", "cat", "dog"].iter().map(|s| s.to_string()).collect(),
            BTreeSet::new(),
        )
        .unwrap();
        let table = EmbeddingTable::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]]).unwrap();
        (vocab, table)
    }

    #[test]
    fn attribute_words_rank_by_cosine_with_lexicographic_ties() {
        let (vocab, table) = small_vocab();
        let v = array![[3.0, 0.0], [0.0, 1.0]];
        let words = content_attribute_words(&v, &table, &vocab, 10).unwrap();
        assert_eq!(words[0], ["ant", "dog", "cat", "bee"]);
        assert_eq!(words[1][0], "bee");
        assert_eq!(words[1].len(), 4);
    }

    #[test]
    fn zero_attribute_row_is_degenerate() {
        let (vocab, table) = small_vocab();
        let v = array![[0.0, 0.0]];
        assert!(matches!(
            content_attribute_words(&v, &table, &vocab, 1),
            Err(Error::DegenerateAttribute(0))
        ));
    }
}
