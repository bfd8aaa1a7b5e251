use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine, ranked_tokens};
use crate::corpus::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};

pub const INTRUSION_MEMBERS: usize = 5;
/// Intruders come from tokens ranked at or beyond this 0-based position for
/// their own attribute.
pub const INTRUDER_MIN_RANK: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrusionItem {
    pub attribute_index: usize,
    pub members: Vec<String>,
    pub intruder: String,
    /// Members and intruder in presentation order.
    pub shuffled: Vec<String>,
}

/// One word-intrusion item per row of `v`. Members are the row's five
/// nearest tokens. The intruder is, among tokens ranked at position 50 or
/// later for this row, less similar to it than every member and more
/// similar to some other row, the one with the highest similarity to any
/// other row.
pub fn generate_intrusion_items(
    v: &Array2<f64>,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<IntrusionItem>> {
    if table.len() != vocab.len() || v.ncols() != table.dim() {
        return Err(Error::DimensionMismatch { expected: table.dim(), found: v.ncols() });
    }
    let mut items = Vec::with_capacity(v.nrows());
    for k in 0..v.nrows() {
        let row = v.row(k);
        if row.dot(&row) == 0.0 {
            return Err(Error::DegenerateAttribute(k));
        }
        let ranked = ranked_tokens(row, table, vocab);
        if ranked.len() < INTRUSION_MEMBERS {
            return Err(Error::NoIntruder(k));
        }
        let members = &ranked[..INTRUSION_MEMBERS];
        let floor = members.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let mut best: Option<(usize, f64)> = None;
        for &(tok, own) in ranked.iter().skip(INTRUDER_MIN_RANK) {
            if own >= floor {
                continue;
            }
            for other in (0..v.nrows()).filter(|&o| o != k) {
                let sim = cosine(table.row(tok), v.row(other));
                if sim > own && best.is_none_or(|(_, b)| sim > b) {
                    best = Some((tok, sim));
                }
            }
        }
        let (intruder, _) = best.ok_or(Error::NoIntruder(k))?;
        let members: Vec<String> = members.iter().map(|&(t, _)| vocab.token(t).to_string()).collect();
        let intruder = vocab.token(intruder).to_string();
        let mut shuffled = members.clone();
        shuffled.push(intruder.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        shuffled.shuffle(&mut rng);
        items.push(IntrusionItem { attribute_index: k, members, intruder, shuffled });
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrusionResponse {
    pub subject_id: String,
    pub attribute_index: usize,
    pub chosen_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrusionScore {
    pub attribute_index: usize,
    pub responses: usize,
    pub correct: usize,
    /// `correct / responses`; absent without responses.
    pub precision: Option<f64>,
}

/// Per item, the fraction of subjects who picked the true intruder.
pub fn score_intrusion(items: &[IntrusionItem], responses: &[IntrusionResponse]) -> Result<Vec<IntrusionScore>> {
    let mut scores: Vec<IntrusionScore> = items
        .iter()
        .map(|it| IntrusionScore { attribute_index: it.attribute_index, responses: 0, correct: 0, precision: None })
        .collect();
    for resp in responses {
        let pos = items
            .iter()
            .position(|it| it.attribute_index == resp.attribute_index)
            .ok_or_else(|| Error::InvalidResponse {
                attribute: resp.attribute_index,
                token: resp.chosen_token.clone(),
            })?;
        let item = &items[pos];
        if !item.shuffled.contains(&resp.chosen_token) {
            return Err(Error::InvalidResponse {
                attribute: resp.attribute_index,
                token: resp.chosen_token.clone(),
            });
        }
        scores[pos].responses += 1;
        if resp.chosen_token == item.intruder {
            scores[pos].correct += 1;
        }
    }
    for s in &mut scores {
        if s.responses > 0 {
            s.precision = Some(s.correct as f64 / s.responses as f64);
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn item() -> IntrusionItem {
        let members: Vec<String> = ["celtics", "bruins", "canadiens", "rangers", "giants"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut shuffled = members.clone();
        shuffled.insert(2, "apple".into());
        IntrusionItem { attribute_index: 0, members, intruder: "apple".into(), shuffled }
    }

    fn answers(tokens: &[&str]) -> Vec<IntrusionResponse> {
        tokens
            .iter()
            .enumerate()
            .map(|(s, t)| IntrusionResponse {
                subject_id: format!("s{s}"),
                attribute_index: 0,
                chosen_token: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn scoring_cases() {
        let items = [item()];
        let all = score_intrusion(&items, &answers(&["apple"; 4])).unwrap();
        assert_eq!(all[0].precision, Some(1.0));
        let none = score_intrusion(&items, &answers(&["bruins", "giants"])).unwrap();
        assert_eq!(none[0].precision, Some(0.0));
        let some =
            score_intrusion(&items, &answers(&["apple", "bruins", "apple", "giants", "apple"])).unwrap();
        assert_eq!(some[0].precision, Some(0.6));
        assert_eq!(score_intrusion(&items, &[]).unwrap()[0].precision, None);
    }

    #[test]
    fn foreign_token_is_rejected() {
        assert!(matches!(
            score_intrusion(&[item()], &answers(&["pear"])),
            Err(Error::InvalidResponse { attribute: 0, .. })
        ));
    }

    #[test]
    fn tiny_vocabulary_has_no_intruder() {
        let vocab = Vocabulary::from_tokens(
            (0..6).map(|i| format!("w{i}")).collect(),
            Default::default(),
        )
        .unwrap();
        let table = EmbeddingTable::new(Array2::from_shape_fn((6, 2), |(i, j)| (i + j) as f64 + 1.0)).unwrap();
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            generate_intrusion_items(&v, &table, &vocab, 1),
            Err(Error::NoIntruder(0))
        ));
    }
}
