use std::collections::{BTreeMap, HashMap};

use ndarray::Array1;

use super::HoldoutSplit;
use crate::corpus::{ConsumptionEvent, EmbeddingTable, Vocabulary};
use crate::error::Result;

/// Most frequent tokens kept per user and section.
pub const BASELINE_TOP_WORDS: usize = 50;

#[derive(Debug, Clone)]
pub struct BaselineVectors {
    /// Positions in the holdout split of the users that received a vector.
    pub users: Vec<usize>,
    pub vectors: Vec<Array1<f64>>,
    /// Split users without any section-labelled content before their cutoff.
    pub excluded: Vec<String>,
}

/// Per user and section, the mean embedding of the user's 50 most frequent
/// tokens in that section up to the training cutoff; sections are then
/// combined by the user's share of token consumption in each.
pub fn baseline_weighted_sections(
    events: &[ConsumptionEvent],
    split: &HoldoutSplit,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<BaselineVectors> {
    let panel = split.train.panel();
    let mut counts: Vec<BTreeMap<&str, BTreeMap<usize, u32>>> = vec![BTreeMap::new(); split.n_users()];
    let position: HashMap<&str, usize> =
        panel.users().iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    for ev in events {
        let (Some(&user), Some(section)) = (position.get(ev.user_id.as_str()), ev.section.as_deref()) else {
            continue;
        };
        if ev.period > split.cutoff(user) {
            continue;
        }
        let cell = counts[user].entry(section).or_default();
        for tok in vocab.encode(&ev.text) {
            *cell.entry(tok).or_default() += 1;
        }
    }

    let mut out = BaselineVectors { users: Vec::new(), vectors: Vec::new(), excluded: Vec::new() };
    for (user, sections) in counts.iter().enumerate() {
        let total: u32 = sections.values().flat_map(|c| c.values()).sum();
        if total == 0 {
            log::warn!("user {}: no section-labelled content, excluded from baseline", panel.user(user).id);
            out.excluded.push(panel.user(user).id.clone());
            continue;
        }
        let mut vector = Array1::zeros(table.dim());
        for cell in sections.values() {
            let share = cell.values().sum::<u32>() as f64 / total as f64;
            let mut top: Vec<(usize, u32)> = cell.iter().map(|(&t, &c)| (t, c)).collect();
            top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            top.truncate(BASELINE_TOP_WORDS);
            let mut mean = Array1::zeros(table.dim());
            let mut used = 0usize;
            for (t, _) in top {
                let row = table.row(t);
                if row.iter().any(|&x| x != 0.0) {
                    mean += &row;
                    used += 1;
                }
            }
            if used > 0 {
                vector.scaled_add(share / used as f64, &mean);
            }
        }
        out.users.push(user);
        out.vectors.push(vector);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{assemble_panel, build_vocabulary};
    use crate::eval::holdout_split;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn event(period: usize, text: &str, section: &str) -> ConsumptionEvent {
        ConsumptionEvent {
            user_id: "x".into(),
            period,
            text: text.into(),
            section: Some(section.into()),
            demographics: None,
        }
    }

    #[test]
    fn sections_weighted_by_consumption_share() {
        let events = vec![
            event(0, "a a b", "one"),
            event(1, "c", "two"),
            event(2, "c", "two"),
        ];
        let vocab = build_vocabulary(&events, &Default::default(), 1).unwrap();
        let table = EmbeddingTable::new(array![[1.0, 0.0], [0.0, 1.0], [4.0, 4.0]]).unwrap();
        let panel = assemble_panel(&events, &vocab, 1).unwrap();

        // a=1 keeps periods 0 and 1: sections 3:1, section "one" mean of a and b.
        let split = holdout_split(&panel, &table, 1).unwrap();
        let b = baseline_weighted_sections(&events, &split, &vocab, &table).unwrap();
        let expect = array![0.5, 0.5] * 0.75 + array![4.0, 4.0] * 0.25;
        assert_abs_diff_eq!(b.vectors[0], expect, epsilon = 1e-12);

        // a=2 keeps only period 0: a single section is its plain mean.
        let split = holdout_split(&panel, &table, 2).unwrap();
        let b = baseline_weighted_sections(&events, &split, &vocab, &table).unwrap();
        assert_abs_diff_eq!(b.vectors[0], array![0.5, 0.5], epsilon = 1e-12);
    }

    #[test]
    fn unlabelled_users_are_excluded() {
        let mut events = vec![event(0, "a", "one"), event(1, "a", "one")];
        for e in &mut events {
            e.section = None;
        }
        let vocab = build_vocabulary(&events, &Default::default(), 1).unwrap();
        let table = EmbeddingTable::new(array![[1.0]]).unwrap();
        let panel = assemble_panel(&events, &vocab, 1).unwrap();
        let split = holdout_split(&panel, &table, 1).unwrap();
        let b = baseline_weighted_sections(&events, &split, &vocab, &table).unwrap();
        assert!(b.vectors.is_empty());
        assert_eq!(b.excluded, ["x"]);
    }
}
