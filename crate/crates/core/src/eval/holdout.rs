use ndarray::Array1;

use crate::corpus::{embed_content, ConsumptionPanel, EmbeddingTable, UserHistory};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Users truncated for forecasting: each kept user's final `a` active
/// periods are removed from training and the content of the very last one
/// becomes the retrieval target.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub a: usize,
    pub train: Dataset,
    /// Index of every kept user in the source panel.
    pub source_index: Vec<usize>,
    pub targets: Vec<Array1<f64>>,
    pub target_periods: Vec<usize>,
    /// Ids of users with fewer than `a + 1` active periods.
    pub excluded: Vec<String>,
}

impl HoldoutSplit {
    pub fn n_users(&self) -> usize {
        self.source_index.len()
    }

    /// Last period each kept user trains on.
    pub fn cutoff(&self, user: usize) -> usize {
        *self.train.periods(user).last().expect("kept users keep at least one period")
    }
}

pub fn holdout_split(panel: &ConsumptionPanel, table: &EmbeddingTable, a: usize) -> Result<HoldoutSplit> {
    if a == 0 {
        return Err(Error::InvalidArgument("holdout horizon a must be at least 1".into()));
    }
    let mut histories = Vec::new();
    let mut source_index = Vec::new();
    let mut targets = Vec::new();
    let mut target_periods = Vec::new();
    let mut excluded = Vec::new();
    for (i, u) in panel.users().iter().enumerate() {
        let n = u.n_active();
        if n < a + 1 {
            excluded.push(u.id.clone());
            continue;
        }
        targets.push(embed_content(&u.counts[n - 1], table)?);
        target_periods.push(u.periods[n - 1]);
        histories.push(UserHistory {
            id: u.id.clone(),
            periods: u.periods[..n - a].to_vec(),
            counts: u.counts[..n - a].to_vec(),
            demographics: u.demographics.clone(),
        });
        source_index.push(i);
    }
    if !excluded.is_empty() {
        log::warn!("holdout a={a}: {} users with too little history excluded", excluded.len());
    }
    let train = Dataset::new(
        ConsumptionPanel::new(histories, panel.n_periods(), panel.vocab_size())?,
        table,
    )?;
    Ok(HoldoutSplit { a, train, source_index, targets, target_periods, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeMap;

    fn panel(periods: &[&[usize]]) -> ConsumptionPanel {
        let users = periods
            .iter()
            .enumerate()
            .map(|(i, ps)| UserHistory {
                id: format!("u{i}"),
                periods: ps.to_vec(),
                counts: ps.iter().map(|&p| BTreeMap::from([(p % 2, 1)])).collect(),
                demographics: Default::default(),
            })
            .collect();
        ConsumptionPanel::new(users, 6, 2).unwrap()
    }

    #[test]
    fn drops_final_periods_and_targets_the_last() {
        let table = EmbeddingTable::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = panel(&[&[1, 2, 3], &[0, 4]]);
        let s = holdout_split(&p, &table, 1).unwrap();
        assert_eq!(s.train.periods(0), [1, 2]);
        assert_eq!(s.target_periods, [3, 4]);
        assert_eq!(s.targets[0], array![0.0, 1.0]);
        assert_eq!(s.cutoff(1), 0);

        let s = holdout_split(&p, &table, 2).unwrap();
        assert_eq!(s.excluded, ["u1"]);
        assert_eq!(s.source_index, [0]);
        assert_eq!(s.train.periods(0), [1]);
        assert_eq!(s.target_periods, [3]);
    }
}
