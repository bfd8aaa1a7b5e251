use serde::{Deserialize, Serialize};

use crate::model::UserTrajectory;

pub const DEFAULT_TOP_M: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryLabel {
    /// The ranking of the top interests never changes.
    Stable,
    /// The ranking changes and settles on its final order.
    EvolvingPersistent,
    /// The ranking changes and keeps moving between orders.
    EvolvingVacillating,
}

impl TrajectoryLabel {
    pub const ALL: [TrajectoryLabel; 3] =
        [Self::Stable, Self::EvolvingPersistent, Self::EvolvingVacillating];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stable => "stable",
            Self::EvolvingPersistent => "evolving-persistent",
            Self::EvolvingVacillating => "evolving-vacillating",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryClass {
    pub label: TrajectoryLabel,
    /// The `top_m` attributes by mean weight, heaviest first.
    pub top_interests: Vec<usize>,
}

/// Orders `attrs` by weight, heaviest first, ties to the lower index.
fn ranking(weights: &[f64], attrs: &[usize]) -> Vec<usize> {
    let mut r = attrs.to_vec();
    r.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    r
}

/// Labels a path of user factors by how the ranking of its `top_m` heaviest
/// attributes (by mean weight) moves over time.
pub fn classify_trajectory(u: &[Vec<f64>], top_m: usize) -> TrajectoryClass {
    let k = u.first().map_or(0, Vec::len);
    let mean: Vec<f64> =
        (0..k).map(|j| u.iter().map(|row| row[j]).sum::<f64>() / u.len() as f64).collect();
    let all: Vec<usize> = (0..k).collect();
    let mut top = ranking(&mean, &all);
    top.truncate(top_m.max(1));

    let ranks: Vec<Vec<usize>> = u.iter().map(|row| ranking(row, &top)).collect();
    let label = match ranks.last() {
        None => TrajectoryLabel::Stable,
        Some(last) if ranks.iter().all(|r| r == last) => TrajectoryLabel::Stable,
        Some(last) => {
            let first = ranks.iter().position(|r| r == last).expect("last ranking occurs");
            if ranks[first..].iter().all(|r| r == last) {
                TrajectoryLabel::EvolvingPersistent
            } else {
                TrajectoryLabel::EvolvingVacillating
            }
        }
    };
    TrajectoryClass { label, top_interests: top }
}

impl UserTrajectory {
    pub fn classify(&self, top_m: usize) -> TrajectoryClass {
        classify_trajectory(&self.u, top_m)
    }
}
