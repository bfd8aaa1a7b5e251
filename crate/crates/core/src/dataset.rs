use ndarray::Array1;

use crate::corpus::{embed_content, ConsumptionPanel, EmbeddingTable};
use crate::error::Result;

/// A panel with every active cell's content embedding precomputed.
#[derive(Debug, Clone)]
pub struct Dataset {
    panel: ConsumptionPanel,
    contents: Vec<Vec<Array1<f64>>>,
    dim: usize,
}

impl Dataset {
    pub fn new(panel: ConsumptionPanel, table: &EmbeddingTable) -> Result<Self> {
        let contents = panel
            .users()
            .iter()
            .map(|u| u.counts.iter().map(|c| embed_content(c, table)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Self { panel, contents, dim: table.dim() })
    }

    pub fn panel(&self) -> &ConsumptionPanel {
        &self.panel
    }

    pub fn n_users(&self) -> usize {
        self.panel.n_users()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_observations(&self) -> usize {
        self.panel.n_observations()
    }

    pub fn periods(&self, user: usize) -> &[usize] {
        self.panel.active(user)
    }

    pub fn contents(&self, user: usize) -> &[Array1<f64>] {
        &self.contents[user]
    }
}
