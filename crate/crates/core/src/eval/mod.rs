//! Evaluation protocol: held-out retrieval, attribute words, word intrusion,
//! trajectory taxonomy and the section-average baseline.

mod baseline;
mod holdout;
mod intrusion;
mod retrieval;
mod taxonomy;

pub use baseline::{baseline_weighted_sections, BaselineVectors, BASELINE_TOP_WORDS};
pub use holdout::{holdout_split, HoldoutSplit};
pub use intrusion::{
    generate_intrusion_items, score_intrusion, IntrusionItem, IntrusionResponse, IntrusionScore,
    INTRUDER_MIN_RANK, INTRUSION_MEMBERS,
};
pub use retrieval::{
    content_attribute_words, cosine_report, mean_precision_at_k, ranked_tokens, CosineReport,
    RetrievalResult,
};
pub use taxonomy::{classify_trajectory, TrajectoryClass, TrajectoryLabel, DEFAULT_TOP_M};

use ndarray::ArrayView1;

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}
