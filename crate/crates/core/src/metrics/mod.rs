//! GAP@k and per-class accuracy analysis.

mod gap;
mod oracle;

pub use gap::{average_precision_sorted, gap_at_k, gap_at_k_scores, pooled_top_k, PooledEntry};
pub use oracle::{
    class_accuracy, class_accuracy_report, oracle_matrix, top_frequency_classes, ClassAccuracyReport,
    OracleMatrix, DEFAULT_REPORT_CLASSES, DEFAULT_THRESHOLD,
};
pub(crate) use oracle::{ensure_same_dims, fmt_f64};

pub const DEFAULT_GAP_K: usize = 20;
