//! Extraction, bias and consistency metrics, template diversity, paired
//! significance tests and the metrics report.

mod bleu;
mod embedding;
mod metrics;
mod report;
mod stats;

pub use bleu::{pairwise_bleu, sentence_bleu};
pub use embedding::{base_similarity, cosine, load_embeddings, Embeddings};
pub use metrics::{
    consistency_acc, consistency_all, consistency_raw, ct_hit1, hit_at_1, kl_bits,
    kld_subject_masked, macro_f1, macro_f1_labels, pearson, pearson_r_ranks, predictions_by_sample,
    KldDirection,
};
pub use report::{
    average_reports, build_report, compare_reports, comparison_markdown, EvalOptions,
    MetricsReport, Provenance, RelationMetrics, METRIC_NAMES,
};
pub use stats::{paired_t_test, wilcoxon_signed_rank, Significance, MIN_PAIRS};
