//! Synthetic corpora with ground truth, and the metrics computed against it.

mod generate;
mod metrics;

pub use generate::{
    generate_corpus, generate_scene, generate_scene_with_kinds, scene_file_name, write_corpus, GeneratedScene,
    ProposalKind, SyntheticConfig,
};
pub use metrics::{
    evaluate, gap, gap_metrics, group_selections, miou_box, rv_max, rv_ratio, self_rv, t_rv, EvalReport, Gap,
    SceneRow,
};
