//! Experiment orchestration: configuration, ensemble training, attack
//! evaluation tables, transfer statistics and the end-to-end pipeline.

mod config;
mod pipeline;
mod report;

pub use config::{CertifySettings, DatasetSpec, ExperimentConfig, PolicySettings, SeedPlan, SplitSpec};
pub use pipeline::{
    accuracy, attack_config, attack_samples, certify_config, load_dataset, load_members, member_layers,
    member_path, policy_variants, run_pipeline, save_members, split_dataset, superimposition_items,
    train_ensemble, PipelineReport, TrainedEnsemble,
};
pub use report::{
    evaluate_outcomes, flip_counts, format_grid, grid_from_examples, network_grid, single_network_row,
    transfer_series, AttackItem, AttackOrigin, BinCounts, BinSeries, Outcome, OutcomeRow, OutcomeTable,
    PolicyVariant,
};
