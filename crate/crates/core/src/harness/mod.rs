//! Synthetic cohorts, run configuration and experiment drivers.

mod cohort;
mod config;
mod experiments;
mod plan;
mod synth;


pub use cohort::{split_stays, PreparedCohort, Preparer, Split};
pub use config::{
    hash_dataset, resolve_output, sha256_hex, DataConfig, RunConfig, RunManifest, SweepConfig,
    OUTPUT_ROOT_ENV, RUN_MANIFEST_FILE,
};
pub use experiments::{
    export_representations, group_metrics, label_columns, load_model, model_config,
    ratio_csv_header, run_ablation, run_ablation_variant, run_finetune, run_masking_sweep,
    run_pretrain, run_ratio_sweep, sample_sd, save_model, summarize_ratio_runs, write_masking_csv,
    write_ratio_csv, write_ratio_runs_csv, AblationTable, CohortSource, FinetuneRun, GroupMetrics,
    MaskingRow, MeanSd, PretrainRun, RatioRow, RatioRun, WindowKey, GROUPS, MASKING_CSV_HEADER,
    MODEL_FILE, RATIO_RUNS_CSV_HEADER, VOCAB_FILE,
};
pub use plan::{ExperimentPlan, GridCell};
pub use synth::{
    generate_cohort, slot_schedule, write_cohort, CatalogEntry, Cohort, Latent, PlantedRules,
    SynthSpec, ValueDist,
};
