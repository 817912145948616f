//! Staged training: restoration, generator pretraining, synthesis and
//! fusion, with checkpoints, inference and the ablation runner.

mod batches;
mod checkpoint;
mod config;
mod pipeline;
mod stages;

pub use batches::{gather, PairedImages, Sampler};
pub use checkpoint::{
    checkpoint_name, section, Checkpoint, CheckpointMeta, RngState, META_FILE, OPTIMIZER_FILE,
    WEIGHTS_FILE,
};
pub use config::{
    DataConfig, LossConfig, OptimConfig, Prerequisites, Preset, RestorationConfig, Stage,
    TrainConfig, CONFIG_SCHEMA,
};
pub use pipeline::{
    evaluate_pipeline, prepare_toy_corpus, run_ablation, run_all, AblationRow, AblationTable,
    Inference, Pipeline, PipelineEval, RunOutcome, ToyCorpus, ToyCorpusConfig,
};
pub use stages::{
    build_restoration, critic_from, fusion_from, head_tail_means, restoration_from, synthesis_from,
    tracked_loss, train_fusion, train_restoration, train_stage, train_synthesis,
    train_synthesis_pretrain, FusionHead, StageReport, StepLog, Update, Upstream,
};
