//! Training loop, checkpoints, evaluation modes, ablation and sweep runs.
//!
//! A step encodes both visits' images and reports, decomposes features,
//! decodes the current report with teacher forcing and sums the enabled
//! losses. Each sample gets its own graph; gradients are averaged over the
//! batch in sample order and applied with Adam (or plain SGD).
//!
//! All randomness is seeded from [`RunConfig::seed`]: stream 0 of the
//! ChaCha generator initializes weights, stream 1 draws batches. Its
//! position is part of the checkpoint, so a resumed run continues with the
//! same batches.

mod audit;
pub mod checkpoint;
mod config;
mod eval;
mod optim;
mod runs;
mod step;

pub use audit::{audit_csv, grad_audit, AuditRow, AUDIT_LOSSES};
pub use config::{Mode, OptimizerConfig, OptimizerKind, Paths, RunConfig, TextFeature, Toggles};
pub use eval::{
    evaluate_modes, image_features, predict, predict_one, probe, reference_feature, score,
    ImageFeatures, LinearProbe, ModeReports, Prediction, ProbeReport, PROBE_RIDGE, PROBE_THRESHOLD,
};
pub use optim::{apply_update, Moments};
pub use runs::{
    ablation_csv, init_run, loss_csv, resolve_dataset, run_ablation, run_sweep, score_test,
    sweep_csv, train, train_steps, AblationRow, RunOutput, SweepLoss, SweepRow, ABLATION_GRID,
};
pub use step::{
    accumulate_batch_grads, sample_loss, train_step, validation_rrg, SampleLoss, StepRecord,
    TrainState,
};
