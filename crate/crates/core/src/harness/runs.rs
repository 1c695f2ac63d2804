use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Toggles};
use super::eval::{predict, score};
use super::step::{train_step, validation_rrg, StepRecord, TrainState};
use crate::constraints::LossBreakdown;
use crate::metrics::EvalReport;
use crate::nn::Model;
use crate::synthgen::{generate_dataset, load_dataset, Dataset, LongitudinalSample};
use crate::{Error, Result};

/// Dataset named by the config: loaded from `paths.data_dir` when set,
/// generated from `data` otherwise.
pub fn resolve_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.data_dir {
        Some(dir) => {
            let (manifest, ds) = load_dataset(dir)?;
            let geo = manifest.generator.geometry;
            if geo.num_patches() != cfg.model.num_patches || geo.patch_dim() != cfg.model.patch_dim
            {
                return Err(Error::Config(format!(
                    "dataset images have {} patches of {} values, model expects {} of {}",
                    geo.num_patches(),
                    geo.patch_dim(),
                    cfg.model.num_patches,
                    cfg.model.patch_dim
                )));
            }
            Ok(ds)
        }
        None => generate_dataset(&cfg.data),
    }
}

/// Fresh weights and optimizer state for `cfg`.
pub fn init_run(cfg: &RunConfig) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    let model = Model::new(cfg.model, cfg.seed)?;
    let state = TrainState::new(&model, cfg.seed);
    Ok((model, state))
}

/// Advances a run by `steps` optimization steps.
pub fn train_steps(
    model: &mut Model,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &RunConfig,
    steps: usize,
    records: &mut Vec<StepRecord>,
) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for _ in 0..steps {
        let idx = state.next_batch(data.train.len(), cfg.batch_size);
        let batch: Vec<&LongitudinalSample> = idx.iter().map(|&i| &data.train[i]).collect();
        let rec = train_step(model, state, &batch, cfg)?;
        records.push(rec);
        if cfg.eval_every > 0 && state.step % cfg.eval_every as u64 == 0 && !data.val.is_empty() {
            let v = validation_rrg(model, &data.val, cfg)?;
            if state.best_val.is_none_or(|b| v < b) {
                state.best_val = Some(v);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub state: TrainState,
    pub records: Vec<StepRecord>,
}

/// Trains for `cfg.steps` steps from fresh weights.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    let (mut model, mut state) = init_run(cfg)?;
    let mut records = Vec::with_capacity(cfg.steps);
    train_steps(&mut model, &mut state, data, cfg, cfg.steps, &mut records)?;
    Ok(RunOutput {
        model,
        state,
        records,
    })
}

/// Loss CSV: config comment lines, header, one row per step.
pub fn loss_csv(cfg: &RunConfig, records: &[StepRecord]) -> String {
    let mut out = cfg.csv_preamble();
    out.push_str("step,");
    out.push_str(&LossBreakdown::FIELDS.join(","));
    out.push_str(",skipped_degenerate_count\n");
    for r in records {
        let _ = write!(out, "{}", r.step);
        for v in r.losses.values() {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.skipped_degenerate);
    }
    out
}

/// Test-split metrics in the configured decoding mode.
pub fn score_test(model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let preds = predict(model, &data.test, cfg.mode, cfg.text_feature)?;
    score(&preds, &data.test)
}

/// Constraint toggle rows, in table order.
pub const ABLATION_GRID: [Toggles; 5] = [
    Toggles {
        sim: false,
        con: false,
        stru: false,
    },
    Toggles {
        sim: false,
        con: true,
        stru: true,
    },
    Toggles {
        sim: true,
        con: false,
        stru: true,
    },
    Toggles {
        sim: true,
        con: true,
        stru: false,
    },
    Toggles {
        sim: true,
        con: true,
        stru: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub report: EvalReport,
}

/// Trains and scores one row per toggle combination, same seed throughout.
pub fn run_ablation(base: &RunConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    ABLATION_GRID
        .iter()
        .map(|&toggles| {
            let cfg = RunConfig {
                toggles,
                ..base.clone()
            };
            let out = train(&cfg, data)?;
            Ok(AblationRow {
                toggles,
                report: score_test(&out.model, data, &cfg)?,
            })
        })
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "on"
    } else {
        "off"
    }
}

fn metric_cells(out: &mut String, r: &EvalReport) {
    for v in r.values() {
        let _ = write!(out, ",{v}");
    }
    let _ = writeln!(out, ",{}", r.n_samples);
}

fn metric_header() -> String {
    format!("{},n_samples", EvalReport::COLUMNS.join(","))
}

pub fn ablation_csv(base: &RunConfig, rows: &[AblationRow]) -> String {
    let mut out = base.csv_preamble();
    let _ = writeln!(out, "sim,con,stru,{}", metric_header());
    for row in rows {
        let t = row.toggles;
        let _ = write!(out, "{},{},{}", mark(t.sim), mark(t.con), mark(t.stru));
        metric_cells(&mut out, &row.report);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepLoss {
    Sim,
    Con,
    Stru,
}

impl SweepLoss {
    pub fn name(self) -> &'static str {
        match self {
            SweepLoss::Sim => "sim",
            SweepLoss::Con => "con",
            SweepLoss::Stru => "stru",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sim" => Some(SweepLoss::Sim),
            "con" => Some(SweepLoss::Con),
            "stru" => Some(SweepLoss::Stru),
            _ => None,
        }
    }

    /// Config with this loss weighted by `beta`, other weights untouched.
    pub fn apply(self, base: &RunConfig, beta: f64) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            SweepLoss::Sim => cfg.constraints.beta_sim = beta,
            SweepLoss::Con => cfg.constraints.beta_con = beta,
            SweepLoss::Stru => cfg.constraints.beta_stru = beta,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub report: EvalReport,
}

/// One training run per coefficient. A zero coefficient keeps the term in
/// the graph with zero weight.
pub fn run_sweep(
    base: &RunConfig,
    data: &Dataset,
    loss: SweepLoss,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&beta| {
            let cfg = loss.apply(base, beta);
            cfg.validate()?;
            let out = train(&cfg, data)?;
            Ok(SweepRow {
                beta,
                report: score_test(&out.model, data, &cfg)?,
            })
        })
        .collect()
}

pub fn sweep_csv(base: &RunConfig, loss: SweepLoss, rows: &[SweepRow]) -> String {
    let mut out = base.csv_preamble();
    let _ = writeln!(out, "loss,beta,{}", metric_header());
    for row in rows {
        let _ = write!(out, "{},{}", loss.name(), row.beta);
        metric_cells(&mut out, &row.report);
    }
    out
}
