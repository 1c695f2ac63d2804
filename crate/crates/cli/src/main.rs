//! `tricon` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input (flags, config, files), 2 runtime
//! failure (non-finite loss, degenerate data, failed gradient check). Every
//! failure is reported on stderr as one JSON line.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tricon_core::harness::{self, checkpoint, Mode, Prediction, RunConfig, SweepLoss, TextFeature};
use tricon_core::metrics::{pca_2d, write_embeddings_csv};
use tricon_core::synthgen::{
    generate_dataset, read_samples, write_dataset, GeneratorConfig, ProgressionKnobs, Visit,
};
use tricon_core::Error;

/// Gradient checks fail above this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "tricon",
    version,
    about = "Longitudinal report generation with time-shared/time-specific feature constraints",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic longitudinal dataset
    GenerateData(GenerateArgs),
    /// Train one model and score it in both test-time modes
    Train(TrainArgs),
    /// Train and score the five-row constraint ablation grid
    Ablate(AblateArgs),
    /// Vary one loss weight over a grid
    Sweep(SweepArgs),
    /// Score predictions, or a checkpoint in both modes
    Evaluate(EvaluateArgs),
    /// Compare analytic loss gradients with central differences
    GradCheck(GradCheckArgs),
    /// Export 2-D PCA coordinates of image and report features
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Seed of the generator
    #[arg(long)]
    seed: u64,
    /// Number of samples across all splits
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Probability that a condition is present at both visits
    #[arg(long, default_value_t = ProgressionKnobs::default().p_stable)]
    p_stable: f64,
    /// Probability that a condition is present at the prior visit only
    #[arg(long, default_value_t = ProgressionKnobs::default().p_disappear)]
    p_disappear: f64,
    /// Probability that a condition is present at the current visit only
    #[arg(long, default_value_t = ProgressionKnobs::default().p_emerge)]
    p_emerge: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    WithHistory,
    NoHistory,
}

#[derive(Clone, Copy, ValueEnum)]
enum TextFeatureArg {
    GeneratedReport,
    DecoderHidden,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Sim,
    Con,
    Stru,
}

/// Run settings; flags override the config file, which overrides built-in
/// defaults.
#[derive(Args)]
struct RunArgs {
    /// JSON run config [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for weights and batch order
    #[arg(long)]
    seed: u64,
    /// Dataset directory from generate-data [default: generate from config]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optimization steps [default: 2000]
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per batch [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Training mode [default: with-history]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Report feature fed to the constraints [default: generated-report]
    #[arg(long, value_enum)]
    text_feature: Option<TextFeatureArg>,
    /// Shared-feature similarity loss [default: on]
    #[arg(long, value_enum)]
    sim: Option<Switch>,
    /// Triplet contrastive loss [default: on]
    #[arg(long, value_enum)]
    con: Option<Switch>,
    /// Triplet structural loss [default: on]
    #[arg(long, value_enum)]
    stru: Option<Switch>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for losses, checkpoint, predictions and scores
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Loss weight to vary
    #[arg(long, value_enum)]
    loss: LossArg,
    /// Comma-separated weights, e.g. 0,0.2,0.4
    #[arg(
        long,
        value_delimiter = ',',
        required = true,
        allow_negative_numbers = true
    )]
    grid: Vec<f64>,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction JSONL written by train
    #[arg(
        long,
        conflicts_with = "checkpoint",
        required_unless_present = "checkpoint"
    )]
    pred: Option<PathBuf>,
    /// Checkpoint to score in both modes instead of a prediction file
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Gold samples (dataset.test.jsonl)
    #[arg(long)]
    gold: PathBuf,
    /// Output JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed of the random inputs
    #[arg(long)]
    seed: u64,
    /// Number of random draws
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Also write the report as CSV here [default: stdout only]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples to embed (dataset.test.jsonl)
    #[arg(long)]
    gold: PathBuf,
    /// Test-time mode of the features
    #[arg(long, value_enum, default_value = "with-history")]
    mode: ModeArg,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_validation() => 1,
            Failure::Core(_) | Failure::Runtime(_) => 2,
        }
    }

    fn diagnostic(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Core(e) if e.is_validation() => ("validation", e.to_string()),
            Failure::Core(e) => ("runtime", e.to_string()),
            Failure::Runtime(m) => ("runtime", m.clone()),
        };
        json!({ "error": kind, "message": message, "exit_code": self.code() }).to_string()
    }
}

type Outcome = Result<(), Failure>;

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.seed = self.seed;
        if let Some(d) = &self.data {
            cfg.paths.data_dir = Some(d.clone());
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if let Some(m) = self.mode {
            cfg.mode = mode(m);
        }
        if let Some(t) = self.text_feature {
            cfg.text_feature = match t {
                TextFeatureArg::GeneratedReport => TextFeature::GeneratedReport,
                TextFeatureArg::DecoderHidden => TextFeature::DecoderHidden,
            };
        }
        if let Some(s) = self.sim {
            cfg.toggles.sim = s.on();
        }
        if let Some(s) = self.con {
            cfg.toggles.con = s.on();
        }
        if let Some(s) = self.stru {
            cfg.toggles.stru = s.on();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mode(m: ModeArg) -> Mode {
    match m {
        ModeArg::WithHistory => Mode::WithHistory,
        ModeArg::NoHistory => Mode::NoHistory,
    }
}

fn jsonl(rows: &[Prediction]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

fn generate(a: GenerateArgs) -> Outcome {
    let cfg = GeneratorConfig {
        n: a.n,
        seed: a.seed,
        knobs: ProgressionKnobs {
            p_stable: a.p_stable,
            p_disappear: a.p_disappear,
            p_emerge: a.p_emerge,
        },
        ..Default::default()
    };
    cfg.validate()?;
    let ds = generate_dataset(&cfg)?;
    let m = write_dataset(&cfg, &ds, &a.out)?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        m.counts.train,
        m.counts.val,
        m.counts.test,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = a.run.resolve()?;
    cfg.paths.out_dir = Some(a.out.clone());
    let data = harness::resolve_dataset(&cfg)?;
    let run = harness::train(&cfg, &data)?;
    fs::create_dir_all(&a.out).map_err(|e| io(&a.out, e))?;
    write(
        &a.out.join("losses.csv"),
        &harness::loss_csv(&cfg, &run.records),
    )?;
    checkpoint::save(&a.out.join("checkpoint.bin"), &cfg, &run.model, &run.state)?;
    let mut reports = Vec::new();
    for m in [Mode::WithHistory, Mode::NoHistory] {
        let preds = harness::predict(&run.model, &data.test, m, cfg.text_feature)?;
        write(
            &a.out.join(format!("pred.{}.jsonl", m.name())),
            &jsonl(&preds),
        )?;
        reports.push(harness::score(&preds, &data.test)?);
    }
    let eval = json!({
        "config_hash": cfg.hash(),
        "config": cfg,
        "with_history": reports[0],
        "no_history": reports[1],
    });
    write(
        &a.out.join("eval.json"),
        &(serde_json::to_string_pretty(&eval).unwrap() + "\n"),
    )?;
    let last = run
        .records
        .last()
        .map(|r| r.losses.l_total)
        .unwrap_or(f64::NAN);
    println!("trained {} steps, final l_total {last:.6}", cfg.steps);
    for (m, r) in [("with_history", &reports[0]), ("no_history", &reports[1])] {
        println!(
            "{m}: bleu_4 {:.4} rouge_l {:.4} ce_f1 {:.4} recall@1 {:.4}",
            r.bleu_4,
            r.rouge_l,
            r.ce_f1,
            r.retrieval_recall_at_1.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Outcome {
    let cfg = a.run.resolve()?;
    let data = harness::resolve_dataset(&cfg)?;
    let rows = harness::run_ablation(&cfg, &data)?;
    let csv = harness::ablation_csv(&cfg, &rows);
    write(&a.out, &csv)?;
    print!(
        "{}",
        csv.lines()
            .skip(2)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome {
    let cfg = a.run.resolve()?;
    let loss = match a.loss {
        LossArg::Sim => SweepLoss::Sim,
        LossArg::Con => SweepLoss::Con,
        LossArg::Stru => SweepLoss::Stru,
    };
    for &b in &a.grid {
        loss.apply(&cfg, b).validate()?;
    }
    let data = harness::resolve_dataset(&cfg)?;
    let rows = harness::run_sweep(&cfg, &data, loss, &a.grid)?;
    let csv = harness::sweep_csv(&cfg, loss, &rows);
    write(&a.out, &csv)?;
    print!(
        "{}",
        csv.lines()
            .skip(2)
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Failure::Core(Error::json(format!("{}:{}", path.display(), i + 1), e)))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let gold = read_samples(&a.gold)?;
    let out = match (&a.pred, &a.checkpoint) {
        (Some(p), _) => {
            let preds = read_predictions(p)?;
            serde_json::to_value(harness::score(&preds, &gold)?).unwrap()
        }
        (None, Some(c)) => {
            let (cfg, model, _) = checkpoint::load(c)?;
            let reports = harness::evaluate_modes(&model, &gold, &cfg)?;
            json!({
                "config_hash": cfg.hash(),
                "with_history": reports.with_history,
                "no_history": reports.no_history,
            })
        }
        (None, None) => {
            return Err(Failure::Usage(
                "one of --pred or --checkpoint is required".into(),
            ))
        }
    };
    let text = serde_json::to_string_pretty(&out).unwrap() + "\n";
    write(&a.out, &text)?;
    print!("{text}");
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Outcome {
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be >= 1".into()));
    }
    let rows = harness::grad_audit(a.trials, a.seed)?;
    let csv = harness::audit_csv(&rows);
    if let Some(p) = &a.out {
        write(p, &format!("# seed={} trials={}\n{csv}", a.seed, a.trials))?;
    }
    print!("{csv}");
    let worst = rows.iter().flat_map(|r| r.max_rel_err).fold(0.0, f64::max);
    if !(worst < GRAD_TOLERANCE) {
        return Err(Failure::Runtime(format!(
            "max relative gradient error {worst:e} exceeds {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn label_cell(s: &tricon_core::synthgen::LongitudinalSample) -> String {
    let labels = s.factors.active_at(Visit::Current);
    if labels.is_empty() {
        "none".into()
    } else {
        labels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("|")
    }
}

fn export(a: ExportArgs) -> Outcome {
    let gold = read_samples(&a.gold)?;
    let (cfg, model, _) = checkpoint::load(&a.checkpoint)?;
    let m = mode(a.mode);
    let (mut ids, mut modality, mut labels, mut rows) = (vec![], vec![], vec![], vec![]);
    for s in &gold {
        let p = harness::predict_one(&model, s, m, cfg.text_feature)?;
        let text = harness::reference_feature(&model, s, m)?;
        for (name, feat) in [("image", p.image_feature), ("report", text)] {
            ids.push(s.sample_id.to_string());
            modality.push(name.to_string());
            labels.push(label_cell(s));
            rows.push(feat);
        }
    }
    let pca = pca_2d(&rows)?;
    let comment = format!("config_hash={} mode={}", cfg.hash(), m.name());
    write_embeddings_csv(&a.out, &comment, &ids, &modality, &labels, &pca)?;
    println!(
        "wrote {} points to {} (explained variance {:.4}, {:.4})",
        rows.len(),
        a.out.display(),
        pca.variances[0],
        pca.variances[1]
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::Evaluate(a) => evaluate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::ExportEmbeddings(a) => export(a),
    }
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            let f = Failure::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", f.diagnostic());
            return f.code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            let _ = std::io::stdout().flush();
            eprintln!("{}", f.diagnostic());
            f.code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
