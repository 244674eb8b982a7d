//! `sepkit`: simulate scenes, train and evaluate separation models, score
//! ideal masks and inspect separator geometry from the command line.
//!
//! Every command exits 0 on success, 1 on a user error (bad arguments,
//! configs or data) and 2 on an internal failure. Failures also print one
//! JSON line `{"error": kind, "message": text}` to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sepkit::audio::{read_wav, write_wav};
use sepkit::objectives::{Criterion, MaskKind};
use sepkit::pipeline::{
    estimate_path, evaluate_estimates, evaluate_model, gradcheck_model, load_dataset, oracle_estimates,
    oracle_report, summarize, train, write_rows_csv, write_summary_csv, ExperimentConfig, Model, PipelineKind,
    SceneData, TrainOptions, ORACLE_HOP, ORACLE_WINDOW,
};
use sepkit::separator::{lookahead_frames, receptive_field, Causality, Checkpoint};
use sepkit::simulate::{write_dataset, DatasetIndex, SimulationRules};
use sepkit::Error;

#[derive(Parser, Debug)]
#[command(name = "sepkit", version, about = "Multi-channel speech separation experiments")]
struct Cli {
    /// Worker threads for parallel simulation and evaluation (default: all cores).
    #[arg(long, global = true, env = "SEPKIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate reverberant multi-channel mixtures and write a dataset.
    Simulate(SimulateArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Separate mixtures with a trained checkpoint.
    Separate(SeparateArgs),
    /// Score a checkpoint or previously written estimates on a dataset.
    Evaluate(EvaluateArgs),
    /// Score ideal (oracle) masks on a dataset.
    Oracle(OracleArgs),
    /// Print receptive field and lookahead for every causality mode.
    Rf(RfArgs),
    /// Finite-difference check of end-to-end gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation rules (JSON).
    #[arg(long)]
    rules: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    /// Dataset seed; scene `i` depends only on `(seed, i)`.
    #[arg(long)]
    seed: u64,
    /// Output directory for scene folders and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config (JSON); must name train and validation manifests.
    #[arg(long)]
    config: PathBuf,
    /// Directory for `last.ckpt` and `best.ckpt`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `last.ckpt` in the output directory if present.
    #[arg(long)]
    resume: bool,
    /// Override the config's epoch budget.
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config to rebuild the model from; must describe the checkpoint's model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset index to separate every scene of.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    manifest: Option<PathBuf>,
    /// A single (multi-channel) mixture WAV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory: `<scene>/est<k>.wav` per scene, or `est<k>.wav` for `--input`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset index with references.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to separate with.
    #[arg(long, conflicts_with = "estimates", required_unless_present = "estimates")]
    checkpoint: Option<PathBuf>,
    /// Experiment config for `--checkpoint`; must describe the checkpoint's model.
    #[arg(long, requires = "checkpoint")]
    config: Option<PathBuf>,
    /// Directory of `<scene>/est<k>.wav` estimates to score instead.
    #[arg(long)]
    estimates: Option<PathBuf>,
    /// Per-utterance CSV (scene, bucket, sisnr, sdr, permutation).
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Bucket summary CSV; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Dataset index with references.
    #[arg(long)]
    manifest: PathBuf,
    /// `iam`, `ibm`, `irm`, `ipsm`, a comma-separated list, or `all`.
    #[arg(long, default_value = "all")]
    mask: String,
    /// STFT window length in samples.
    #[arg(long, default_value_t = ORACLE_WINDOW)]
    window: usize,
    /// STFT hop in samples.
    #[arg(long, default_value_t = ORACLE_HOP)]
    hop: usize,
    /// Also write estimates to `<out>/<mask>/<scene>/est<k>.wav`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary CSV, one row per mask and metric; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RfArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check this config instead of the built-in tiny suite (3 pipelines × 2 losses).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

/// A failure with its exit code and machine-readable category.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_user_error() { 1 } else { 2 },
            kind: e.kind().to_owned(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn user(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: kind.to_owned(),
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report(Failure::user("usage", e.kind().to_string()));
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(Failure::user("usage", format!("cannot size thread pool: {e}")));
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Oracle(a) => oracle(a),
        Command::Rf(a) => rf(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("{}", json!({"error": f.kind, "message": f.message}));
    ExitCode::from(f.code)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::user("io", format!("{}: {e}", path.display()))
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let rules = SimulationRules::read(&a.rules)?;
    let index = write_dataset(&a.out, &rules, a.seed, a.count)?;
    println!("rules {}", rules.name);
    println!("scenes {}", index.count);
    for (label, n) in ["0-15", "15-45", "45-90", "90-180"].iter().zip(index.bucket_counts) {
        println!("bucket {label} {n}");
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut config = ExperimentConfig::read(&a.config)?;
    if let Some(n) = a.max_epochs {
        config.max_epochs = n;
    }
    let (train_path, valid_path) = match (&config.train_manifest, &config.validation_manifest) {
        (Some(t), Some(v)) => (t.clone(), v.clone()),
        _ => {
            return Err(Failure::user(
                "config",
                "training needs both `train_manifest` and `validation_manifest`",
            ))
        }
    };
    let (train_index, valid_index) = (DatasetIndex::read(&train_path)?, DatasetIndex::read(&valid_path)?);
    if train_index.seed == valid_index.seed && train_index.rules == valid_index.rules {
        return Err(Failure::user(
            "config",
            format!("validation set shares seed {} with the training set", train_index.seed),
        ));
    }
    let train_scenes = load_dataset(&train_path)?;
    let valid_scenes = load_dataset(&valid_path)?;
    let options = TrainOptions {
        checkpoint_dir: Some(a.out.clone()),
        resume: a.resume,
    };
    let result = train(config, &train_scenes, &valid_scenes, &options, |r| {
        println!(
            "{}",
            json!({
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "valid_loss": r.valid_loss,
                "lr": r.lr,
                "steps": r.steps,
                "skipped": r.skipped,
            })
        );
    })?;
    if let Some(best) = result.best_valid {
        println!("{}", json!({"best_valid": best, "checkpoint": a.out.join("best.ckpt")}));
    }
    Ok(())
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<Model, Failure> {
    let config = config.map(ExperimentConfig::read).transpose()?;
    Ok(Model::from_checkpoint(&Checkpoint::read(checkpoint)?, config)?)
}

fn separate(a: SeparateArgs) -> CmdResult {
    let model = load_model(&a.checkpoint, a.config.as_deref())?;
    let sample_rate = model.config().codec.sample_rate;
    if let Some(input) = &a.input {
        let (mixture, rate) = read_wav(input)?;
        if rate != sample_rate {
            return Err(Failure::user(
                "input",
                format!("{} is {rate} Hz, model expects {sample_rate} Hz", input.display()),
            ));
        }
        for (k, est) in model.separate(&mixture)?.iter().enumerate() {
            write_wav(&a.out.join(format!("est{}.wav", k + 1)), std::slice::from_ref(est), rate)?;
        }
        return Ok(());
    }
    let manifest = a.manifest.as_deref().expect("clap requires --manifest or --input");
    let scenes = load_dataset(manifest)?;
    use rayon::prelude::*;
    scenes.par_iter().try_for_each(|s| -> CmdResult {
        for (k, est) in model.separate(&s.mixture)?.iter().enumerate() {
            write_wav(&estimate_path(&a.out, &s.id, k + 1), std::slice::from_ref(est), s.sample_rate)?;
        }
        Ok(())
    })?;
    println!("separated {} scenes into {}", scenes.len(), a.out.display());
    Ok(())
}

fn emit_summary(path: Option<&Path>, systems: &[(String, sepkit::pipeline::BucketSummary)]) -> CmdResult {
    match path {
        Some(p) => {
            let file = std::fs::File::create(p).map_err(|e| io_failure(p, e))?;
            write_summary_csv(file, systems)?;
        }
        None => {
            let stdout = std::io::stdout();
            write_summary_csv(stdout.lock(), systems)?;
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let scenes = load_dataset(&a.manifest)?;
    let (name, rows) = match (&a.checkpoint, &a.estimates) {
        (Some(ckpt), _) => ("model".to_owned(), evaluate_model(&load_model(ckpt, a.config.as_deref())?, &scenes)?),
        (None, Some(dir)) => ("estimates".to_owned(), evaluate_estimates(dir, &scenes)?),
        (None, None) => unreachable!("clap requires --checkpoint or --estimates"),
    };
    if let Some(p) = &a.rows {
        write_rows_csv(p, &rows)?;
    }
    emit_summary(a.report.as_deref(), &[(name, summarize(&rows))])
}

fn parse_masks(spec: &str) -> Result<Vec<MaskKind>, Failure> {
    if spec == "all" {
        return Ok(MaskKind::ALL.to_vec());
    }
    spec.split(',').map(|m| Ok(m.trim().parse::<MaskKind>()?)).collect()
}

fn oracle(a: OracleArgs) -> CmdResult {
    let kinds = parse_masks(&a.mask)?;
    let scenes = load_dataset(&a.manifest)?;
    if let Some(out) = &a.out {
        write_oracle_estimates(out, &scenes, &kinds, a.window, a.hop)?;
    }
    let report = oracle_report(&scenes, &kinds, a.window, a.hop)?;
    let systems: Vec<_> = report
        .iter()
        .map(|r| (r.mask.name().to_owned(), summarize(&r.rows)))
        .collect();
    emit_summary(a.report.as_deref(), &systems)
}

fn write_oracle_estimates(out: &Path, scenes: &[SceneData], kinds: &[MaskKind], window: usize, hop: usize) -> CmdResult {
    use rayon::prelude::*;
    let stft = sepkit::codec::Stft::new(window, hop)?;
    for &kind in kinds {
        let dir = out.join(kind.name());
        scenes.par_iter().try_for_each(|s| -> CmdResult {
            for (k, est) in oracle_estimates(kind, s, &stft)?.iter().enumerate() {
                write_wav(&estimate_path(&dir, &s.id, k + 1), std::slice::from_ref(est), s.sample_rate)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn rf(a: RfArgs) -> CmdResult {
    let config = ExperimentConfig::read(&a.config)?;
    let (hop, rate) = (config.codec.hop, config.codec.sample_rate);
    let rows: Vec<_> = Causality::ALL
        .iter()
        .map(|&causality| {
            let mut tcn = config.tcn_config();
            tcn.causality = causality;
            let field = receptive_field(&tcn, hop, rate);
            let ahead = lookahead_frames(&tcn);
            (causality, field, ahead, ahead as f64 * hop as f64 / rate as f64)
        })
        .collect();
    let mut out = std::io::stdout().lock();
    if a.json {
        let v: Vec<_> = rows
            .iter()
            .map(|(c, f, ahead, ahead_s)| {
                json!({
                    "mode": c.name(),
                    "rf_s": f.table_seconds,
                    "rf_frames": f.table_frames,
                    "rf_exact_frames": f.frames,
                    "rf_exact_s": f.seconds,
                    "lookahead_frames": ahead,
                    "lookahead_s": ahead_s,
                })
            })
            .collect();
        writeln!(out, "{}", serde_json::Value::Array(v)).map_err(|e| io_failure(Path::new("<stdout>"), e))?;
        return Ok(());
    }
    let mut text = format!(
        "{:<12} {:>10} {:>10} {:>14} {:>12} {:>16} {:>12}\n",
        "mode", "rf_s", "rf_frames", "rf_exact_frames", "rf_exact_s", "lookahead_frames", "lookahead_s"
    );
    for (c, f, ahead, ahead_s) in &rows {
        text.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>14} {:>12.4} {:>16} {:>12.4}\n",
            c.name(),
            f.table_seconds,
            f.table_frames,
            f.frames,
            f.seconds,
            ahead,
            ahead_s
        ));
    }
    out.write_all(text.as_bytes()).map_err(|e| io_failure(Path::new("<stdout>"), e))
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let configs: Vec<(String, ExperimentConfig)> = match &a.config {
        Some(p) => vec![(p.display().to_string(), ExperimentConfig::read(p)?)],
        None => PipelineKind::ALL
            .iter()
            .flat_map(|&kind| {
                [Criterion::UpitMse, Criterion::UpitSisnr].map(|loss| {
                    let label = format!("{}/{}", kind.name(), serde_json::to_value(loss).unwrap().as_str().unwrap());
                    (label, ExperimentConfig::tiny(kind, loss))
                })
            })
            .collect(),
    };
    let mut worst: f64 = 0.0;
    for (label, config) in configs {
        for r in gradcheck_model(&config, a.step)? {
            println!("{label} {:<32} {:>6} {:.3e}", r.name, r.scalars, r.max_rel_err);
            worst = worst.max(r.max_rel_err);
        }
    }
    println!("max_rel_err {worst:.3e}");
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            kind: "gradcheck".into(),
            message: format!("max relative error {worst:.3e} exceeds {:.1e}", a.tolerance),
        })
    }
}
