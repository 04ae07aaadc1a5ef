//! Batch front end: synthetic data, prior export, training, evaluation and prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use milqt::data::{gen_synthetic, ChannelLayout, DatasetBundle, FeatureRef, SynthRule, SynthShape};
use milqt::diffcore::text::fmt_real;
use milqt::hypotheses::{FusionOp, HypothesisKind, HypothesisSpec};
use milqt::interaction::{correlation_readout, InteractionMode};
use milqt::losses::LossWeights;
use milqt::prior::{compute_prior, export_prior};
use milqt::trainer::{
    evaluate, load_checkpoint, predict, save_checkpoint, train_with, InferenceOptions, Model,
    TrainConfig, TypeSource,
};
use milqt::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const TOP_K: usize = 5;

#[derive(Debug, Parser)]
#[command(
    name = "milqt",
    version,
    about = "Question-type guided multi-hypothesis VQA experiments"
)]
struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with training, synthetic-data and evaluation settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-question work.
    #[arg(long, env = "MILQT_THREADS", default_value_t = 1, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (records, features and sidecars).
    GenSynth(SynthArgs),
    /// Compute the question-type/answer prior of a dataset and write it as CSV.
    ComputePrior { dataset: PathBuf },
    /// Train a model and write its checkpoint, log, mixing weights and run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write per-question predictions.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
enum Layout {
    #[default]
    Shared,
    Split,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    qtypes: Option<usize>,
    #[arg(long)]
    answers: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    visual_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Let each type's answer block include the first answer of the next type.
    #[arg(long)]
    overlap: bool,
    #[arg(long, value_enum)]
    layout: Option<Layout>,
    /// Plant a decoy indicator in the half of the channels the type does not own.
    #[arg(long)]
    decoy: bool,
    /// Record file name inside the output directory.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    dataset: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Loss weights as `hypotheses,vqa,qtype`.
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<LossWeights>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionOp>,
    /// Comma-separated hypothesis kinds (top_down, bilinear_low_rank, stacked2).
    #[arg(long, value_delimiter = ',')]
    hypotheses: Option<Vec<HypothesisKind>>,
    #[arg(long)]
    interaction: Option<InteractionMode>,
    #[arg(long, value_parser = parse_type_source)]
    type_source: Option<TypeSource>,
    #[arg(long)]
    no_prior: bool,
    #[arg(long)]
    no_type_fusion: bool,
    #[arg(long)]
    mil_softmax: bool,
    #[arg(long)]
    stop_gradient_h: bool,
    #[arg(long)]
    no_inference_weighting: bool,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Rank answers by the combined prediction alone.
    #[arg(long)]
    no_inference_weighting: bool,
    #[arg(long, value_parser = parse_type_source)]
    type_source: Option<TypeSource>,
    /// Print the per-category table.
    #[arg(long)]
    by_type: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[arg(long)]
    no_inference_weighting: bool,
    #[arg(long, value_parser = parse_type_source)]
    type_source: Option<TypeSource>,
}

fn parse_alpha(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [h, v, q] => Ok(LossWeights {
            hypotheses: h,
            vqa: v,
            qtype: q,
        }),
        _ => Err("expected three comma-separated weights".into()),
    }
}

fn parse_fusion(s: &str) -> Result<FusionOp, String> {
    match s.to_ascii_lowercase().as_str() {
        "ewm" => Ok(FusionOp::Ewm),
        "ewa" => Ok(FusionOp::Ewa),
        _ => Err(format!("unknown fusion '{s}' (ewm or ewa)")),
    }
}

fn parse_type_source(s: &str) -> Result<TypeSource, String> {
    match s.to_ascii_lowercase().as_str() {
        "predicted" => Ok(TypeSource::Predicted),
        "groundtruth" => Ok(TypeSource::Groundtruth),
        _ => Err(format!(
            "unknown type source '{s}' (predicted or groundtruth)"
        )),
    }
}

/// `[synth]` section of the config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
struct SynthSection {
    seed: u64,
    samples: usize,
    qtypes: usize,
    answers: usize,
    regions: usize,
    visual_dim: usize,
    noise: f64,
    overlap: bool,
    layout: Layout,
    decoy: bool,
    name: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            seed: 0,
            samples: 200,
            qtypes: 3,
            answers: 6,
            regions: 4,
            visual_dim: 8,
            noise: 0.1,
            overlap: false,
            layout: Layout::Shared,
            decoy: false,
            name: "data.tsv".into(),
        }
    }
}

/// `[eval]` section of the config file. Unset fields fall back to the checkpoint's settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
struct EvalSection {
    inference_weighting: Option<bool>,
    type_source: Option<TypeSource>,
    by_type: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: TrainConfig,
    synth: SynthSection,
    eval: EvalSection,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

/// Provenance record of one training run.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: String,
    config: TrainConfig,
    interaction: InteractionMode,
    notes: Vec<String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: Option<u64>,
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Append-only line log.
struct LogFile {
    path: PathBuf,
    file: fs::File,
}

impl LogFile {
    fn create(path: &Path) -> CliResult<Self> {
        let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        Ok(LogFile {
            path: path.to_path_buf(),
            file,
        })
    }

    fn append<'a>(&mut self, lines: impl Iterator<Item = &'a String>) -> CliResult<()> {
        use std::io::Write as _;
        let mut text = String::new();
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        self.file
            .write_all(text.as_bytes())
            .map_err(|e| io_err(&self.path, e))
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    }))
}

/// Record file, existing sidecars and referenced feature files.
fn dataset_files(path: &Path, bundle: &DatasetBundle) -> Vec<PathBuf> {
    let mut files = vec![path.to_path_buf()];
    for ext in ["vocab", "answers", "qtypes"] {
        let p = path.with_extension(ext);
        if p.exists() {
            files.push(p);
        }
    }
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut seen = std::collections::BTreeSet::new();
    for s in &bundle.samples {
        if let FeatureRef::File { path: rel, .. } = &s.features {
            if seen.insert(rel.clone()) && dir.join(rel).exists() {
                files.push(dir.join(rel));
            }
        }
    }
    files
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn require_out(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

fn cmd_gen_synth(cli: &Cli, file: &FileConfig, args: &SynthArgs) -> CliResult<()> {
    let out = require_out(cli)?;
    let mut s = file.synth.clone();
    s.seed = cli.seed.unwrap_or(s.seed);
    s.samples = args.samples.unwrap_or(s.samples);
    s.qtypes = args.qtypes.unwrap_or(s.qtypes);
    s.answers = args.answers.unwrap_or(s.answers);
    s.regions = args.regions.unwrap_or(s.regions);
    s.visual_dim = args.visual_dim.unwrap_or(s.visual_dim);
    s.noise = args.noise.unwrap_or(s.noise);
    s.overlap |= args.overlap;
    s.decoy |= args.decoy;
    s.layout = args.layout.unwrap_or(s.layout);
    if let Some(n) = &args.name {
        s.name.clone_from(n);
    }
    let shape = SynthShape {
        samples: s.samples,
        qtypes: s.qtypes,
        answers: s.answers,
        regions: s.regions,
        visual_dim: s.visual_dim,
    };
    let rule = SynthRule {
        overlap: s.overlap,
        layout: match s.layout {
            Layout::Shared => ChannelLayout::Shared,
            Layout::Split => ChannelLayout::SplitByType,
        },
        noise: s.noise,
        decoy: s.decoy,
    };
    let record = out.join(&s.name);
    let feature_file = format!(
        "{}.features",
        Path::new(&s.name)
            .file_stem()
            .map_or("data".into(), |f| f.to_string_lossy())
    );
    let bundle = gen_synthetic(s.seed, shape, &rule, &feature_file)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    bundle.write(&record)?;
    eprintln!("wrote {} questions to {}", bundle.len(), record.display());
    Ok(())
}

fn cmd_compute_prior(cli: &Cli, dataset: &Path) -> CliResult<()> {
    let out = require_out(cli)?;
    let bundle = DatasetBundle::load(dataset)?;
    let prior = compute_prior(&bundle)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    export_prior(&prior, out)?;
    let fallback = prior.fallback_mask().iter().filter(|&&f| f).count();
    eprintln!(
        "prior {}x{} written to {} ({fallback} unobserved answers set to uniform)",
        prior.num_qtypes(),
        prior.num_answers(),
        out.display()
    );
    Ok(())
}

fn resolve_train_config(cli: &Cli, file: &FileConfig, a: &TrainArgs) -> TrainConfig {
    let mut c = file.train.clone();
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = a.alpha {
        c.loss_weights = v;
    }
    if let Some(v) = a.fusion {
        c.fusion = v;
    }
    if let Some(kinds) = &a.hypotheses {
        c.hypotheses = kinds.iter().map(|&k| HypothesisSpec::new(k)).collect();
    }
    if let Some(v) = a.interaction {
        c.interaction = v;
    }
    if let Some(v) = a.type_source {
        c.type_source = v;
    }
    if let Some(v) = a.clip_norm {
        c.clip_norm = Some(v);
    }
    if let Some(v) = a.log_interval {
        c.log_interval = v;
    }
    c.prior &= !a.no_prior;
    c.type_fusion &= !a.no_type_fusion;
    c.mil_softmax |= a.mil_softmax;
    c.stop_gradient_h |= a.stop_gradient_h;
    c.inference_weighting &= !a.no_inference_weighting;
    c
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(manifest).map_err(Error::from)?;
    json.push('\n');
    write_file(path, &json)
}

fn cmd_train(cli: &Cli, file: &FileConfig, args: &TrainArgs) -> CliResult<()> {
    let out = require_out(cli)?;
    let config = resolve_train_config(cli, file, args);
    config.validate()?;
    let bundle = DatasetBundle::load_with(&args.dataset, config.dims.max_q_len)?;

    let checkpoint_dir = out.join("checkpoint");
    let log_path = out.join("train.log");
    let wmil_path = out.join("w_mil.csv");
    let manifest_path = out.join("run_manifest.json");
    let interaction = config.effective_interaction();

    let mut inputs = Vec::new();
    for p in dataset_files(&args.dataset, &bundle) {
        inputs.push(InputDigest {
            sha256: sha256_file(&p)?,
            path: p.display().to_string(),
        });
    }
    if let Some(c) = &cli.config {
        inputs.push(InputDigest {
            sha256: sha256_file(c)?,
            path: c.display().to_string(),
        });
    }
    let mut outputs = vec![
        checkpoint_dir.display().to_string(),
        log_path.display().to_string(),
    ];
    let mut notes = Vec::new();
    match interaction {
        InteractionMode::Learned => outputs.push(wmil_path.display().to_string()),
        InteractionMode::Averaging => notes.push(
            "averaging baseline: hypotheses are combined by their mean; no mixing weights".into(),
        ),
        InteractionMode::Single => notes.push("single hypothesis: no interaction module".into()),
    }
    outputs.push(manifest_path.display().to_string());
    let mut manifest = RunManifest {
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        interaction,
        notes,
        inputs,
        outputs,
        started_unix: now_unix(),
        finished_unix: None,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_manifest(&manifest_path, &manifest)?;

    let mut log = LogFile::create(&log_path)?;
    let mut epoch_error = None;
    let result = train_with(&config, &bundle, cli.threads, |report, model| {
        let summary = format!(
            "epoch={} {}",
            report.epoch,
            report.loss.log_line(report.steps)
        );
        eprintln!("{summary}");
        if epoch_error.is_none() {
            epoch_error = log
                .append(report.log.iter().chain(std::iter::once(&summary)))
                .err()
                .or_else(|| {
                    save_checkpoint(model, &checkpoint_dir)
                        .err()
                        .map(CliError::from)
                });
        }
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            log.append(std::iter::once(&format!("error: {e}")))?;
            return Err(e.into());
        }
    };
    if let Some(e) = epoch_error {
        return Err(e);
    }
    save_checkpoint(&outcome.model, &checkpoint_dir)?;

    if let Some(w) = outcome.model.interaction_weights() {
        let table = correlation_readout(
            &w,
            outcome.model.qtypes.names(),
            &outcome.model.spec.hypothesis_names(),
        )?;
        write_file(&wmil_path, &table.render_csv())?;
    }
    manifest.finished_unix = Some(now_unix());
    write_manifest(&manifest_path, &manifest)?;
    eprintln!(
        "trained {} steps; checkpoint in {}",
        outcome.steps,
        checkpoint_dir.display()
    );
    Ok(())
}

fn inference_options(
    model: &Model,
    file: &EvalSection,
    no_weighting: bool,
    source: Option<TypeSource>,
) -> InferenceOptions {
    let mut opts = model.inference;
    if let Some(w) = file.inference_weighting {
        opts.inference_weighting = w;
    }
    if let Some(s) = file.type_source {
        opts.type_source = s;
    }
    if no_weighting {
        opts.inference_weighting = false;
    }
    if let Some(s) = source {
        opts.type_source = s;
    }
    opts
}

fn load_for(model: &Model, dataset: &Path) -> CliResult<DatasetBundle> {
    let bundle = DatasetBundle::load_with(dataset, model.spec.dims.max_q_len)?;
    model.check_compatible(&bundle)?;
    Ok(bundle)
}

fn cmd_eval(cli: &Cli, file: &FileConfig, args: &EvalArgs) -> CliResult<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let bundle = load_for(&model, &args.dataset)?;
    let opts = inference_options(
        &model,
        &file.eval,
        args.no_inference_weighting,
        args.type_source,
    );
    let report = evaluate(&model, &bundle, &opts, cli.threads)?;
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        write_file(&out.join("report.json"), &report.render_json())?;
        write_file(&out.join("report.csv"), &report.render_csv())?;
    }
    if args.by_type || file.eval.by_type {
        print!("{}", report.render_table());
    } else {
        println!(
            "accuracy={} arithmetic_mpt={} harmonic_mpt={} qtype_accuracy={} samples={}",
            fmt_real(report.overall_accuracy),
            fmt_real(report.arithmetic_mpt),
            fmt_real(report.harmonic_mpt),
            fmt_real(report.qtype_classification_accuracy),
            report.samples
        );
    }
    Ok(())
}

fn cmd_predict(cli: &Cli, file: &FileConfig, args: &PredictArgs) -> CliResult<()> {
    let out = require_out(cli)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let bundle = load_for(&model, &args.dataset)?;
    let opts = inference_options(
        &model,
        &file.eval,
        args.no_inference_weighting,
        args.type_source,
    );
    let mut text = String::new();
    let mut warnings = 0;
    for (s, r) in bundle
        .samples
        .iter()
        .zip(predict(&model, &bundle, &opts, cli.threads))
    {
        match r {
            Ok(p) => {
                let top: Vec<String> = p
                    .top_k(TOP_K)
                    .into_iter()
                    .map(|(a, v)| format!("{}={}", model.answers.names()[a], fmt_real(v)))
                    .collect();
                writeln!(
                    text,
                    "{}\t{}\t{}\t{}",
                    s.id,
                    model.answers.names()[p.answer],
                    model.qtypes.names()[p.qtype],
                    top.join(";")
                )
                .unwrap();
            }
            Err(e) => {
                warnings += 1;
                writeln!(
                    text,
                    "{}\t!error\t{}",
                    s.id,
                    e.to_string().replace(['\t', '\n'], " ")
                )
                .unwrap();
            }
        }
    }
    write_file(out, &text)?;
    if warnings > 0 {
        eprintln!("warning: {warnings} question(s) could not be predicted");
    }
    eprintln!("wrote {} predictions to {}", bundle.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(cli, &file, a),
        Command::ComputePrior { dataset } => cmd_compute_prior(cli, dataset),
        Command::Train(a) => cmd_train(cli, &file, a),
        Command::Eval(a) => cmd_eval(cli, &file, a),
        Command::Predict(a) => cmd_predict(cli, &file, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Lib(Error::Divergence { step, detail })) => {
            eprintln!("error: training diverged at step {step}: {detail}");
            ExitCode::from(EXIT_DIVERGENCE)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}
