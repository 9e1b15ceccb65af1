//! `nullu`: command-line front end for the editing pipeline.
//!
//! Subcommands mirror the library layers: `gen` (synthetic data),
//! `extract` (paired captures), `fit` (halluspace fitting), `edit` (the
//! full pipeline), `analyze` (interpretation reports), `eval` (behavioral
//! evaluation), and `verify` (invariant self-checks).
//!
//! Every successful command emits a JSON run manifest: next to the primary
//! output (`<out>.manifest.json`) when there is one, otherwise to stdout.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
//! failure; `verify` exits 1 when any check fails.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use nullu_core::analysis::{
    decode_direction, dpo_gradient, dpo_loss, projected_components, token_frequency_report,
    DpoConfig, DpoPair,
};
use nullu_core::data::container::{atomic_write, Blob, Container};
use nullu_core::data::corpus::{build_planted_bias_corpus, PlantedBiasSpec};
use nullu_core::data::factor::{
    generate_factor_pairs, random_subspace, random_unit_vector, FactorModelSpec, PairedFeatureSet,
};
use nullu_core::data::schema;
use nullu_core::linalg::{DenseMatrix, Subspace};
use nullu_core::pipeline::{
    difference_matrix, extract_features, fit_halluspace, run_nullu, EditConfig, EditMode,
    MaskPolicy, PipelineInput,
};
use nullu_core::toymodel::{ModelDims, TokenSequence};
use nullu_core::verify::{check_container_file, run_standard_suite};
use nullu_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nullu",
    version,
    about = "Low-rank hallucination-subspace extraction and null-space weight editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Capture paired features from a stored model over a stored corpus.
    Extract(ExtractArgs),
    /// Fit halluspaces from stored paired features.
    Fit(FitArgs),
    /// Run the full pipeline: fit halluspaces and edit the model.
    Edit(EditArgs),
    /// Interpretation reports over stored artifacts.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Behavioral evaluation of stored models.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the deterministic invariant self-checks.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum GenCommand {
    /// Paired features from a planted two-factor model.
    Factor(GenFactorArgs),
    /// A planted-bias token corpus over a toy model.
    Corpus(GenCorpusArgs),
}

#[derive(Args)]
struct GenFactorArgs {
    /// Number of sample pairs.
    #[arg(long)]
    n: usize,
    /// Ambient feature dimension.
    #[arg(long)]
    d: usize,
    /// Rank of the planted spurious subspace.
    #[arg(long = "k-true")]
    k_true: usize,
    /// Rank of the shared truthful factor.
    #[arg(long = "k-hat", default_value_t = 2)]
    k_hat: usize,
    /// Latent scale of both factors.
    #[arg(long, default_value_t = 1.0)]
    latent: f64,
    /// Independent per-side noise scale.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 128)]
    vocab: usize,
    /// Hidden (residual) dimension.
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// MLP inner dimension.
    #[arg(long, default_value_t = 64)]
    mlp: usize,
    #[arg(long = "num-layers", default_value_t = 6)]
    num_layers: usize,
    /// Layer carrying the planted amplifier (default: middle layer).
    #[arg(long = "edit-layer")]
    edit_layer: Option<usize>,
    /// Number of bias tokens (default: vocab/8, at least 6).
    #[arg(long = "bias-count")]
    bias_count: Option<usize>,
    #[arg(long = "k-true", default_value_t = 2)]
    k_true: usize,
    /// Number of prompt pairs.
    #[arg(long, default_value_t = 48)]
    n: usize,
    #[arg(long = "prompt-len", default_value_t = 4)]
    prompt_len: usize,
    #[arg(long = "cont-len", default_value_t = 8)]
    cont_len: usize,
    #[arg(long = "embed-gain", default_value_t = 96.0)]
    embed_gain: f64,
    #[arg(long = "seed-gain", default_value_t = 0.25)]
    seed_gain: f64,
    #[arg(long = "read-gain", default_value_t = 1.2)]
    read_gain: f64,
    #[arg(long = "amp-gain", default_value_t = 14.0)]
    amp_gain: f64,
    #[arg(long = "unembed-gain", default_value_t = 0.6)]
    unembed_gain: f64,
    #[arg(long = "unembed-dampen", default_value_t = 0.35)]
    unembed_dampen: f64,
    #[arg(long = "max-attempts", default_value_t = 32)]
    max_attempts: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// Container holding a model (`model.*`) and a corpus (`corpus.*`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Layers to capture, e.g. `3` or `4-7` or `2,4-5`.
    #[arg(long)]
    layers: String,
    #[arg(long, value_enum, default_value_t = MaskArg::All)]
    mask: MaskArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Container holding paired features (`features.*`).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    rank: usize,
    /// Subset of stored layers to fit (default: all).
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    /// Container holding a model plus either a corpus or stored features.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    layers: String,
    #[arg(long)]
    rank: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::OneShot)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = MaskArg::All)]
    mask: MaskArg,
    /// Output container with the edited model and fitted halluspaces.
    #[arg(long)]
    out: PathBuf,
    /// Edit report path (default: `<out stem>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Rank vocabulary tokens against each halluspace direction.
    Decode(DecodeArgs),
    /// Projected-component statistics of difference vectors vs random
    /// unit vectors.
    Project(ProjectArgs),
    /// One-step preference-gradient decomposition over a stored bundle.
    Dpo(DpoArgs),
    /// Watched-token frequency report over a stored corpus.
    Freq(FreqArgs),
}

#[derive(Args)]
struct DecodeArgs {
    /// Container holding halluspaces (and a model, unless --model is
    /// given).
    #[arg(long = "in")]
    input: PathBuf,
    /// Separate container to take the model (unembedding) from.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    /// Container holding paired features (and optionally halluspaces).
    #[arg(long = "in")]
    input: PathBuf,
    /// Rank to fit when the container has no stored halluspace.
    #[arg(long)]
    rank: Option<usize>,
    /// Seed of the random-unit-vector baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Optional plot-ready CSV of per-row component norms.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DpoArgs {
    /// Container holding a model and corpus.
    #[arg(long = "in")]
    input: PathBuf,
    /// Capture layer (default: the corpus's designated layer).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FreqArgs {
    /// Container holding a corpus.
    #[arg(long = "in")]
    input: PathBuf,
    /// Token ids to watch, e.g. `7,9,23` (default: the corpus bias set).
    #[arg(long)]
    watch: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV with one line per watched token and side.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Bias-token incidence of greedy continuations from stored prompts.
    #[command(name = "bias-freq")]
    BiasFreq(BiasFreqArgs),
}

#[derive(Args)]
struct BiasFreqArgs {
    /// Container holding the model to evaluate (`model.*`).
    #[arg(long)]
    model: PathBuf,
    /// Container holding the corpus (prompts and bias tokens).
    #[arg(long)]
    corpus: PathBuf,
    /// Continuation length (default: the corpus continuation length).
    #[arg(long = "max-new")]
    max_new: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also check the integrity of this container file.
    #[arg(long)]
    container: Option<PathBuf>,
    /// Print results as JSON instead of plain lines.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    #[value(name = "one-shot")]
    OneShot,
    #[value(name = "sequential")]
    Sequential,
}

impl From<ModeArg> for EditMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OneShot => EditMode::OneShot,
            ModeArg::Sequential => EditMode::Sequential,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskArg {
    /// Pool over every position.
    All,
    /// Pool over continuation positions only.
    Continuation,
}

impl From<MaskArg> for MaskPolicy {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::All => MaskPolicy::AllPositions,
            MaskArg::Continuation => MaskPolicy::ContinuationOnly,
        }
    }
}

/// What a completed command hands back for manifest assembly.
struct Outcome {
    summary: String,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Exit code override (used by `verify` on failed checks).
    exit: i32,
}

impl Outcome {
    fn new(summary: impl Into<String>) -> Self {
        Self {
            summary: summary.into(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            exit: 0,
        }
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    let command = command_name(&cli.command);
    let started = Instant::now();
    match dispatch(cli) {
        Ok(outcome) => {
            if let Err(e) = emit_manifest(command, &argv, &outcome, started) {
                eprintln!("error: {e}");
                std::process::exit(exit_code(&e));
            }
            println!("{}", outcome.summary);
            std::process::exit(outcome.exit);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// Honors `NULLU_THREADS` by capping the global worker pool.
fn configure_threads() -> Result<()> {
    match std::env::var("NULLU_THREADS") {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("NULLU_THREADS must be a positive integer, got {raw:?}")))?;
            if n == 0 {
                return Err(Error::InvalidArgument(
                    "NULLU_THREADS must be a positive integer".into(),
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidArgument(format!("thread pool setup failed: {e}")))?;
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::PipelineStage { source, .. } => exit_code(source),
        Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidToken { .. }
        | Error::InvalidLayer { .. }
        | Error::InvalidSpec(_) => 2,
        Error::CorruptContainer(_)
        | Error::MissingEntry(_)
        | Error::DegenerateCorpus(_)
        | Error::Io(_) => 3,
        Error::InvalidMatrix
        | Error::NumericalFailure
        | Error::RankDeficient { .. }
        | Error::DegenerateVector(_) => 4,
    }
}

/// Full subcommand path for the run manifest.
fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(GenCommand::Factor(_)) => "gen factor",
        Command::Gen(GenCommand::Corpus(_)) => "gen corpus",
        Command::Extract(_) => "extract",
        Command::Fit(_) => "fit",
        Command::Edit(_) => "edit",
        Command::Analyze(AnalyzeCommand::Decode(_)) => "analyze decode",
        Command::Analyze(AnalyzeCommand::Project(_)) => "analyze project",
        Command::Analyze(AnalyzeCommand::Dpo(_)) => "analyze dpo",
        Command::Analyze(AnalyzeCommand::Freq(_)) => "analyze freq",
        Command::Eval(EvalCommand::BiasFreq(_)) => "eval bias-freq",
        Command::Verify(_) => "verify",
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Gen(GenCommand::Factor(args)) => cmd_gen_factor(args),
        Command::Gen(GenCommand::Corpus(args)) => cmd_gen_corpus(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Edit(args) => cmd_edit(args),
        Command::Analyze(AnalyzeCommand::Decode(args)) => cmd_decode(args),
        Command::Analyze(AnalyzeCommand::Project(args)) => cmd_project(args),
        Command::Analyze(AnalyzeCommand::Dpo(args)) => cmd_dpo(args),
        Command::Analyze(AnalyzeCommand::Freq(args)) => cmd_freq(args),
        Command::Eval(EvalCommand::BiasFreq(args)) => cmd_bias_freq(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn emit_manifest(command: &str, argv: &[String], outcome: &Outcome, started: Instant) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "argv": argv,
        "seeds": outcome.seeds,
        "inputs": outcome.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "outputs": outcome.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "duration_ms": started.elapsed().as_millis(),
    });
    let rendered = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    match outcome.outputs.first() {
        Some(primary) => {
            let path = PathBuf::from(format!("{}.manifest.json", primary.display()));
            atomic_write(&path, rendered.as_bytes())
        }
        None => {
            println!("{rendered}");
            Ok(())
        }
    }
}

/// Parses a layer selection such as `3`, `4-7`, or `2,4-5,9`.
fn parse_layers(spec: &str) -> Result<Vec<usize>> {
    let mut layers = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty element in layer spec {spec:?}"
            )));
        }
        match part.split_once('-') {
            Some((a, b)) => {
                let lo: usize = parse_num(a, spec)?;
                let hi: usize = parse_num(b, spec)?;
                if lo > hi {
                    return Err(Error::InvalidArgument(format!(
                        "descending range {part:?} in layer spec"
                    )));
                }
                layers.extend(lo..=hi);
            }
            None => layers.push(parse_num(part, spec)?),
        }
    }
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}

fn parse_num(s: &str, context: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad number {s:?} in {context:?}")))
}

fn parse_token_list(spec: &str) -> Result<BTreeSet<usize>> {
    spec.split(',')
        .map(|part| parse_num(part, spec))
        .collect()
}

fn sibling_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let rendered = serde_json::to_string_pretty(value).expect("json serializes");
    atomic_write(path, rendered.as_bytes())
}

fn cmd_gen_factor(args: GenFactorArgs) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    if args.k_hat == 0 || args.k_true == 0 {
        return Err(Error::InvalidSpec(
            "k_hat and k_true must both be at least 1".into(),
        ));
    }
    let total = args.k_hat + args.k_true;
    if total > args.d {
        return Err(Error::InvalidSpec(format!(
            "k_hat + k_true must be at most d = {}, got {total}",
            args.d
        )));
    }
    // Joint orthonormal loadings: latent scale is then exactly the
    // per-direction amplitude, so latent/noise is the planted SNR.
    let joint = random_subspace(args.d, total, &mut rng)?;
    let basis_t = joint.basis().transpose();
    let b_hat = DenseMatrix::from_fn(args.k_hat, args.d, |i, j| basis_t.get(i, j))?;
    let b_tilde = DenseMatrix::from_fn(args.k_true, args.d, |i, j| basis_t.get(args.k_hat + i, j))?;
    let spec = FactorModelSpec::new(b_hat, b_tilde, args.latent, args.noise)?;
    let feature_seed: u64 = rng.random();
    let features = generate_factor_pairs(&spec, args.n, feature_seed)?;

    let mut c = Container::new();
    schema::write_features(&mut c, &[features])?;
    c.insert("factor.b_hat", Blob::Matrix(spec.b_hat().clone()))?;
    c.insert("factor.b_tilde", Blob::Matrix(spec.b_tilde().clone()))?;
    c.save(&args.out)?;

    let mut outcome = Outcome::new(format!(
        "wrote {} factor pairs (d={}, k_true={}) to {}",
        args.n,
        args.d,
        args.k_true,
        args.out.display()
    ));
    outcome.seeds = vec![args.seed, feature_seed];
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<Outcome> {
    let dims = ModelDims {
        vocab_size: args.vocab,
        hidden_dim: args.d,
        mlp_dim: args.mlp,
        num_layers: args.num_layers,
    };
    let designated = args.edit_layer.unwrap_or(args.num_layers / 2);
    let mut spec = PlantedBiasSpec::recommended(dims, designated);
    if let Some(bc) = args.bias_count {
        spec.bias_token_count = bc;
    }
    spec.k_true = args.k_true;
    spec.n_pairs = args.n;
    spec.prompt_len = args.prompt_len;
    spec.continuation_len = args.cont_len;
    spec.embed_gain = args.embed_gain;
    spec.seed_gain = args.seed_gain;
    spec.read_gain = args.read_gain;
    spec.amp_gain = args.amp_gain;
    spec.unembed_gain = args.unembed_gain;
    spec.unembed_dampen = args.unembed_dampen;
    spec.max_attempts = args.max_attempts;

    let bundle = build_planted_bias_corpus(&spec, args.seed)?;
    let mut c = Container::new();
    schema::write_bundle(&mut c, &bundle)?;
    c.save(&args.out)?;

    let mut outcome = Outcome::new(format!(
        "wrote planted corpus ({} pairs, designated layer {}, accepted seed {}) to {}",
        bundle.corpus.pairs.len(),
        bundle.corpus.designated_layer,
        bundle.corpus.accepted_seed,
        args.out.display()
    ));
    outcome.seeds = vec![args.seed, bundle.corpus.accepted_seed];
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_extract(args: ExtractArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let model = schema::read_model(&c, "model")?;
    let corpus = schema::read_corpus(&c)?;
    let layers = parse_layers(&args.layers)?;
    let features = extract_features(&model, &corpus, &layers, args.mask.into())?;

    let mut out = Container::new();
    schema::write_features(&mut out, &features)?;
    out.save(&args.out)?;

    let mut outcome = Outcome::new(format!(
        "extracted features for {} layer(s) over {} pairs to {}",
        features.len(),
        corpus.pairs.len(),
        args.out.display()
    ));
    outcome.inputs = vec![args.input];
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_fit(args: FitArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let features = schema::read_features(&c)?;
    let selected: Vec<&PairedFeatureSet> = match &args.layers {
        Some(spec) => {
            let wanted = parse_layers(spec)?;
            wanted
                .iter()
                .map(|l| {
                    features
                        .iter()
                        .find(|fs| fs.layer == *l)
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("no stored features for layer {l}"))
                        })
                })
                .collect::<Result<_>>()?
        }
        None => features.iter().collect(),
    };
    let mut subspaces = Vec::with_capacity(selected.len());
    for fs in selected {
        let sub = fit_halluspace(fs, args.rank)?;
        subspaces.push((fs.layer, sub));
    }

    let mut out = Container::new();
    schema::write_subspaces(&mut out, &subspaces)?;
    out.save(&args.out)?;

    let mut outcome = Outcome::new(format!(
        "fitted rank-{} halluspaces for {} layer(s) to {}",
        args.rank,
        subspaces.len(),
        args.out.display()
    ));
    outcome.inputs = vec![args.input];
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_edit(args: EditArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let model = schema::read_model(&c, "model")?;
    let layers = parse_layers(&args.layers)?;
    let config = EditConfig::new(&layers, args.rank)
        .with_mode(args.mode.into())
        .with_mask_policy(args.mask.into());

    let stored_features;
    let stored_corpus;
    let input = if c.contains("features.layers") {
        stored_features = schema::read_features(&c)?;
        PipelineInput::Features(&stored_features)
    } else {
        stored_corpus = schema::read_corpus(&c)?;
        PipelineInput::Corpus(&stored_corpus)
    };

    let (edited, report) = run_nullu(&model, input, &config)?;

    let mut out = Container::new();
    schema::write_model(&mut out, "model", &edited)?;
    schema::write_subspaces(&mut out, &report.subspaces())?;
    out.save(&args.out)?;

    let report_path = args
        .report
        .unwrap_or_else(|| sibling_path(&args.out, "report.json"));
    atomic_write(&report_path, report.to_json().as_bytes())?;

    let mut outcome = Outcome::new(format!(
        "edited {} layer(s) at rank {}; model written to {}, report to {}",
        report.layers.len(),
        args.rank,
        args.out.display(),
        report_path.display()
    ));
    outcome.inputs = vec![args.input];
    outcome.outputs = vec![args.out, report_path];
    Ok(outcome)
}

fn cmd_decode(args: DecodeArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let subspaces = schema::read_subspaces(&c)?;
    let model = match &args.model {
        Some(path) => schema::read_model(&Container::load(path)?, "model")?,
        None => schema::read_model(&c, "model")?,
    };
    let unembed = model.unembed();

    let mut layers_json = Vec::new();
    for (layer, sub) in &subspaces {
        let mut directions = Vec::new();
        for j in 0..sub.rank() {
            let direction = sub.direction(j)?;
            let ids = decode_direction(unembed, &direction, args.top)?;
            directions.push(serde_json::json!({
                "direction": j,
                "token_ids": ids,
            }));
        }
        layers_json.push(serde_json::json!({
            "layer": layer,
            "directions": directions,
        }));
    }
    let value = serde_json::json!({ "top": args.top, "layers": layers_json });
    write_json(&args.out, &value)?;

    let mut outcome = Outcome::new(format!(
        "decoded {} halluspace layer(s) to {}",
        subspaces.len(),
        args.out.display()
    ));
    outcome.inputs = vec![args.input];
    if let Some(m) = args.model {
        outcome.inputs.push(m);
    }
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_project(args: ProjectArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let features = schema::read_features(&c)?;
    if features.is_empty() {
        return Err(Error::MissingEntry("features.layers".into()));
    }
    let stored_subs = if c.contains("halluspace.layers") {
        Some(schema::read_subspaces(&c)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut layers_json = Vec::new();
    let mut csv = String::from("layer,kind,row,component_norm\n");
    for fs in &features {
        let sub: Subspace = match &stored_subs {
            Some(subs) => subs
                .iter()
                .find(|(l, _)| *l == fs.layer)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no stored halluspace for layer {}",
                        fs.layer
                    ))
                })?,
            None => {
                let rank = args.rank.ok_or_else(|| {
                    Error::InvalidArgument(
                        "container has no stored halluspace; pass --rank to fit one".into(),
                    )
                })?;
                fit_halluspace(fs, rank)?
            }
        };

        let diff = difference_matrix(fs)?;
        let diff_stats = projected_components(&diff, &sub, false)?;
        let baseline = DenseMatrix::from_rows(
            &(0..diff.rows())
                .map(|_| random_unit_vector(fs.dim(), &mut rng))
                .collect::<Vec<_>>(),
        )?;
        let random_stats = projected_components(&baseline, &sub, true)?;
        let ratio = diff_stats.mean_norm / random_stats.mean_norm;

        for (i, n) in diff_stats.norms.iter().enumerate() {
            csv.push_str(&format!("{},diff,{i},{n}\n", fs.layer));
        }
        for (i, n) in random_stats.norms.iter().enumerate() {
            csv.push_str(&format!("{},random,{i},{n}\n", fs.layer));
        }
        layers_json.push(serde_json::json!({
            "layer": fs.layer,
            "rank": sub.rank(),
            "rows": diff.rows(),
            "diff_mean_norm": diff_stats.mean_norm,
            "random_mean_norm": random_stats.mean_norm,
            "mean_ratio": ratio,
        }));
    }
    let value = serde_json::json!({ "seed": args.seed, "layers": layers_json });
    write_json(&args.out, &value)?;
    if let Some(csv_path) = &args.csv {
        atomic_write(csv_path, csv.as_bytes())?;
    }

    let mut outcome = Outcome::new(format!(
        "projected {} layer(s) of difference vectors to {}",
        features.len(),
        args.out.display()
    ));
    outcome.seeds = vec![args.seed];
    outcome.inputs = vec![args.input];
    outcome.outputs = vec![args.out];
    if let Some(csv_path) = args.csv {
        outcome.outputs.push(csv_path);
    }
    Ok(outcome)
}

fn cmd_dpo(args: DpoArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let model = schema::read_model(&c, "model")?;
    let corpus = schema::read_corpus(&c)?;
    let layer = args.layer.unwrap_or(corpus.designated_layer);
    let features = extract_features(&model, &corpus, &[layer], MaskPolicy::AllPositions)?
        .pop()
        .expect("one layer requested");

    let pairs: Vec<DpoPair> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| DpoPair {
            x_plus: features.x_plus.row(i).to_vec(),
            x_minus: features.x_minus.row(i).to_vec(),
            y_plus: pair.hallucinated[0],
            y_minus: pair.truthful[0],
        })
        .collect();
    let cfg = DpoConfig::new(model.unembed().clone(), args.beta)?;
    let grad = dpo_gradient(&pairs, &cfg)?;
    let recombined = grad.feature_term.add(&grad.output_term)?;
    let identity_gap = grad.total.max_abs_diff(&recombined)?;
    let eye = DenseMatrix::identity(model.hidden_dim())?;
    let loss_at_ref = dpo_loss(&pairs, &eye, &eye, &cfg)?;

    let value = serde_json::json!({
        "beta": args.beta,
        "layer": layer,
        "pairs": pairs.len(),
        "g_frobenius": grad.total.frobenius_norm(),
        "g_feature_frobenius": grad.feature_term.frobenius_norm(),
        "g_output_frobenius": grad.output_term.frobenius_norm(),
        "split_identity_max_abs": identity_gap,
        "loss_at_reference": loss_at_ref,
    });
    write_json(&args.out, &value)?;

    let mut outcome = Outcome::new(format!(
        "decomposed preference gradient over {} pairs at layer {layer} to {}",
        pairs.len(),
        args.out.display()
    ));
    outcome.inputs = vec![args.input];
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_freq(args: FreqArgs) -> Result<Outcome> {
    let c = Container::load(&args.input)?;
    let corpus = schema::read_corpus(&c)?;
    let watched = match &args.watch {
        Some(spec) => parse_token_list(spec)?,
        None => corpus.bias_tokens.clone(),
    };
    let hall: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.hallucinated.clone()).collect();
    let truth: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.truthful.clone()).collect();
    let hall_report = token_frequency_report(&hall, &watched);
    let truth_report = token_frequency_report(&truth, &watched);

    let value = serde_json::json!({
        "watched": watched.iter().copied().collect::<Vec<usize>>(),
        "hallucinated": serde_json::from_str::<serde_json::Value>(&hall_report.to_json()).expect("valid json"),
        "truthful": serde_json::from_str::<serde_json::Value>(&truth_report.to_json()).expect("valid json"),
    });
    write_json(&args.out, &value)?;
    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("side,token,count,sequence_hits,sequence_rate\n");
        for (side, report) in [("hallucinated", &hall_report), ("truthful", &truth_report)] {
            for line in report.to_csv().lines().skip(1) {
                csv.push_str(&format!("{side},{line}\n"));
            }
        }
        atomic_write(csv_path, csv.as_bytes())?;
    }

    let mut outcome = Outcome::new(format!(
        "frequency report over {} pairs (hallucinated incidence {:.3}, truthful {:.3}) to {}",
        corpus.pairs.len(),
        hall_report.incidence,
        truth_report.incidence,
        args.out.display()
    ));
    outcome.inputs = vec![args.input];
    outcome.outputs = vec![args.out];
    if let Some(csv_path) = args.csv {
        outcome.outputs.push(csv_path);
    }
    Ok(outcome)
}

fn cmd_bias_freq(args: BiasFreqArgs) -> Result<Outcome> {
    let model_c = Container::load(&args.model)?;
    let model = schema::read_model(&model_c, "model")?;
    let corpus_c = Container::load(&args.corpus)?;
    let corpus = schema::read_corpus(&corpus_c)?;
    let max_new = args
        .max_new
        .unwrap_or_else(|| corpus.pairs[0].hallucinated.len());

    let mut continuations = Vec::with_capacity(corpus.pairs.len());
    for pair in &corpus.pairs {
        let prompt = TokenSequence::new(pair.prompt.clone())?;
        let full = model.greedy_decode(&prompt, max_new)?;
        continuations.push(full.ids()[pair.prompt.len()..].to_vec());
    }
    let report = token_frequency_report(&continuations, &corpus.bias_tokens);

    let value = serde_json::json!({
        "sequences": report.sequences,
        "max_new": max_new,
        "incidence": report.incidence,
        "report": serde_json::from_str::<serde_json::Value>(&report.to_json()).expect("valid json"),
    });
    write_json(&args.out, &value)?;

    let mut outcome = Outcome::new(format!(
        "evaluated bias incidence {:.3} over {} prompts to {}",
        report.incidence,
        report.sequences,
        args.out.display()
    ));
    outcome.inputs = vec![args.model, args.corpus];
    outcome.outputs = vec![args.out];
    Ok(outcome)
}

fn cmd_verify(args: VerifyArgs) -> Result<Outcome> {
    let mut results = run_standard_suite(args.seed);
    if let Some(path) = &args.container {
        results.push(check_container_file(path));
    }
    let all_passed = results.iter().all(|r| r.passed);

    if args.json {
        let value = serde_json::json!({
            "seed": args.seed,
            "all_passed": all_passed,
            "checks": results.iter().map(|r| serde_json::json!({
                "name": r.name,
                "passed": r.passed,
                "detail": r.detail,
            })).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        for r in &results {
            println!(
                "{}: {} — {}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.detail
            );
        }
    }

    let passed = results.iter().filter(|r| r.passed).count();
    let mut outcome = Outcome::new(format!(
        "verify: {passed}/{} checks passed",
        results.len()
    ));
    outcome.seeds = vec![args.seed];
    if let Some(path) = args.container {
        outcome.inputs = vec![path];
    }
    outcome.exit = if all_passed { 0 } else { 1 };
    Ok(outcome)
}
