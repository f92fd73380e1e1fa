//! `vlrm-merge`: build, sweep, evaluate and inspect merged reward models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use vlrm_merge::assemble::{assemble_vlrm, file_sha256, verbatim_mismatches, AssemblyPlan};
use vlrm_merge::eval::{evaluate_bon, evaluate_pairwise, EvalDataset, EvalMode};
use vlrm_merge::manifest::{classify_tensors, validate_triple, ClassifiedModel, ComponentRole, ManifestConfig, ModelKind, ModelTriple};
use vlrm_merge::merge::{MergeMethod, MergeRecipe};
use vlrm_merge::scorer::{ModelRef, ProcessScorer, RecordingScorer, ReplayScorer, Scorer, StubScorer, Transcript};
use vlrm_merge::sweep::{run_sweep, EntryStatus, ManifestRecord, SweepConfigFile, SweepError, SweepInputs, TieRule};
use vlrm_merge::tensor::{read_checkpoint_with_vocab, vocab_sidecar_path, write_checkpoint};
use vlrm_merge::toy::write_toy;

#[derive(Parser, Debug)]
#[command(name = "vlrm-merge", version, about = "Merge a text reward model into a vision-language model")]
struct Cli {
    /// Worker threads for tensor merging (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge one recipe into a VLRM checkpoint.
    Merge(MergeArgs),
    /// Grid-search a merge method on a validation set.
    Sweep(SweepArgs),
    /// Score an evaluation file and report accuracy.
    Eval(EvalArgs),
    /// Show tensors, component roles and metadata of a checkpoint.
    Inspect(InspectArgs),
    /// Write a synthetic model triple and datasets.
    Toy(ToyArgs),
}

#[derive(Args, Debug, Serialize)]
struct TripleArgs {
    /// Pre-trained language model checkpoint.
    #[arg(long)]
    pre: PathBuf,
    /// Vision-language model checkpoint.
    #[arg(long)]
    lvlm: PathBuf,
    /// Text reward model checkpoint.
    #[arg(long)]
    rm: PathBuf,
    /// Vocab sidecars; default `<checkpoint>.vocab` when present.
    #[arg(long)]
    pre_vocab: Option<PathBuf>,
    #[arg(long)]
    lvlm_vocab: Option<PathBuf>,
    #[arg(long)]
    rm_vocab: Option<PathBuf>,
    /// Component manifest (TOML); built-in rules when absent.
    #[arg(long, env = "VLRM_MANIFEST")]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MergeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    triple: TripleArgs,
    #[arg(long, value_parser = parse_method)]
    method: MergeMethod,
    #[arg(long)]
    lambda: f32,
    /// Density for ties and dare-* methods.
    #[arg(long)]
    density: Option<f32>,
    /// DARE seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint; the vocab sidecar is written next to it.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[group(required = true, multiple = false)]
struct ScorerSource {
    /// Shell command speaking the JSON-lines scoring protocol.
    #[arg(long)]
    scorer_cmd: Option<String>,
    /// Built-in deterministic hash scorer.
    #[arg(long)]
    stub_scorer: bool,
    /// Answer from a recorded transcript.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ScorerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    source: ScorerSource,
    /// Record every scored request to this transcript.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Seconds to wait for each scorer reply.
    #[arg(long, default_value_t = 300)]
    scorer_timeout: u64,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    triple: TripleArgs,
    #[command(flatten)]
    #[serde(flatten)]
    scorer: ScorerArgs,
    /// Sweep config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's method.
    #[arg(long, value_parser = parse_method)]
    method: Option<MergeMethod>,
    /// Pairwise validation file; overrides the config.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f32>>,
    #[arg(long, value_delimiter = ',')]
    density_grid: Option<Vec<f32>>,
    #[arg(long)]
    primary_size: Option<usize>,
    #[arg(long)]
    tiebreak_size: Option<usize>,
    #[arg(long)]
    sampling_seed: Option<u64>,
    #[arg(long)]
    dare_seed: Option<u64>,
    /// Treat accuracies equal after rounding to 0.1% as tied.
    #[arg(long)]
    round_ties: bool,
    /// Directory for variants and the run manifest.
    #[arg(long)]
    workdir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Pairwise,
    Bon,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// JSON-lines evaluation file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Pairwise)]
    mode: ModeArg,
    /// Checkpoint passed to the scorer.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    scorer: ScorerArgs,
    /// Also write the report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum RulesFor {
    Merged,
    Pre,
    Lvlm,
    Rm,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, env = "VLRM_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Which rule set classifies the checkpoint.
    #[arg(long = "as", value_enum, default_value_t = RulesFor::Merged)]
    rules: RulesFor,
    /// Check that vision encoder and adapter tensors match this LVLM.
    #[arg(long)]
    lvlm: Option<PathBuf>,
    /// Check that reward head tensors match this RM.
    #[arg(long)]
    rm: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug, Serialize)]
struct ToyArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_method(s: &str) -> Result<MergeMethod, String> {
    s.parse::<MergeMethod>().map_err(|e| e.to_string())
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn run(msg: impl ToString) -> Self {
        Failure { code: 1, msg: msg.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn echo_config(name: &str, config: &impl Serialize) {
    eprintln!(
        "{name} config: {}",
        serde_json::to_string(config).expect("config serializes")
    );
}

fn load_manifest(path: Option<&Path>) -> Result<ManifestConfig, Failure> {
    match path {
        Some(p) => ManifestConfig::load(p).map_err(Failure::run),
        None => Ok(ManifestConfig::default()),
    }
}

fn load_triple(args: &TripleArgs) -> Result<(ModelTriple, BTreeMap<String, String>), Failure> {
    let config = load_manifest(args.manifest.as_deref())?;
    let mut provenance = BTreeMap::new();
    let mut load = |kind: &str, path: &Path, vocab: Option<&Path>| -> Result<_, Failure> {
        let ckpt = read_checkpoint_with_vocab(path, vocab).map_err(Failure::run)?;
        let hash = file_sha256(path).map_err(|e| Failure::run(format!("{}: {e}", path.display())))?;
        provenance.insert(format!("input.{kind}.sha256"), hash);
        let vpath = vocab.map(Path::to_path_buf).unwrap_or_else(|| vocab_sidecar_path(path));
        if ckpt.vocab.is_some() {
            let h = file_sha256(&vpath).map_err(|e| Failure::run(format!("{}: {e}", vpath.display())))?;
            provenance.insert(format!("input.{kind}.vocab.sha256"), h);
        }
        Ok(ckpt)
    };
    let pre = load("pre", &args.pre, args.pre_vocab.as_deref())?;
    let lvlm = load("lvlm", &args.lvlm, args.lvlm_vocab.as_deref())?;
    let rm = load("rm", &args.rm, args.rm_vocab.as_deref())?;
    let triple = ModelTriple::classify(pre, lvlm, rm, &config).map_err(Failure::run)?;
    Ok((triple, provenance))
}

fn cmd_merge(args: MergeArgs) -> CmdResult {
    let recipe = MergeRecipe {
        method: args.method,
        lambda: args.lambda,
        density: args.density,
        seed: args.method.is_dare().then(|| args.seed.unwrap_or(0)),
    };
    if args.method.uses_density() && args.density.is_none() {
        usage(
            ErrorKind::MissingRequiredArgument,
            format!("--method {} requires --density", args.method),
        );
    }
    if let Err(e) = recipe.validate() {
        usage(ErrorKind::ValueValidation, e);
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a MergeArgs,
        recipe: &'a MergeRecipe,
    }
    echo_config("merge", &Resolved { args: &args, recipe: &recipe });

    let (triple, provenance) = load_triple(&args.triple)?;
    let report = validate_triple(&triple);
    print!("validation: {report}");
    if !report.is_ok() {
        return Err(Failure::run("model triple failed validation"));
    }
    let mut plan = AssemblyPlan::new(recipe, &triple);
    plan.provenance = provenance.clone();
    let merged = assemble_vlrm(&plan).map_err(Failure::run)?;
    write_checkpoint(&merged, &args.out).map_err(Failure::run)?;
    println!("recipe: {}", recipe.label());
    println!("provenance:");
    for (k, v) in &provenance {
        println!("  {k} = {v}");
    }
    let hash = file_sha256(&args.out).map_err(Failure::run)?;
    println!("output: {} ({} tensors, sha256 {hash})", args.out.display(), merged.len());
    Ok(())
}

/// Run `f` with the configured scorer, writing the transcript afterwards if
/// recording was requested.
fn with_scorer<T>(args: &ScorerArgs, f: impl FnOnce(&mut dyn Scorer) -> Result<T, Failure>) -> Result<T, Failure> {
    let base: Box<dyn Scorer> = match (&args.source.scorer_cmd, &args.source.replay) {
        (Some(cmd), _) => Box::new(ProcessScorer::new(cmd.clone(), Duration::from_secs(args.scorer_timeout))),
        (None, Some(path)) => Box::new(ReplayScorer::new(&Transcript::read(path).map_err(Failure::run)?)),
        (None, None) => Box::new(StubScorer),
    };
    match &args.record {
        None => {
            let mut s = base;
            f(&mut s)
        }
        Some(path) => {
            let mut rec = RecordingScorer::new(base);
            let out = f(&mut rec);
            rec.transcript.write(path).map_err(|e| Failure::run(format!("{}: {e}", path.display())))?;
            info!("transcript with {} entries written to {}", rec.transcript.entries.len(), path.display());
            out
        }
    }
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    let mut file = match &args.config {
        Some(p) => SweepConfigFile::load(p).map_err(|e| Failure { code: 2, msg: e.to_string() })?,
        None => SweepConfigFile::default(),
    };
    let overrides = [
        (args.lambda_grid.clone(), &mut file.lambda_grid),
        (args.density_grid.clone(), &mut file.density_grid),
    ];
    for (value, slot) in overrides {
        if value.is_some() {
            *slot = value;
        }
    }
    file.validation_set = args.validation.clone().or(file.validation_set);
    file.primary_size = args.primary_size.or(file.primary_size);
    file.tiebreak_size = args.tiebreak_size.or(file.tiebreak_size);
    file.sampling_seed = args.sampling_seed.or(file.sampling_seed);
    file.dare_seed = args.dare_seed.or(file.dare_seed);
    if args.round_ties {
        file.tie_rule = Some(TieRule::RoundedPercent);
    }
    let config = match file.resolve(args.method) {
        Ok(c) => c,
        Err(e) => usage(ErrorKind::ValueValidation, e),
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a SweepArgs,
        sweep: &'a vlrm_merge::sweep::SweepConfig,
    }
    echo_config("sweep", &Resolved { args: &args, sweep: &config });

    let validation_path = config
        .validation_set
        .clone()
        .unwrap_or_else(|| usage(ErrorKind::MissingRequiredArgument, "no validation set: pass --validation or set validation_set"));
    let validation = match EvalDataset::read(&validation_path, EvalMode::Pairwise).map_err(Failure::run)? {
        EvalDataset::Pairwise(r) => r,
        EvalDataset::BestOfN(_) => unreachable!("read in pairwise mode"),
    };
    let (triple, provenance) = load_triple(&args.triple)?;
    let report = validate_triple(&triple);
    if !report.is_ok() {
        print!("validation: {report}");
        return Err(Failure::run("model triple failed validation"));
    }
    let inputs = SweepInputs {
        triple: &triple,
        provenance,
        validation: &validation,
    };
    let outcome = with_scorer(&args.scorer, |s| match run_sweep(&config, &inputs, s, &args.workdir) {
        Ok(o) => Ok(o),
        Err(e @ SweepError::AllFailed(_)) => Err(Failure::run(format!(
            "{e}; see {}",
            args.workdir.join(vlrm_merge::sweep::MANIFEST_FILE).display()
        ))),
        Err(e) => Err(Failure::run(e)),
    })?;

    let failed: Vec<String> = outcome
        .records
        .iter()
        .filter_map(|r| match r {
            ManifestRecord::Entry {
                recipe,
                status: EntryStatus::Failed,
                error,
                ..
            } => Some(format!("{}: {}", recipe.label(), error.as_deref().unwrap_or("failed"))),
            _ => None,
        })
        .collect();
    let w = outcome.result.winner_entry();
    println!("entries: {}", outcome.result.entries.len() + failed.len());
    for f in &failed {
        println!("failed: {f}");
    }
    let tb = w
        .tiebreak_accuracy
        .map(|a| format!(", tiebreak {}", vlrm_merge::eval::pct(a)))
        .unwrap_or_default();
    println!(
        "winner: {} (primary {}{tb})",
        w.recipe.label(),
        vlrm_merge::eval::pct(w.primary_accuracy)
    );
    println!("manifest: {}", outcome.manifest_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    echo_config("eval", &args);
    let mode = match args.mode {
        ModeArg::Pairwise => EvalMode::Pairwise,
        ModeArg::Bon => EvalMode::Bon,
    };
    let dataset = EvalDataset::read(&args.input, mode)
        .map_err(|e| Failure::run(format!("{}: {e}", args.input.display())))?;
    let model = match &args.model {
        Some(p) => ModelRef::new(Some(p.clone()), file_sha256(p).map_err(|e| Failure::run(format!("{}: {e}", p.display())))?),
        None => ModelRef::none(),
    };
    let json = with_scorer(&args.scorer, |s| match &dataset {
        EvalDataset::Pairwise(recs) => {
            let report = evaluate_pairwise(recs, s, &model).map_err(Failure::run)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", report.render());
            }
            Ok(serde_json::to_value(&report).expect("report serializes"))
        }
        EvalDataset::BestOfN(recs) => {
            let acc = evaluate_bon(recs, s, &model).map_err(Failure::run)?;
            let value = serde_json::json!({ "best_of_n_accuracy": acc, "instances": recs.len() });
            if args.json {
                println!("{value}");
            } else {
                println!("Best-of-N accuracy: {} ({} instances)", vlrm_merge::eval::pct(acc), recs.len());
            }
            Ok(value)
        }
    })?;
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&json).expect("json serializes") + "\n";
        fs::write(out, text).map_err(|e| Failure::run(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TensorRow {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    bytes: usize,
    role: Option<ComponentRole>,
}

#[derive(Serialize)]
struct InspectReport {
    path: String,
    tensors: Vec<TensorRow>,
    components: BTreeMap<String, usize>,
    unmatched: Vec<String>,
    vocab_size: Option<usize>,
    metadata: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verbatim_mismatches: Option<Vec<String>>,
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    echo_config("inspect", &args);
    let config = load_manifest(args.manifest.as_deref())?;
    let rules = match args.rules {
        RulesFor::Merged => config.merged_rules(),
        RulesFor::Pre => config.rules(ModelKind::Pre).to_vec(),
        RulesFor::Lvlm => config.rules(ModelKind::Lvlm).to_vec(),
        RulesFor::Rm => config.rules(ModelKind::Rm).to_vec(),
    };
    let ckpt = read_checkpoint_with_vocab(&args.checkpoint, args.vocab.as_deref()).map_err(Failure::run)?;

    let (map, unmatched) = match classify_tensors(&ckpt, &rules) {
        Ok(m) => (Some(m), Vec::new()),
        Err(vlrm_merge::manifest::ManifestError::Unmatched(names)) => (None, names),
        Err(e) => return Err(Failure::run(e)),
    };
    let role_of = |name: &str| map.as_ref().and_then(|m| m.role(name));
    let tensors: Vec<TensorRow> = ckpt
        .tensors
        .values()
        .map(|t| TensorRow {
            name: t.name.clone(),
            dtype: t.dtype.to_string(),
            shape: t.shape.clone(),
            bytes: t.data.len(),
            role: role_of(&t.name),
        })
        .collect();
    let mut components: BTreeMap<String, usize> = ComponentRole::ALL.iter().map(|r| (r.to_string(), 0)).collect();
    if let Some(m) = &map {
        for (role, n) in m.counts() {
            components.insert(role.to_string(), n);
        }
    }

    let mut mismatches: Option<Vec<String>> = None;
    let mut compare = |path: &Path, kind: ModelKind, roles: &[ComponentRole]| -> CmdResult {
        let reference = read_checkpoint_with_vocab(path, None).map_err(Failure::run)?;
        let reference = ClassifiedModel::classify(reference, config.rules(kind)).map_err(Failure::run)?;
        mismatches
            .get_or_insert_with(Vec::new)
            .extend(verbatim_mismatches(&ckpt, &reference, roles));
        Ok(())
    };
    if let Some(p) = &args.lvlm {
        compare(p, ModelKind::Lvlm, &[ComponentRole::VisionEncoder, ComponentRole::Adapter])?;
    }
    if let Some(p) = &args.rm {
        compare(p, ModelKind::Rm, &[ComponentRole::RMHead])?;
    }

    let report = InspectReport {
        path: args.checkpoint.display().to_string(),
        tensors,
        components,
        unmatched: unmatched.clone(),
        vocab_size: ckpt.vocab.as_ref().map(|v| v.len()),
        metadata: ckpt.metadata.clone(),
        verbatim_mismatches: mismatches.clone(),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print_inspect(&report);
    }
    if !unmatched.is_empty() {
        return Err(Failure::run(format!("unmatched tensors: {}", unmatched.join(", "))));
    }
    if let Some(m) = mismatches.filter(|m| !m.is_empty()) {
        return Err(Failure::run(format!("tensors differ from reference: {}", m.join(", "))));
    }
    Ok(())
}

fn print_inspect(r: &InspectReport) {
    println!("checkpoint: {}", r.path);
    let w = r.tensors.iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
    println!("{:<w$}  {:<5}  {:<14}  {:>9}  role", "name", "dtype", "shape", "bytes");
    for t in &r.tensors {
        let role = t.role.map(|r| r.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:<w$}  {:<5}  {:<14}  {:>9}  {role}",
            t.name,
            t.dtype,
            format!("{:?}", t.shape),
            t.bytes
        );
    }
    println!("components:");
    for (role, n) in &r.components {
        let state = if *n > 0 { "present" } else { "absent" };
        println!("  {role}: {state} ({n} tensors)");
    }
    if let Some(v) = r.vocab_size {
        println!("vocab: {v} tokens");
    }
    if !r.metadata.is_empty() {
        println!("metadata:");
        for (k, v) in &r.metadata {
            println!("  {k} = {v}");
        }
    }
    if let Some(m) = &r.verbatim_mismatches {
        if m.is_empty() {
            println!("verbatim components: identical to reference");
        } else {
            println!("verbatim components: {} differ", m.len());
        }
    }
    for u in &r.unmatched {
        println!("unmatched: {u}");
    }
}

fn cmd_toy(args: ToyArgs) -> CmdResult {
    echo_config("toy", &args);
    let paths = write_toy(&args.out, args.seed).map_err(Failure::run)?;
    println!("pre: {}", paths.pre.display());
    println!("lvlm: {}", paths.lvlm.display());
    println!("rm: {}", paths.rm.display());
    println!("manifest: {}", paths.manifest.display());
    println!("pairwise: {}", paths.pairwise.display());
    println!("bon: {}", paths.bon.display());
    println!("validation: {}", paths.validation.display());
    println!("sweep config: {}", paths.sweep_config.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            usage(ErrorKind::ValueValidation, "--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
