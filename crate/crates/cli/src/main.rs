use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgar_core::checkpoint::{load_reasoner, save_diffusion};
use dgar_core::config::{parse_pairs, Ablations, Method, TrainConfig};
use dgar_core::data::{build_task_stream, load_quadruples, read_dataset, write_dataset, Split, SplitRatios};
use dgar_core::diffusion::{pretrain, DiffusionModel, DmTrainConfig, Embeddings, NoiseSchedule};
use dgar_core::eval::{evaluate_stream, Filter, MetricsMatrix};
use dgar_core::manifest::{diffusion_path, load_run_checkpoints, reasoner_path, CheckpointWriter, RunManifest};
use dgar_core::report::{cell_records, plot_forgetting, plot_mrr_curves, summary_table, to_jsonl, SummaryRow};
use dgar_core::rng::{self, tag};
use dgar_core::toy::{generate_toy, ToyConfig};
use dgar_core::trainer::{task_states, train_stream, StreamContext};
use dgar_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dgar", version, about = "Continual temporal knowledge graph reasoning with generative replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a quadruple file into a task-stream dataset directory.
    Ingest(IngestArgs),
    /// Write a synthetic task-stream dataset.
    Toy(ToyArgs),
    /// Pretrain the diffusion model on the first task of a trained run.
    PretrainDm(PretrainArgs),
    /// Train over the whole stream, writing checkpoints and a manifest.
    Train(TrainArgs),
    /// Evaluate a run's checkpoints on every test set.
    Eval(EvalArgs),
    /// Compare several evaluation directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Whitespace-separated `subject relation object time` file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<u64>,
    /// `train,valid,test` fractions.
    #[arg(long)]
    split_ratios: Option<String>,
}

#[derive(Args)]
struct ToyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 50)]
    entities: usize,
    #[arg(long, default_value_t = 8)]
    relations: usize,
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    #[arg(long, default_value_t = 200)]
    facts_per_task: usize,
    #[arg(long, default_value_t = 0.3)]
    recurrence: f64,
}

#[derive(Args)]
struct HyperArgs {
    /// Start from the small synthetic-stream preset instead of the defaults.
    #[arg(long)]
    toy_preset: bool,
    /// Override any config key, e.g. `--set dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory holding the first task's reasoner checkpoint.
    #[arg(long)]
    checkpoints: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    no_hp: bool,
    #[arg(long)]
    no_gr: bool,
    #[arg(long)]
    no_ar: bool,
    #[arg(long)]
    no_guider: bool,
    #[arg(long)]
    no_lr: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dgar,
    Ft,
    Er,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterArg {
    Raw,
    TimeAware,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    filter: FilterArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation output directories to compare.
    #[arg(long = "eval", required = true)]
    evals: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Parse { .. } | Error::EmptyDataset(_) | Error::Config(_) | Error::Io { .. } => 2,
                Error::MissingCheckpoint { .. } | Error::StreamContinuity(_) | Error::Checkpoint { .. } => 3,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_config_file(path: Option<&Path>) -> CliResult<BTreeMap<String, String>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            Ok(parse_pairs(&text)?)
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn parse_ratios(text: &str) -> CliResult<SplitRatios> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad split ratios {text:?}")))?;
    if v.len() != 3 {
        return Err(CliError::Usage("split ratios need three values".into()));
    }
    let r = SplitRatios {
        train: v[0],
        valid: v[1],
        test: v[2],
    };
    r.validate()?;
    Ok(r)
}

fn cmd_ingest(args: IngestArgs) -> CliResult<()> {
    let mut file = read_config_file(args.common.config.as_deref())?;
    let data = args
        .data
        .or_else(|| file.remove("data.path").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("--data (or data.path in the config) is required".into()))?;
    let granularity = match (args.granularity, file.remove("data.granularity")) {
        (Some(g), _) => g,
        (None, Some(g)) => g.parse().map_err(|_| CliError::Usage(format!("bad granularity {g:?}")))?,
        (None, None) => 1,
    };
    let ratios = match args.split_ratios.or_else(|| file.remove("data.split_ratios")) {
        Some(t) => parse_ratios(&t)?,
        None => SplitRatios::default(),
    };
    let seed = match (args.common.seed, file.remove("seed")) {
        (Some(s), _) => s,
        (None, Some(s)) => s.parse().map_err(|_| CliError::Usage(format!("bad seed {s:?}")))?,
        (None, None) => 0,
    };
    let (facts, vocab) = load_quadruples(&data, granularity)?;
    let stream = build_task_stream(&facts, vocab, ratios, seed)?;
    write_dataset(&args.common.out, &stream)?;
    log::info!(
        "wrote {} tasks ({} entities, {} relations) to {}",
        stream.len(),
        vocab.num_entities,
        vocab.num_relations,
        args.common.out.display()
    );
    Ok(())
}

fn cmd_toy(args: ToyArgs) -> CliResult<()> {
    let seed = args.common.seed.unwrap_or(0);
    let cfg = ToyConfig {
        entities: args.entities,
        relations: args.relations,
        tasks: args.tasks,
        facts_per_task: args.facts_per_task,
        recurrence: args.recurrence,
        seed,
        ..ToyConfig::default()
    };
    let (facts, vocab) = generate_toy(&cfg)?;
    let stream = build_task_stream(&facts, vocab, SplitRatios::default(), seed)?;
    write_dataset(&args.common.out, &stream)?;
    let mut raw = String::new();
    for q in &facts {
        raw.push_str(&format!("{}\t{}\t{}\t{}\n", q.subject, q.relation, q.object, q.timestamp));
    }
    write_file(&args.common.out.join("raw.txt"), raw)?;
    Ok(())
}

/// Config from preset, file, `--set` and finally the dedicated flags.
fn build_config(
    common: &Common,
    hyper: &HyperArgs,
    method: Option<Method>,
    ablations: Option<Ablations>,
) -> CliResult<TrainConfig> {
    let mut cfg = if hyper.toy_preset {
        TrainConfig::toy()
    } else {
        TrainConfig::default()
    };
    let mut pairs = read_config_file(common.config.as_deref())?;
    pairs.retain(|k, _| !k.starts_with("data."));
    for o in &hyper.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(s) = common.seed {
        pairs.insert("seed".into(), s.to_string());
    }
    if let Some(m) = method {
        pairs.insert("method".into(), m.to_string());
    }
    if let Some(a) = ablations {
        for (on, key) in [
            (a.no_hp, "no_hp"),
            (a.no_gr, "no_gr"),
            (a.no_ar, "no_ar"),
            (a.no_guider, "no_guider"),
            (a.no_lr, "no_lr"),
        ] {
            if on {
                pairs.insert(key.into(), "true".into());
            }
        }
    }
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let method = args.method.map(|m| match m {
        MethodArg::Dgar => Method::Dgar,
        MethodArg::Ft => Method::Ft,
        MethodArg::Er => Method::Er,
    });
    let ablations = Ablations {
        no_hp: args.no_hp,
        no_gr: args.no_gr,
        no_ar: args.no_ar,
        no_guider: args.no_guider,
        no_lr: args.no_lr,
    };
    let cfg = build_config(&args.common, &args.hyper, method, Some(ablations))?;
    let stream = read_dataset(&args.dataset)?;
    let manifest = RunManifest::new(&cfg, &args.dataset, stream.digest(), stream.vocab);
    let mut writer = CheckpointWriter::new(&args.common.out, stream.vocab, manifest)?;
    let run = train_stream(&stream, &cfg, &mut writer)?;
    writer.set_stats(run.stats)?;
    log::info!("trained {} tasks into {}", run.outcomes.len(), args.common.out.display());
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> CliResult<()> {
    let cfg = build_config(&args.common, &args.hyper, None, None)?;
    let stream = read_dataset(&args.dataset)?;
    let path = reasoner_path(&args.checkpoints, 0);
    if !path.exists() {
        return Err(Error::MissingCheckpoint { task: 0, path }.into());
    }
    let params = load_reasoner(&path, stream.vocab)?;
    let ctx = StreamContext::new(&stream)?;
    let states = task_states(&params, &ctx, &cfg, 0)?;
    let schedule = NoiseSchedule::linear(cfg.dm_steps, cfg.beta_start, cfg.beta_end)?;
    let init = DiffusionModel::init(cfg.dim, schedule, cfg.dm_layers, &mut rng::stream(cfg.seed, &[tag::INIT, 1]));
    let dm_cfg = DmTrainConfig {
        epochs: cfg.dm_epochs,
        batch_size: cfg.dm_batch,
        lr: cfg.dm_lr,
        ce_weight: cfg.dm_ce_weight,
        subject_weight: cfg.dm_subject_weight,
    };
    let (dm, losses) = pretrain(
        &init,
        &ctx.stream.tasks[0].tagged(Split::Train),
        Embeddings {
            entity: &states,
            relation: &params.relation,
        },
        &dm_cfg,
        rng::derive_seed(cfg.seed, &[tag::DM_TRAIN, 0]),
    )?;
    create_dir(&args.common.out)?;
    let sha = save_diffusion(&diffusion_path(&args.common.out, 0), &dm, 0)?;
    let summary = json!({
        "checkpoint": diffusion_path(&args.common.out, 0).display().to_string(),
        "sha256": sha,
        "steps": losses.len(),
        "final_loss": losses.last(),
        "config": cfg.to_json(),
    });
    write_file(
        &args.common.out.join("pretrain.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )?;
    Ok(())
}

fn method_label(cfg: &TrainConfig) -> String {
    if cfg.ablations.any() {
        format!("{}[{}]", cfg.method, cfg.ablations.label())
    } else {
        cfg.method.to_string()
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let manifest_path = args.checkpoints.join(dgar_core::manifest::MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingCheckpoint {
            task: 0,
            path: manifest_path,
        }
        .into());
    }
    let manifest = RunManifest::read(&args.checkpoints)?;
    let stream = read_dataset(&args.dataset)?;
    if stream.vocab != manifest.vocab() {
        return Err(Error::Config("dataset vocabulary differs from the run's".into()).into());
    }
    let models = load_run_checkpoints(&args.checkpoints, stream.vocab, stream.len())?;
    let filters = match args.filter {
        FilterArg::Raw => vec![Filter::Raw],
        FilterArg::TimeAware => vec![Filter::TimeAware],
        FilterArg::Both => vec![Filter::Raw, Filter::TimeAware],
    };
    let cfg = &manifest.config;
    let matrices = evaluate_stream(&models, &stream.augmented()?, cfg.window, &filters, cfg.parallelism)?;
    let label = method_label(cfg);
    create_dir(&args.out)?;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for m in &matrices {
        records.extend(cell_records(&label, m));
        rows.push(SummaryRow {
            method: label.clone(),
            filter: m.filter,
            summary: m.summary()?,
        });
        plot_mrr_curves(
            &args.out.join(format!("mrr_{}.svg", m.filter.label())),
            &format!("{label} ({})", m.filter.label()),
            m,
        )?;
        plot_forgetting(
            &args.out.join(format!("forgetting_{}.svg", m.filter.label())),
            &format!("{label} ({})", m.filter.label()),
            &[(label.clone(), m)],
        )?;
    }
    write_file(&args.out.join("cells.jsonl"), to_jsonl(&records)?)?;
    let table = summary_table(&rows);
    write_file(&args.out.join("summary.tsv"), &table)?;
    let metrics = json!({ "method": label, "summary": rows, "matrices": matrices });
    write_file(
        &args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).map_err(Error::from)?,
    )?;
    print!("{table}");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult<()> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut matrices: Vec<(String, MetricsMatrix)> = Vec::new();
    for dir in &args.evals {
        let path = dir.join("metrics.json");
        if !path.exists() {
            return Err(Error::MissingCheckpoint { task: 0, path }.into());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
        let method = value["method"].as_str().unwrap_or("?").to_string();
        let r: Vec<SummaryRow> = serde_json::from_value(value["summary"].clone()).map_err(Error::from)?;
        let m: Vec<MetricsMatrix> = serde_json::from_value(value["matrices"].clone()).map_err(Error::from)?;
        rows.extend(r);
        matrices.extend(m.into_iter().map(|m| (method.clone(), m)));
    }
    create_dir(&args.out)?;
    let table = summary_table(&rows);
    write_file(&args.out.join("comparison.tsv"), &table)?;
    for filter in [Filter::Raw, Filter::TimeAware] {
        let series: Vec<(String, &MetricsMatrix)> = matrices
            .iter()
            .filter(|(_, m)| m.filter == filter)
            .map(|(name, m)| (name.clone(), m))
            .collect();
        if !series.is_empty() {
            plot_forgetting(
                &args.out.join(format!("forgetting_{}.svg", filter.label())),
                &format!("per-task drift ({})", filter.label()),
                &series,
            )?;
        }
    }
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Toy(a) => cmd_toy(a),
        Command::PretrainDm(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
