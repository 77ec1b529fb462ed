use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::json;

use tripletkit::bench::{render_table, results_csv, run_grid, BenchConfig};
use tripletkit::datagen::{generate, GenSpec};
use tripletkit::dataset::{LabeledDataset, FEATURE_PREFIX};
use tripletkit::diagnostics::TrainLog;
use tripletkit::evalkit::{evaluate, inject_distractors, EvalProtocol, EvalResult, Placement, QueryMode};
use tripletkit::losses::{Averaging, LossKind, MarginMode, Metric};
use tripletkit::mlp::{embed, Checkpoint, MlpParams};
use tripletkit::optim::Schedule;
use tripletkit::train::{train, RunConfig};
use tripletkit::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_COLLAPSE: u8 = 4;

#[derive(Parser)]
#[command(name = "tripletkit", version, about = "Train and evaluate triplet-loss embeddings")]
struct Cli {
    /// JSON file with settings for the chosen command; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short = 'o', long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity-cluster dataset.
    Datagen(DatagenArgs),
    /// Train an embedding network.
    Train(TrainArgs),
    /// Embed query and gallery sets with a checkpoint and score retrieval.
    Evaluate(EvaluateArgs),
    /// Train and score a grid of losses × margins on one shared split.
    BenchLosses(BenchArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    identity_spread: Option<f64>,
    #[arg(long)]
    intra_spread: Option<f64>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    /// Hold out this many identities and write them as query.csv / gallery.csv.
    #[arg(long)]
    test_ids: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
    Pretrained,
}

#[derive(Args)]
struct TrainArgs {
    /// Training features CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    /// Hinge margin or "soft".
    #[arg(long)]
    margin: Option<MarginMode>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    /// Hidden and embedding widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    t0: Option<u64>,
    #[arg(long)]
    t1: Option<u64>,
    #[arg(long, value_enum)]
    averaging: Option<AveragingArg>,
    #[arg(long)]
    ohm_fraction: Option<f64>,
    #[arg(long)]
    ohm_refresh: Option<u64>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Keep training after the collapse alarm fires.
    #[arg(long)]
    no_abort: bool,
    /// Also write every per-term loss value to train_terms.csv.
    #[arg(long)]
    dump_terms: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    All,
    Nonzero,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Append,
    Prepend,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Mean-pool queries of one identity and camera before ranking.
    #[arg(long)]
    multi_query: bool,
    /// Keep gallery items that share identity and camera with the query.
    #[arg(long)]
    keep_same_camera: bool,
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long)]
    metric: Option<Metric>,
    /// Extra gallery items of identities absent from the queries.
    #[arg(long)]
    distractors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "append")]
    placement: PlacementArg,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    losses: Option<Vec<LossKind>>,
    #[arg(long, value_delimiter = ',')]
    margins: Option<Vec<MarginMode>>,
    #[arg(long)]
    ids: Option<usize>,
    #[arg(long)]
    per_id: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    val_ids: Option<usize>,
    #[arg(long)]
    t0: Option<u64>,
    #[arg(long)]
    t1: Option<u64>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Self { code: EXIT_USAGE, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => EXIT_USAGE,
            Some(Error::Collapse { .. }) => EXIT_COLLAPSE,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Datagen(a) => cmd_datagen(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::BenchLosses(a) => cmd_bench(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("bad config {}", path.display()))
        .map_err(Failure::usage)
}

fn out_dir(cli: &Cli, fallback: Option<&PathBuf>) -> Result<PathBuf, Failure> {
    let dir = cli
        .out
        .clone()
        .or_else(|| fallback.cloned())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(|e| Failure { code: EXIT_DATA, error: e })?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(|e| Failure { code: EXIT_DATA, error: e })
}

fn load_features(path: &Path) -> Result<LabeledDataset, Failure> {
    if !path.exists() {
        return Err(Failure::usage(anyhow!("{} does not exist", path.display())));
    }
    Ok(LabeledDataset::load_csv(path, FEATURE_PREFIX)
        .with_context(|| format!("cannot load {}", path.display()))?)
}

fn cmd_datagen(cli: &Cli, a: &DatagenArgs) -> CmdResult {
    let mut spec: GenSpec = load_config(cli.config.as_deref())?;
    if cli.config.is_none() {
        let missing: Vec<&str> = [("--ids", a.ids.is_none()), ("--per-id", a.per_id.is_none()), ("--dim", a.dim.is_none())]
            .into_iter()
            .filter_map(|(name, absent)| absent.then_some(name))
            .collect();
        if !missing.is_empty() {
            return Err(Failure::usage(anyhow!("missing required flag(s): {}", missing.join(", "))));
        }
    }
    if let Some(v) = a.ids {
        spec.num_identities = v;
    }
    if let Some(v) = a.per_id {
        spec.items_per_identity = v;
    }
    if let Some(v) = a.dim {
        spec.feature_dim = v;
    }
    if let Some(v) = a.identity_spread {
        spec.identity_spread = v;
    }
    if let Some(v) = a.intra_spread {
        spec.intra_spread = v;
    }
    if let Some(v) = a.cameras {
        spec.num_cameras = v;
    }
    if let Some(v) = a.outlier_rate {
        spec.outlier_rate = v;
    }
    if let Some(v) = cli.seed {
        spec.seed = v;
    }
    let data = generate(&spec)?;
    let dir = out_dir(cli, None)?;
    let train_set = match a.test_ids {
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let (train_set, test) = data.split_identities(n, &mut rng)?;
            let (query, gallery) = test.query_gallery_split()?;
            query.save_csv(dir.join("query.csv"), FEATURE_PREFIX)?;
            gallery.save_csv(dir.join("gallery.csv"), FEATURE_PREFIX)?;
            train_set
        }
        None => data,
    };
    train_set.save_csv(dir.join("train.csv"), FEATURE_PREFIX)?;
    let echo = serde_json::to_string_pretty(&spec).map_err(anyhow::Error::from)?;
    write_file(&dir.join("genspec.json"), &(echo + "\n"))?;
    println!(
        "wrote {} training rows ({} identities) to {}",
        train_set.len(),
        train_set.num_identities(),
        dir.display()
    );
    Ok(())
}

fn run_config(cli: &Cli, a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg: RunConfig = load_config(cli.config.as_deref())?;
    if let Some(v) = &a.data {
        cfg.train_data = Some(v.clone());
    }
    if let Some(v) = a.loss {
        cfg.loss = v;
    }
    if let Some(v) = a.margin {
        cfg.margin = v;
    }
    if let Some(v) = a.metric {
        cfg.metric = v;
    }
    if let Some(v) = a.p {
        cfg.p = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.b {
        cfg.b = v;
    }
    if let Some(v) = &a.layers {
        cfg.layer_widths = v.clone();
    }
    if let Some(p) = a.preset {
        cfg.schedule = match p {
            Preset::Full => Schedule::full(),
            Preset::Desk => Schedule::desk(),
            Preset::Pretrained => Schedule::pretrained(),
        };
    }
    if let Some(v) = a.eps0 {
        cfg.schedule.eps0 = v;
    }
    if let Some(v) = a.t0 {
        cfg.schedule.t0 = v;
    }
    if let Some(v) = a.t1 {
        cfg.schedule.t1 = v;
    }
    if let Some(v) = a.averaging {
        cfg.averaging = Some(match v {
            AveragingArg::All => Averaging::All,
            AveragingArg::Nonzero => Averaging::Nonzero,
        });
    }
    if let Some(v) = a.ohm_fraction {
        cfg.ohm.sample_fraction = v;
    }
    if let Some(v) = a.ohm_refresh {
        cfg.ohm.refresh_every = v;
    }
    if let Some(v) = a.init_scale {
        cfg.init_output_scale = v;
    }
    if a.no_abort {
        cfg.abort_on_collapse = false;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.out {
        cfg.out_dir = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let cfg = run_config(cli, a)?;
    let data_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| Failure::usage(anyhow!("no training data given (--data or train_data in the config)")))?;
    let data = load_features(&data_path)?;
    let dir = out_dir(cli, cfg.out_dir.as_ref())?;
    write_file(&dir.join("run_config.json"), &(cfg.to_json()? + "\n"))?;
    let log_path = dir.join("train_log.csv");
    let mut log = TrainLog::to_file(&log_path)?;
    if a.dump_terms {
        log = log.with_term_dump(dir.join("train_terms.csv"))?;
    }
    let outcome = train(&cfg, &data, &mut log)?;
    if let Some(it) = outcome.collapsed_at {
        if cfg.abort_on_collapse {
            return Err(Error::Collapse { iteration: it }.into());
        }
        eprintln!("warning: collapse alarm fired at iteration {it}");
    }
    let ckpt = Checkpoint::new(&outcome.params, cfg.seed, Some(outcome.optim));
    ckpt.save(dir.join("checkpoint.json"))?;
    if let Some(last) = log.records().last() {
        println!(
            "trained {} iterations; final loss {:.4}, active fraction {:.3}",
            outcome.iterations, last.loss_mean, last.active_fraction
        );
    }
    println!("checkpoint and log written to {}", dir.display());
    Ok(())
}

fn embedded(params: &MlpParams, set: &LabeledDataset) -> tripletkit::Result<LabeledDataset> {
    set.with_features(embed(params, set.features())?)
}

fn print_summary(label: &str, r: &EvalResult) {
    let pct = |k| r.rank(k).map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "n/a".into());
    println!(
        "{label}mAP {:.2}%  rank-1 {}  rank-5 {}  ({} queries, {} skipped)",
        100.0 * r.map,
        pct(1),
        pct(5),
        r.num_queries,
        r.num_skipped
    );
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> CmdResult {
    let mut protocol: EvalProtocol = load_config(cli.config.as_deref())?;
    if a.multi_query {
        protocol.mode = QueryMode::MultiQuery;
    }
    if a.keep_same_camera {
        protocol.exclude_same_camera_same_id = false;
    }
    if let Some(r) = &a.ranks {
        protocol.cmc_ranks = r.clone();
    }
    if let Some(m) = a.metric {
        protocol.metric = m;
    }
    protocol.validate()?;
    if !a.checkpoint.exists() {
        return Err(Failure::usage(anyhow!("{} does not exist", a.checkpoint.display())));
    }
    let params = Checkpoint::load(&a.checkpoint)?.params()?;
    let query = load_features(&a.query)?;
    let gallery = load_features(&a.gallery)?;
    for (name, set) in [("query", &query), ("gallery", &gallery)] {
        if set.dim() != params.input_dim() {
            return Err(Failure {
                code: EXIT_DATA,
                error: anyhow!(
                    "{name} rows have width {} but the checkpoint expects {}",
                    set.dim(),
                    params.input_dim()
                ),
            });
        }
    }
    let q = embedded(&params, &query)?;
    let g = embedded(&params, &gallery)?;
    let result = evaluate(&q, &g, &protocol)?;
    print_summary("", &result);
    let mut report = serde_json::to_value(&result).map_err(anyhow::Error::from)?;
    if let Some(path) = &a.distractors {
        let extra = load_features(path)?;
        let extra = embedded(&params, &extra)?;
        let placement = match a.placement {
            PlacementArg::Append => Placement::Append,
            PlacementArg::Prepend => Placement::Prepend,
        };
        let bigger = inject_distractors(&g, &extra, &q, placement)?;
        let with = evaluate(&q, &bigger, &protocol)?;
        print_summary("with distractors: ", &with);
        report["distractors"] = json!({
            "count": extra.len(),
            "map_before": result.map,
            "map_after": with.map,
            "cmc_after": with.cmc,
        });
    }
    let dir = out_dir(cli, None)?;
    let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    write_file(&dir.join("eval_report.json"), &(text + "\n"))?;
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> CmdResult {
    let mut cfg: BenchConfig = load_config(cli.config.as_deref())?;
    if let Some(v) = &a.losses {
        cfg.losses = v.clone();
    }
    if let Some(v) = &a.margins {
        cfg.margins = v.clone();
    }
    if let Some(v) = a.ids {
        cfg.data.num_identities = v;
    }
    if let Some(v) = a.per_id {
        cfg.data.items_per_identity = v;
    }
    if let Some(v) = a.dim {
        cfg.data.feature_dim = v;
    }
    if let Some(v) = a.val_ids {
        cfg.validation_identities = v;
    }
    if let Some(v) = a.t0 {
        cfg.run.schedule.t0 = v;
    }
    if let Some(v) = a.t1 {
        cfg.run.schedule.t1 = v;
    }
    if let Some(v) = cli.seed {
        cfg.run.seed = v;
        cfg.data.seed = v;
    }
    cfg.run.validate()?;
    let cells = run_grid(&cfg)?;
    let dir = out_dir(cli, None)?;
    write_file(&dir.join("bench.csv"), &results_csv(&cells))?;
    let table = render_table(&cells);
    write_file(&dir.join("bench.txt"), &table)?;
    print!("{table}");
    for c in cells.iter().filter(|c| c.failed()) {
        eprintln!("cell {} / {} failed: {}", c.loss, c.margin, c.error.as_deref().unwrap_or(""));
    }
    Ok(())
}
