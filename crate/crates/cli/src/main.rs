//! `tmepsr` command-line entry point.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tmepsr::analysis::{
    self, ablation_grid, adjusted_rand_index, divisors, efficiency_bench, gamma_interval_analysis, gating_strategy_sweep,
    generate_synthetic, head_sweep, mi_strategy_sweep, mu_clustering, write_labels, AblationRow, AnalysisError, BenchRow,
    BenchSpec, HeadSweepRow, StrategyRow, SyntheticSpec, TrainBench, HOUR,
};
use tmepsr::dataset::{build_corpus, load_interactions, write_interactions, Corpus, DataError};
use tmepsr::metrics::EvalResult;
use tmepsr::model::{
    evaluate, load_checkpoint, save_checkpoint, thread_pool, train_with, EpochReport, EvalTarget, ModelError,
    TrainOptions,
};

use config::{resolve_config, ConfigOverrides};
use manifest::Manifest;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Usage(m),
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(m) => m.into(),
            AnalysisError::Precondition(m) | AnalysisError::Infeasible(m) => CliError::Usage(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tmepsr", version, about = "Time-aware multi-interest explainable sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a TSV log into a corpus directory
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save the best checkpoint
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on a corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV log or prepared corpus directory
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Target::Test)]
        target: Target,
        /// Cutoff K (defaults to the checkpoint's eval_k)
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a grid of strategy variants
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = Grid::Toggles)]
        grid: Grid,
        /// Widths for the head sweep; H runs over all divisors of each
        #[arg(long, value_delimiter = ',', default_values_t = [60, 120])]
        d_list: Vec<usize>,
    },
    /// Gate and alignment-weight analyses of a trained checkpoint
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cluster count for the alignment weights
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Planted labels written by `synth`; adds the adjusted Rand index
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Timing benchmark of incremental inference and training
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 240)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 6, 8])]
        heads: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [100, 1000, 5000])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_baselines: bool,
        #[arg(long)]
        no_full_forward: bool,
        #[arg(long)]
        no_training: bool,
    },
    /// Generate a planted synthetic corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 300)]
        items: usize,
        #[arg(long, default_value_t = 200)]
        expls: usize,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Break successor chains after gaps longer than this many hours
        #[arg(long)]
        session_gap_hours: Option<f64>,
        /// Give each rhythm group its own clusters
        #[arg(long)]
        rhythm_clusters: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TSV log or prepared corpus directory
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file of config keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// All 8 on/off combinations of time, multi-interest and explanation
    Toggles,
    Gating,
    Mi,
    Heads,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// A prepared corpus directory (with `corpus.json`) or a raw TSV log.
fn load_corpus(path: &Path) -> CliResult<Corpus> {
    if path.is_dir() {
        let file = path.join("corpus.json");
        serde_json::from_str(&read(&file)?).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))
    } else {
        Ok(build_corpus(&load_interactions(path)?)?)
    }
}

fn metrics_csv(results: &[EvalResult], dataset: &str, hash: &str, seed: u64) -> String {
    let mut out = format!("{},seed\n", EvalResult::CSV_HEADER);
    for r in results {
        out.push_str(&format!("{},{seed}\n", r.csv_row(dataset, hash)));
    }
    out
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or("corpus".into(), |s| s.to_string_lossy().into_owned())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Prepare { input, out } => prepare(&input, &out),
        Command::Train { run } => train_cmd(run),
        Command::Eval {
            checkpoint,
            input,
            out,
            target,
            k,
        } => eval_cmd(&checkpoint, &input, &out, target, k),
        Command::Ablate { run, grid, d_list } => ablate_cmd(run, grid, &d_list),
        Command::Analyze {
            checkpoint,
            input,
            out,
            k,
            labels,
            seed,
        } => analyze_cmd(&checkpoint, &input, &out, k, labels.as_deref(), seed),
        Command::Bench {
            out,
            d,
            heads,
            lengths,
            batch_size,
            seed,
            no_baselines,
            no_full_forward,
            no_training,
        } => {
            let spec = BenchSpec {
                d,
                heads,
                lengths,
                batch_size,
                seed,
                baselines: !no_baselines,
                full_forward: !no_full_forward,
                training: (!no_training).then_some(TrainBench { seq_len: 50, vocab: 1000 }),
                ..Default::default()
            };
            bench_cmd(&spec, &out)
        }
        Command::Synth {
            out,
            users,
            items,
            expls,
            clusters,
            seed,
            session_gap_hours,
            rhythm_clusters,
        } => {
            let spec = SyntheticSpec {
                user_count: users,
                item_count: items,
                expl_count: expls,
                cluster_count: clusters,
                seed,
                session_gap: session_gap_hours.map(|h| h * HOUR),
                rhythm_clusters,
                ..Default::default()
            };
            synth_cmd(&spec, &out)
        }
    }
}

fn prepare(input: &Path, out: &Path) -> CliResult<()> {
    let mut manifest = Manifest::start("prepare", None, None);
    manifest.add_input(input)?;
    let corpus = build_corpus(&load_interactions(input)?)?;
    create_dir(out)?;
    let corpus_path = out.join("corpus.json");
    let json = serde_json::to_string(&corpus).expect("corpus serializes");
    write(&corpus_path, &json)?;
    let items_path = out.join("items.txt");
    write(&items_path, &(corpus.items.ids().join("\n") + "\n"))?;
    let expls_path = out.join("expls.txt");
    write(&expls_path, &(corpus.expls.ids().join("\n") + "\n"))?;
    let summary = serde_json::json!({
        "users": corpus.sequences.len(),
        "items": corpus.items.len(),
        "explanations": corpus.expls.len(),
        "interactions": corpus.interaction_count(),
        "dropped_users": corpus.dropped_users,
        "content_hash": analysis::content_hash(&corpus),
    });
    let summary_path = out.join("summary.json");
    write(&summary_path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    eprintln!(
        "prepared {} users, {} items, {} explanations ({} users dropped)",
        corpus.sequences.len(),
        corpus.items.len(),
        corpus.expls.len(),
        corpus.dropped_users
    );
    manifest.finish(out, &[corpus_path, items_path, expls_path, summary_path])
}

fn train_cmd(run: RunArgs) -> CliResult<()> {
    let config = resolve_config(run.config.as_deref(), &run.overrides)?;
    let mut manifest = Manifest::start("train", Some(&config), Some(config.seed));
    manifest.add_input(&run.input)?;
    if let Some(c) = &run.config {
        manifest.add_input(c)?;
    }
    let corpus = load_corpus(&run.input)?;
    create_dir(&run.out)?;
    let log = |e: &EpochReport| {
        let valid = e.valid_rec.map_or(String::new(), |r| format!(" valid N@{} {:.4}", r.k, r.ndcg));
        eprintln!("epoch {:3} loss {:.5}{valid} ({:.1}s)", e.epoch, e.loss, e.seconds);
    };
    let pool = thread_pool();
    let (model, report) = pool.install(|| {
        train_with(
            &corpus,
            &config,
            &TrainOptions {
                validate: true,
                on_epoch: Some(&log),
            },
        )
    })?;
    let ckpt = run.out.join("checkpoint.json");
    save_checkpoint(&ckpt, &model, &corpus.items, &corpus.expls)?;
    let log_path = run.out.join("train_log.csv");
    write(&log_path, &report.to_csv())?;
    let (rec, exp) = pool.install(|| evaluate(&model, &corpus.splits(), EvalTarget::Test, config.eval_k))?;
    let metrics_path = run.out.join("metrics.csv");
    write(&metrics_path, &metrics_csv(&[rec, exp], &dataset_name(&run.input), &config.hash(), config.seed))?;
    eprintln!("test rec R@{k} {:.4} N@{k} {:.4}", rec.recall, rec.ndcg, k = rec.k);
    manifest.finish(&run.out, &[ckpt, log_path, metrics_path])
}

fn eval_cmd(checkpoint: &Path, input: &Path, out: &Path, target: Target, k: Option<usize>) -> CliResult<()> {
    let (model, items, expls) = load_checkpoint(checkpoint)?;
    let config = model.config.clone();
    let mut manifest = Manifest::start("eval", Some(&config), Some(config.seed));
    manifest.add_input(checkpoint)?;
    manifest.add_input(input)?;
    let corpus = load_corpus(input)?.reindex(&items, &expls)?;
    let k = k.unwrap_or(config.eval_k);
    let target = match target {
        Target::Valid => EvalTarget::Valid,
        Target::Test => EvalTarget::Test,
    };
    let (rec, exp) = thread_pool().install(|| evaluate(&model, &corpus.splits(), target, k))?;
    create_dir(out)?;
    let path = out.join("metrics.csv");
    write(&path, &metrics_csv(&[rec, exp], &dataset_name(input), &config.hash(), config.seed))?;
    for r in [rec, exp] {
        eprintln!("{} R@{k} {:.4} N@{k} {:.4}", r.task, r.recall, r.ndcg);
    }
    manifest.finish(out, &[path])
}

fn ablate_cmd(run: RunArgs, grid: Grid, d_list: &[usize]) -> CliResult<()> {
    let config = resolve_config(run.config.as_deref(), &run.overrides)?;
    let mut manifest = Manifest::start("ablate", Some(&config), Some(config.seed));
    manifest.add_input(&run.input)?;
    let corpus = load_corpus(&run.input)?;
    create_dir(&run.out)?;
    let pool = thread_pool();
    let (name, csv) = pool.install(|| -> CliResult<(&str, String)> {
        Ok(match grid {
            Grid::Toggles => ("ablation.csv", AblationRow::to_csv(&ablation_grid(&corpus, &config)?)),
            Grid::Gating => ("gating.csv", StrategyRow::to_csv(&gating_strategy_sweep(&corpus, &config)?)),
            Grid::Mi => ("mi.csv", StrategyRow::to_csv(&mi_strategy_sweep(&corpus, &config)?)),
            Grid::Heads => {
                let plan: Vec<(usize, Vec<usize>)> = d_list.iter().map(|&d| (d, divisors(d))).collect();
                ("heads.csv", HeadSweepRow::to_csv(&head_sweep(&corpus, &config, &plan)?))
            }
        })
    })?;
    let path = run.out.join(name);
    write(&path, &csv)?;
    manifest.finish(&run.out, &[path])
}

/// `user_id → planted alignment name` from a `synth` labels file.
fn read_labels(path: &Path) -> CliResult<std::collections::HashMap<String, String>> {
    let text = read(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing `{name}` column", path.display())))
    };
    let (u, a) = (col("user_id")?, col("alignment")?);
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[u].to_string(), f[a].to_string())
        })
        .collect())
}

fn analyze_cmd(checkpoint: &Path, input: &Path, out: &Path, k: usize, labels: Option<&Path>, seed: u64) -> CliResult<()> {
    let (model, items, expls) = load_checkpoint(checkpoint)?;
    let config = model.config.clone();
    let mut manifest = Manifest::start("analyze", Some(&config), Some(seed));
    manifest.add_input(checkpoint)?;
    manifest.add_input(input)?;
    if let Some(l) = labels {
        manifest.add_input(l)?;
    }
    let corpus = load_corpus(input)?.reindex(&items, &expls)?;
    create_dir(out)?;
    let resolved = config.resolved();
    let mut outputs = Vec::new();
    let pool = thread_pool();
    if resolved.strategy == tmepsr::time_encoder::TimeStrategy::Gated {
        let gamma = pool.install(|| gamma_interval_analysis(&model, &corpus))?;
        let scatter = out.join("gamma_scatter.csv");
        write(&scatter, &gamma.scatter_csv(&corpus, &config))?;
        let fit = out.join("gamma_fit.csv");
        write(&fit, &gamma.fit_csv(&config))?;
        eprintln!("gamma_rec slope {:.3e} r {:.3}", gamma.rec.slope, gamma.rec.r);
        outputs.extend([scatter, fit]);
    } else {
        eprintln!("skipping gate analysis: time strategy is {}", resolved.strategy);
    }
    if resolved.mi_mode == tmepsr::alignment::MiMode::DynamicDual {
        let mu = pool.install(|| mu_clustering(&model, &corpus, k, seed))?;
        let path = out.join("mu_clusters.csv");
        write(&path, &mu.to_csv(&corpus, &config))?;
        outputs.push(path);
        if let Some(l) = labels {
            let planted = read_labels(l)?;
            let mut names: Vec<&String> = planted.values().collect();
            names.sort();
            names.dedup();
            let truth = corpus
                .users
                .iter()
                .map(|u| {
                    planted
                        .get(u)
                        .map(|a| names.iter().position(|n| *n == a).expect("name listed"))
                        .ok_or_else(|| CliError::Data(format!("user `{u}` has no planted label")))
                })
                .collect::<CliResult<Vec<usize>>>()?;
            let ari = adjusted_rand_index(&truth, &mu.clusters.assignments);
            let path = out.join("mu_ari.csv");
            write(&path, &format!("k,ari,seed,config_hash\n{k},{ari:.6},{seed},{}\n", config.hash()))?;
            eprintln!("adjusted Rand index {ari:.4}");
            outputs.push(path);
        }
    } else {
        eprintln!("skipping alignment-weight clustering: mi_mode is {}", resolved.mi_mode);
    }
    manifest.finish(out, &outputs)
}

fn bench_cmd(spec: &BenchSpec, out: &Path) -> CliResult<()> {
    let manifest = Manifest::start("bench", None, Some(spec.seed)).with_extra("bench", spec);
    let rows = efficiency_bench(spec)?;
    create_dir(out)?;
    let path = out.join("bench.csv");
    write(&path, &BenchRow::to_csv(&rows, spec))?;
    manifest.finish(out, &[path])
}

fn synth_cmd(spec: &SyntheticSpec, out: &Path) -> CliResult<()> {
    let manifest = Manifest::start("synth", None, Some(spec.seed)).with_extra("synthetic", spec);
    let corpus = generate_synthetic(spec)?;
    create_dir(out)?;
    let tsv = out.join("interactions.tsv");
    write_interactions(&tsv, &corpus.interactions)?;
    let labels = out.join("labels.csv");
    write_labels(&labels, &corpus.users)?;
    manifest.finish(out, &[tsv, labels])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(CliError::Usage(String::new()).code(), 1);
        assert_eq!(CliError::Data(String::new()).code(), 2);
        assert_eq!(CliError::Numeric(String::new()).code(), 3);
        let numeric: CliError = ModelError::Divergence { epoch: 1, batch: 0 }.into();
        assert_eq!(numeric.code(), 3);
        let missing: CliError = ModelError::Checkpoint("gone".into()).into();
        assert_eq!(missing.code(), 2);
    }

    #[test]
    fn parses_headline_flags() {
        let cli = Cli::try_parse_from([
            "tmepsr", "train", "--input", "x.tsv", "--out", "o", "--alpha", "0.9", "--beta", "0.1", "--d", "50", "--H", "2",
        ])
        .unwrap();
        let Command::Train { run } = cli.command else {
            panic!("expected train")
        };
        let c = resolve_config(None, &run.overrides).unwrap();
        assert_eq!((c.alpha, c.beta, c.d, c.heads), (0.9, 0.1, 50, 2));
    }
}
