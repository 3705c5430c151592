use std::fs::File;
use std::io::{stdout, BufReader, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mipd_core::cohort::{CovariateClass, PatientState};
use mipd_core::harness::export::write_all;
use mipd_core::harness::{compare_state_estimators, run_trial, PolicyKind, TrialConfig};
use mipd_core::planner::{train_classes, PlannerConfig, QTable};
use mipd_core::policies::RewardSpec;
use mipd_core::pkpd::model::PopulationModel;
use mipd_service::api::parse_grades;
use mipd_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "mipd", version, about = "Model-informed precision dosing of paclitaxel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train population action values by tree search and save the Q table.
    Train(TrainArgs),
    /// Run a virtual trial for one policy and write metrics and CSVs.
    Bench(BenchArgs),
    /// Compare posterior grade estimates with single-sample grades.
    Estimators(EstimatorArgs),
    /// Print one Q table row as CSV.
    Row(RowArgs),
    /// Serve dosing sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Comma-separated covariate class indices; all classes if omitted.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reward for a grade-4 cycle.
    #[arg(long)]
    grade4_reward: Option<f64>,
    /// JSON planner configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrialArgs {
    /// JSON trial configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated ANC sampling days after each dose.
    #[arg(long, value_delimiter = ',')]
    days: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    policy: PolicyKind,
    #[command(flatten)]
    trial: TrialArgs,
    /// Q table for rl and da-rl.
    #[arg(long)]
    qtable: Option<PathBuf>,
    /// Online episodes per da-rl decision.
    #[arg(long)]
    online_episodes: Option<u64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimatorArgs {
    #[command(flatten)]
    trial: TrialArgs,
    /// Comma-separated single-sample days to compare against.
    #[arg(long, value_delimiter = ',', default_value = "8,11,15")]
    probe_days: Vec<f64>,
}

#[derive(Args)]
struct RowArgs {
    #[arg(long)]
    qtable: PathBuf,
    #[arg(long)]
    class: usize,
    /// Grade history, e.g. `0,2`; empty for the first cycle.
    #[arg(long, default_value = "")]
    state: String,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "MIPD_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, env = "MIPD_QTABLE")]
    qtable: Option<PathBuf>,
    #[arg(long, env = "MIPD_BIND")]
    bind: Option<String>,
    #[arg(long, env = "MIPD_PORT")]
    port: Option<u16>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn trial_config(args: &TrialArgs) -> Result<TrialConfig> {
    let mut c: TrialConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrialConfig::default(),
    };
    if let Some(n) = args.n {
        c.patients = n;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if !args.days.is_empty() {
        c.observation_days = args.days.clone();
    }
    if !args.classes.is_empty() {
        c.classes = Some(args.classes.clone());
    }
    Ok(c)
}

fn train(args: TrainArgs) -> Result<()> {
    let model = PopulationModel::default();
    let mut config: PlannerConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PlannerConfig::default(),
    };
    config.episodes = args.episodes;
    if let Some(r) = args.grade4_reward {
        config.rewards = RewardSpec::with_grade4_reward(r);
        config.validate()?;
    }
    let classes: Vec<usize> = if args.classes.is_empty() {
        CovariateClass::all().map(|c| c.index()).collect()
    } else {
        args.classes
    };
    let table = train_classes(&model, &config, &classes, args.seed)?;
    table.save(&args.out)?;
    println!("trained {} classes, {} episodes each -> {}", classes.len(), config.episodes, args.out.display());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let model = PopulationModel::default();
    let mut config = trial_config(&args.trial)?;
    config.policy = args.policy;
    if let Some(k) = args.online_episodes {
        config.settings.darl.episodes = k;
    }
    let table = args.qtable.as_deref().map(QTable::load).transpose()?;
    if args.policy.needs_table() && table.is_none() {
        bail!("policy {} needs --qtable", args.policy);
    }
    let result = run_trial(&model, &config, table.as_ref())?;
    write_all(&result, &args.out)?;
    let a = &result.metrics.aggregates;
    println!("policy {}: {} patients, {} failed", result.policy, config.patients, result.failures.len());
    println!("mean utility          {:.4}", a.mean_utility);
    println!("mean target deviation {:.4}", a.mean_target_deviation);
    println!("weighted grade risk   {:.4}", a.weighted_grade_risk);
    println!("mean total reward     {:.4}", a.mean_total_reward);
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn estimators(args: EstimatorArgs) -> Result<()> {
    let model = PopulationModel::default();
    let mut config = trial_config(&args.trial)?;
    config.probe_days = args.probe_days;
    let rows = compare_state_estimators(&model, &config)?;
    let mut out = stdout().lock();
    write!(out, "estimator")?;
    for c in 1..=config.cycles {
        write!(out, ",cycle{c}")?;
    }
    writeln!(out, ",overall")?;
    for r in rows {
        write!(out, "{}", r.estimator)?;
        for v in r.per_cycle.iter().take(config.cycles) {
            write!(out, ",{v:.4}")?;
        }
        writeln!(out, ",{:.4}", r.overall)?;
    }
    Ok(())
}

fn row(args: RowArgs) -> Result<()> {
    let table = QTable::load(&args.qtable)?;
    let state = PatientState {
        class: CovariateClass::from_index(args.class)?,
        grades: parse_grades(&args.state)?,
    };
    let grid = mipd_core::policies::DoseGrid::default();
    table.write_row_csv(&state, &grid.levels(), stdout().lock())?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut config = ServiceConfig::from_env()?;
    if let Some(d) = args.data_dir {
        config.data_dir = d;
    }
    if args.qtable.is_some() {
        config.qtable = args.qtable;
    }
    if let Some(b) = args.bind {
        config.bind = b;
    }
    if let Some(p) = args.port {
        config.port = p;
    }
    let app = Arc::new(AppState::new(PopulationModel::default(), &config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(mipd_service::serve(app, &config.bind, config.port))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::Estimators(a) => estimators(a),
        Command::Row(a) => row(a),
        Command::Serve(a) => serve(a),
    }
}
