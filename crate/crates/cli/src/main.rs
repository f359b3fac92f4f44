use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use shiplab::harness::{RunConfig, TurnPhase};
use shiplab::lab::{
    layer_delta, lens, oracle_check, parse_log, run_suite_into, sweep_rows, threshold_sweep, write_artifacts,
    default_boards, ClientSource, Filter, LabError, Metric, OracleSpec, Query, SuiteSpec, ALL_LEVELS, DEFAULT_SEEDS,
};
use shiplab::world::suite::{generate_suite, load_suite};

#[derive(Parser)]
#[command(name = "shiplab", version, about = "Layered planning-harness lab for noisy Battleship")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a suite and write traces.jsonl, games.csv, summary.csv, summary.json.
    Run {
        #[command(flatten)]
        suite: SuiteArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated levels (L1, L2, L3-off, L3-on, L4); `all` for every level.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run L4 at several thresholds and print the sweep table.
    Sweep {
        #[command(flatten)]
        suite: SuiteArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.72,1")]
        taus: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Paired contrast of two levels on the same boards and seeds.
    Ablate {
        #[command(flatten)]
        suite: SuiteArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// The level with the layer.
        #[arg(long = "with", default_value = "L2")]
        with_layer: String,
        /// The level without it.
        #[arg(long = "without", default_value = "L1")]
        without_layer: String,
        #[arg(long, default_value = "win-rate", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Filter and aggregate JSONL traces.
    Lens {
        /// Trace files.
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        level: Option<String>,
        #[arg(long)]
        board: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// observeEvaluate, decideAct, reflect or revise.
        #[arg(long, value_parser = parse_phase)]
        phase: Option<TurnPhase>,
        /// Event kind, e.g. reflect or revise.
        #[arg(long)]
        kind: Option<String>,
        #[command(subcommand)]
        query: LensQuery,
    },
    /// Compare the particle posterior with exact enumeration on a small board.
    Oracle {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 500)]
        particles: usize,
        #[arg(long, default_value_t = 20)]
        sweeps: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        /// Fail when the worst L-infinity distance exceeds this.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
}

#[derive(Subcommand)]
enum LensQuery {
    Count,
    Mean { field: String },
    Rate { field: String },
    Table2,
    Table3,
    Deltas {
        #[arg(long, default_value = "f1", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long, default_value = "L3-on")]
        on: String,
        #[arg(long, default_value = "L3-off")]
        off: String,
    },
    Trace { board: String, seed: u64 },
}

#[derive(Args)]
struct SuiteArgs {
    /// Board-suite JSON file; the frozen 18-board suite when omitted.
    #[arg(long, conflicts_with = "generate")]
    suite: Option<PathBuf>,
    /// Generate this many boards instead.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value_t = 2026)]
    generator_seed: u64,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    jobs: Option<usize>,
}

/// Overrides for the run-config file.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    streak: Option<usize>,
    #[arg(long)]
    cooldown_turns: Option<usize>,
    #[arg(long)]
    delta_min: Option<f64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    questions: Option<usize>,
    #[arg(long)]
    shared_question_policy: bool,
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    mock_file: Option<PathBuf>,
    /// Use a client whose every call fails, so L4 falls back to presets.
    #[arg(long)]
    offline: bool,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::parse(s).ok_or_else(|| format!("unknown metric {s:?} (win-rate or f1)"))
}

fn parse_phase(s: &str) -> Result<TurnPhase, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown phase {s:?}"))
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, LabError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            tau => c.tau,
            alpha => c.alpha,
            streak => c.streak,
            cooldown_turns => c.cooldown_turns,
            delta_min => c.delta_min,
            particles => c.particles,
            sweeps => c.sweeps,
            epsilon => c.epsilon,
            shots => c.budgets.shots,
            questions => c.budgets.questions,
        );
        if self.shared_question_policy {
            c.shared_question_policy = true;
        }
        if let Some(url) = &self.llm_url {
            c.llm.base_url = Some(url.clone());
        }
        if let Some(model) = &self.model {
            c.llm.model = Some(model.clone());
        }
        if let Some(path) = &self.mock_file {
            c.llm.mock_file = Some(path.clone());
        }
        c.validate()?;
        Ok(c)
    }

    fn clients(&self, config: &RunConfig) -> Result<ClientSource, LabError> {
        if self.offline {
            return Ok(ClientSource::Failing);
        }
        ClientSource::from_config(config)
    }
}

impl SuiteArgs {
    fn spec(&self, config: &RunConfig, levels: Vec<String>) -> Result<SuiteSpec, LabError> {
        let boards = match (&self.suite, self.generate) {
            (Some(path), _) => load_suite(path)?,
            (None, Some(n)) => generate_suite(&config.base_board(), n, self.generator_seed)?,
            (None, None) => default_boards(),
        };
        Ok(SuiteSpec { boards, seeds_per_board: self.seeds, levels, taus: Vec::new() })
    }

    fn pool(&self) -> Result<rayon::ThreadPool, LabError> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.jobs {
            builder = builder.num_threads(n);
        }
        builder.build().map_err(|e| LabError::Spec(e.to_string()))
    }
}

fn levels_arg(levels: Vec<String>, config: &RunConfig) -> Vec<String> {
    if levels.is_empty() {
        vec![config.level.clone()]
    } else if levels.iter().any(|l| l == "all") {
        ALL_LEVELS.iter().map(|s| s.to_string()).collect()
    } else {
        levels
    }
}

fn report_run(out: &Path, started: Instant) {
    eprintln!("artifacts in {} ({:.1?})", out.display(), started.elapsed());
}

fn run(command: Command) -> Result<bool, LabError> {
    let started = Instant::now();
    match command {
        Command::Run { suite, config, levels, out } => {
            let c = config.load()?;
            let spec = suite.spec(&c, levels_arg(levels, &c))?;
            let clients = config.clients(&c)?;
            let run = suite.pool()?.install(|| run_suite_into(&spec, &c, &clients, &out))?;
            print!("{}", shiplab::lab::summary_csv(&run.summary.rows)?);
            report_run(&out, started);
        }
        Command::Sweep { suite, config, taus, out } => {
            let c = config.load()?;
            let spec = suite.spec(&c, vec!["L4".into()])?;
            let clients = config.clients(&c)?;
            let (run, rows) = suite.pool()?.install(|| threshold_sweep(&spec, &c, &taus, &clients))?;
            write_artifacts(&out, &run)?;
            print!("{}", shiplab::lab::to_csv(&rows)?);
            debug_assert_eq!(rows, sweep_rows(&run.summary.rows));
            report_run(&out, started);
        }
        Command::Ablate { suite, config, with_layer, without_layer, metric, out } => {
            if with_layer == without_layer {
                return Err(LabError::Spec("ablate needs two different levels".into()));
            }
            let c = config.load()?;
            let spec = suite.spec(&c, vec![with_layer.clone(), without_layer.clone()])?;
            let clients = config.clients(&c)?;
            let run = suite.pool()?.install(|| run_suite_into(&spec, &c, &clients, &out))?;
            let rows = &run.summary.rows;
            let delta = layer_delta(&rows[0], &rows[1], metric)?;
            println!("{with_layer} - {without_layer}: {:+.3}", delta.delta);
            println!("board,delta");
            for b in &delta.per_board {
                println!("{},{:+.3}", b.board, b.delta);
            }
            report_run(&out, started);
        }
        Command::Lens { logs, level, board, seed, phase, kind, query } => {
            let mut games = Vec::new();
            for path in &logs {
                let text = std::fs::read_to_string(path).map_err(|source| LabError::Io { path: path.clone(), source })?;
                games.extend(parse_log(&text)?);
            }
            let filter = Filter { level, board, seed, phase, kind };
            let query = match query {
                LensQuery::Count => Query::Count,
                LensQuery::Mean { field } => Query::Mean(field),
                LensQuery::Rate { field } => Query::Rate(field),
                LensQuery::Table2 => Query::Table2,
                LensQuery::Table3 => Query::Table3,
                LensQuery::Deltas { metric, on, off } => Query::Deltas { metric, on, off },
                LensQuery::Trace { board, seed } => Query::Trace { board, seed },
            };
            print!("{}", lens(&games, &filter, &query)?.render()?);
        }
        Command::Oracle { trials, particles, sweeps, seed, tolerance } => {
            let spec = OracleSpec { trials, particles, sweeps, seed, ..OracleSpec::default() };
            let report = oracle_check(&spec)?;
            println!("epsilon,trial,historyLen,liveParticles,linf");
            for c in &report.cases {
                println!("{},{},{},{},{:.4}", c.epsilon, c.trial, c.history_len, c.live_particles, c.linf);
            }
            println!("max L-infinity {:.4} (tolerance {tolerance}) in {:.1?}", report.max_linf, started.elapsed());
            return Ok(report.max_linf <= tolerance);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
