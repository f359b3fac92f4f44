//! Suite runner, metrics, layer contrasts and reports.
//!
//! A suite is every (level, tau) cell crossed with every board and seed.
//! Games run in parallel but are collected in job order, so the artifact
//! bundle (`traces.jsonl`, `games.csv`, `summary.csv`, `summary.json`) is
//! byte-identical across runs with the same inputs.

mod lens;
mod oracle;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub use lens::{lens, parse_log, Filter, GameLog, Query, Report, TraceLine};
pub use oracle::{oracle_check, OracleCase, OracleReport, OracleSpec};

use crate::belief::BeliefError;
use crate::harness::{run_game, GameRecord, GameSummary, HarnessError, HarnessLevel, RunConfig};
use crate::revision::{FailingClient, GenerationClient, HttpClient, ScriptError, ScriptedClient, DEFAULT_TIMEOUT};
use crate::world::suite::{parse_suite, validate_suite, BoardSpec, SuiteError};
use crate::world::{BoardConfig, WorldError};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("empty sample")]
    EmptySample,
    #[error("{successes} successes out of {n}")]
    TooManySuccesses { successes: usize, n: usize },
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("suite mismatch: {0}")]
    SuiteMismatch(String),
    #[error("malformed log at line {line}: {message}")]
    MalformedLog { line: usize, message: String },
    #[error("invalid suite spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.959964;

fn z_for(level: f64) -> Result<f64, LabError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(LabError::InvalidLevel(level));
    }
    if level == 0.95 {
        return Ok(Z95);
    }
    Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
}

/// Wilson score interval for `successes` out of `n` at confidence `level`.
pub fn wilson_ci(successes: usize, n: usize, level: f64) -> Result<[f64; 2], LabError> {
    if n == 0 {
        return Err(LabError::EmptySample);
    }
    if successes > n {
        return Err(LabError::TooManySuccesses { successes, n });
    }
    let z = z_for(level)?;
    let (k, n) = (successes as f64, n as f64);
    let p = k / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = (center - half).clamp(0.0, 1.0).min(p);
    let hi = (center + half).clamp(0.0, 1.0).max(p);
    Ok([lo, hi])
}

/// Fraction of turns on which the generation client was called.
pub fn invocation_rate(games: &[GameSummary]) -> f64 {
    let turns: usize = games.iter().map(|g| g.turns).sum();
    if turns == 0 {
        return 0.0;
    }
    games.iter().map(|g| g.llm_calls).sum::<usize>() as f64 / turns as f64
}

/// The frozen 18-board default suite.
pub const DEFAULT_SUITE: &str = include_str!("../../suites/default.json");
pub const DEFAULT_SEEDS: usize = 3;
pub const ALL_LEVELS: [&str; 5] = ["L1", "L2", "L3-off", "L3-on", "L4"];

pub fn default_boards() -> Vec<BoardSpec> {
    parse_suite(DEFAULT_SUITE).expect("default suite parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub boards: Vec<BoardSpec>,
    pub seeds_per_board: usize,
    pub levels: Vec<String>,
    /// Thresholds for `L4` cells; empty means the config's `tau`.
    pub taus: Vec<f64>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            boards: default_boards(),
            seeds_per_board: DEFAULT_SEEDS,
            levels: ALL_LEVELS.iter().map(|s| s.to_string()).collect(),
            taus: Vec::new(),
        }
    }
}

impl SuiteSpec {
    pub fn new(boards: Vec<BoardSpec>, seeds_per_board: usize, levels: &[&str]) -> Self {
        SuiteSpec { boards, seeds_per_board, levels: levels.iter().map(|s| s.to_string()).collect(), taus: Vec::new() }
    }

    pub fn with_taus(mut self, taus: &[f64]) -> Self {
        self.taus = taus.to_vec();
        self
    }

    pub fn validate(&self, base: &BoardConfig) -> Result<(), LabError> {
        if self.seeds_per_board == 0 {
            return Err(LabError::Spec("seedsPerBoard must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(LabError::Spec("no levels".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(LabError::Spec(format!("tau {t} outside [0, 1]")));
        }
        validate_suite(&self.boards, base)?;
        Ok(())
    }

    /// The (level, tau) cells in run order.
    pub fn cells(&self, config: &RunConfig) -> Result<Vec<HarnessLevel>, LabError> {
        let mut cells = Vec::new();
        for label in &self.levels {
            let level = HarnessLevel::parse(label, config.tau)?;
            match level {
                HarnessLevel::L4 { .. } if !self.taus.is_empty() => {
                    cells.extend(self.taus.iter().map(|&tau| HarnessLevel::L4 { tau }));
                }
                _ => cells.push(level),
            }
        }
        Ok(cells)
    }

    pub fn games_per_cell(&self) -> usize {
        self.boards.len() * self.seeds_per_board
    }
}

/// Where `L4` games get their generation client. Every game gets its own
/// instance, so scripted replies restart at the first entry for each game.
#[derive(Debug, Clone, Default)]
pub enum ClientSource {
    #[default]
    None,
    /// Every call fails; revisions fall back to presets.
    Failing,
    Scripted(ScriptedClient),
    Http(HttpClient),
}

impl ClientSource {
    /// Mock file first, then the configured or environment base URL.
    pub fn from_config(config: &RunConfig) -> Result<Self, LabError> {
        let model = config.llm.model.as_deref().unwrap_or(crate::harness::DEFAULT_MODEL);
        if let Some(path) = &config.llm.mock_file {
            return Ok(ClientSource::Scripted(ScriptedClient::load(path)?));
        }
        if let Some(url) = &config.llm.base_url {
            return Ok(ClientSource::Http(HttpClient::new(url, model, DEFAULT_TIMEOUT)));
        }
        Ok(HttpClient::from_env(model).map_or(ClientSource::None, ClientSource::Http))
    }

    fn for_game(&self) -> Option<Box<dyn GenerationClient>> {
        match self {
            ClientSource::None => None,
            ClientSource::Failing => Some(Box::new(FailingClient)),
            ClientSource::Scripted(c) => Some(Box::new(c.clone())),
            ClientSource::Http(c) => Some(Box::new(c.clone())),
        }
    }
}

/// Per-board aggregate inside one summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoardStats {
    pub games: usize,
    pub wins: usize,
    pub avg_f1: f64,
    pub win_rate: f64,
}

/// One (level, tau) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryRow {
    pub level: String,
    pub tau: Option<f64>,
    pub games: usize,
    pub wins: usize,
    pub turns: usize,
    pub questions: usize,
    pub llm_calls: usize,
    pub revisions: usize,
    pub gate_opens: usize,
    pub avg_f1: f64,
    pub win_rate: f64,
    #[serde(rename = "wilsonCI95")]
    pub wilson_ci95: [f64; 2],
    pub avg_questions: f64,
    pub llm_rate: f64,
    pub boards: BTreeMap<String, BoardStats>,
}

impl SummaryRow {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::WinRate => self.win_rate,
            Metric::F1 => self.avg_f1,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summary_row(games: &[&GameSummary]) -> Result<SummaryRow, LabError> {
    let first = games.first().ok_or(LabError::EmptySample)?;
    let n = games.len();
    let wins = games.iter().filter(|g| g.win).count();
    let mut by_board: BTreeMap<String, Vec<&GameSummary>> = BTreeMap::new();
    for g in games {
        by_board.entry(g.board.clone()).or_default().push(g);
    }
    let boards = by_board
        .into_iter()
        .map(|(id, gs)| {
            let wins = gs.iter().filter(|g| g.win).count();
            let stats = BoardStats {
                games: gs.len(),
                wins,
                avg_f1: mean(gs.iter().map(|g| g.f1)),
                win_rate: wins as f64 / gs.len() as f64,
            };
            (id, stats)
        })
        .collect();
    let owned: Vec<GameSummary> = games.iter().map(|g| (*g).clone()).collect();
    let questions = games.iter().map(|g| g.questions_asked).sum();
    Ok(SummaryRow {
        level: first.level.clone(),
        tau: first.tau,
        games: n,
        wins,
        turns: games.iter().map(|g| g.turns).sum(),
        questions,
        llm_calls: games.iter().map(|g| g.llm_calls).sum(),
        revisions: games.iter().map(|g| g.revisions).sum(),
        gate_opens: games.iter().map(|g| g.gate_opens).sum(),
        avg_f1: mean(games.iter().map(|g| g.f1)),
        win_rate: wins as f64 / n as f64,
        wilson_ci95: wilson_ci(wins, n, 0.95)?,
        avg_questions: questions as f64 / n as f64,
        llm_rate: invocation_rate(&owned),
        boards,
    })
}

/// Groups games by (level, tau) in order of first appearance.
pub fn summarize(games: &[GameSummary]) -> Result<Vec<SummaryRow>, LabError> {
    let mut keys: Vec<(String, Option<u64>)> = Vec::new();
    let mut groups: Vec<Vec<&GameSummary>> = Vec::new();
    for g in games {
        let key = (g.level.clone(), g.tau.map(f64::to_bits));
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(g),
            None => {
                keys.push(key);
                groups.push(vec![g]);
            }
        }
    }
    groups.iter().map(|g| summary_row(g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSummary {
    pub boards: usize,
    pub seeds_per_board: usize,
    /// Seeds are paired: every level plays the same (board, seed) games.
    pub paired_seeds: bool,
    pub rows: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn row(&self, level: &str, tau: Option<f64>) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.level == level && (tau.is_none() || r.tau == tau))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub records: Vec<GameRecord>,
    pub summary: RunSummary,
}

impl SuiteRun {
    pub fn games(&self) -> Vec<GameSummary> {
        self.records.iter().map(|r| r.summary.clone()).collect()
    }
}

type Job<'a> = (HarnessLevel, &'a BoardSpec, u64);

fn jobs<'a>(spec: &'a SuiteSpec, config: &RunConfig) -> Result<Vec<Job<'a>>, LabError> {
    let mut out = Vec::new();
    for level in spec.cells(config)? {
        for board in &spec.boards {
            for seed in 0..spec.seeds_per_board as u64 {
                out.push((level, board, seed));
            }
        }
    }
    Ok(out)
}

/// Runs the games in parallel and returns them in job order, stopping at
/// the first failed job: the records before it come back with the error.
fn play(
    spec: &SuiteSpec,
    config: &RunConfig,
    clients: &ClientSource,
) -> Result<(Vec<GameRecord>, Option<LabError>), LabError> {
    config.validate()?;
    spec.validate(&config.base_board())?;
    let results: Vec<Result<GameRecord, HarnessError>> = jobs(spec, config)?
        .par_iter()
        .map(|&(level, board, seed)| {
            let client = clients.for_game();
            run_game(level, board, seed, config, client.as_deref())
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(record) => records.push(record),
            Err(e) => return Ok((records, Some(e.into()))),
        }
    }
    Ok((records, None))
}

fn run_summary(spec: &SuiteSpec, records: &[GameRecord]) -> Result<RunSummary, LabError> {
    let games: Vec<GameSummary> = records.iter().map(|r| r.summary.clone()).collect();
    Ok(RunSummary {
        boards: spec.boards.len(),
        seeds_per_board: spec.seeds_per_board,
        paired_seeds: true,
        rows: summarize(&games)?,
    })
}

pub fn run_suite(spec: &SuiteSpec, config: &RunConfig, clients: &ClientSource) -> Result<SuiteRun, LabError> {
    let (records, error) = play(spec, config, clients)?;
    if let Some(e) = error {
        return Err(e);
    }
    let summary = run_summary(spec, &records)?;
    Ok(SuiteRun { records, summary })
}

/// [`run_suite`] that also writes the artifact bundle to `dir`. When a game
/// fails, the games finished before it are written and the error returned.
pub fn run_suite_into(
    spec: &SuiteSpec,
    config: &RunConfig,
    clients: &ClientSource,
    dir: &Path,
) -> Result<SuiteRun, LabError> {
    let (records, error) = play(spec, config, clients)?;
    let summary = run_summary(spec, &records).unwrap_or(RunSummary {
        boards: spec.boards.len(),
        seeds_per_board: spec.seeds_per_board,
        paired_seeds: true,
        rows: Vec::new(),
    });
    let run = SuiteRun { records, summary };
    write_artifacts(dir, &run)?;
    match error {
        Some(e) => Err(e),
        None => Ok(run),
    }
}

/// One `games.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GameRow {
    pub level: String,
    pub tau: Option<f64>,
    pub board: String,
    pub seed: u64,
    pub win: bool,
    pub f1: f64,
    pub turns: usize,
    pub questions: usize,
    pub llm_calls: usize,
    pub revisions: usize,
    /// `llm=2;preset=1`, empty when there were no revisions.
    pub provenance_counts: String,
}

impl From<&GameSummary> for GameRow {
    fn from(g: &GameSummary) -> Self {
        let provenance_counts = g
            .provenance_counts
            .iter()
            .map(|(p, n)| format!("{}={n}", serde_json::to_value(p).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()))
            .collect::<Vec<_>>()
            .join(";");
        GameRow {
            level: g.level.clone(),
            tau: g.tau,
            board: g.board.clone(),
            seed: g.seed,
            win: g.win,
            f1: g.f1,
            turns: g.turns,
            questions: g.questions_asked,
            llm_calls: g.llm_calls,
            revisions: g.revisions,
            provenance_counts,
        }
    }
}

/// One `summary.csv` row, in the column order of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SummaryCsvRow {
    pub level: String,
    pub tau: Option<f64>,
    pub games: usize,
    pub llm_rate: f64,
    pub avg_f1: f64,
    pub win_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub avg_questions: f64,
}

impl From<&SummaryRow> for SummaryCsvRow {
    fn from(r: &SummaryRow) -> Self {
        SummaryCsvRow {
            level: r.level.clone(),
            tau: r.tau,
            games: r.games,
            llm_rate: r.llm_rate,
            avg_f1: r.avg_f1,
            win_rate: r.win_rate,
            ci_low: r.wilson_ci95[0],
            ci_high: r.wilson_ci95[1],
            avg_questions: r.avg_questions,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String, LabError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn games_csv(games: &[GameSummary]) -> Result<String, LabError> {
    to_csv(games.iter().map(GameRow::from))
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String, LabError> {
    to_csv(rows.iter().map(SummaryCsvRow::from))
}

pub fn traces_jsonl(records: &[GameRecord]) -> String {
    records.iter().map(GameRecord::jsonl).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub traces: PathBuf,
    pub games: PathBuf,
    pub summary_csv: PathBuf,
    pub summary_json: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            traces: dir.join("traces.jsonl"),
            games: dir.join("games.csv"),
            summary_csv: dir.join("summary.csv"),
            summary_json: dir.join("summary.json"),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), LabError> {
    std::fs::write(path, text).map_err(|source| LabError::Io { path: path.to_path_buf(), source })
}

pub fn write_artifacts(dir: &Path, run: &SuiteRun) -> Result<Artifacts, LabError> {
    std::fs::create_dir_all(dir).map_err(|source| LabError::Io { path: dir.to_path_buf(), source })?;
    let paths = Artifacts::in_dir(dir);
    write(&paths.traces, &traces_jsonl(&run.records))?;
    write(&paths.games, &games_csv(&run.games())?)?;
    write(&paths.summary_csv, &summary_csv(&run.summary.rows)?)?;
    let mut json = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
    json.push('\n');
    write(&paths.summary_json, &json)?;
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Metric {
    WinRate,
    F1,
}

impl Metric {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "winRate" | "win-rate" | "win_rate" | "win" => Some(Metric::WinRate),
            "f1" | "F1" => Some(Metric::F1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoardDelta {
    pub board: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayerDelta {
    pub metric: Metric,
    pub delta: f64,
    /// Per-board paired deltas, largest first.
    pub per_board: Vec<BoardDelta>,
}

/// `metric(a) - metric(b)` with per-board paired deltas. Both rows must
/// cover the same boards with the same number of games each.
pub fn layer_delta(a: &SummaryRow, b: &SummaryRow, metric: Metric) -> Result<LayerDelta, LabError> {
    if a.boards.len() != b.boards.len() {
        return Err(LabError::SuiteMismatch(format!("{} boards vs {}", a.boards.len(), b.boards.len())));
    }
    let mut per_board = Vec::with_capacity(a.boards.len());
    for (id, sa) in &a.boards {
        let sb = b.boards.get(id).ok_or_else(|| LabError::SuiteMismatch(format!("board {id} missing")))?;
        if sa.games != sb.games {
            return Err(LabError::SuiteMismatch(format!("board {id}: {} games vs {}", sa.games, sb.games)));
        }
        let value = |s: &BoardStats| match metric {
            Metric::WinRate => s.win_rate,
            Metric::F1 => s.avg_f1,
        };
        per_board.push(BoardDelta { board: id.clone(), delta: value(sa) - value(sb) });
    }
    per_board.sort_by(|x, y| y.delta.total_cmp(&x.delta).then_with(|| x.board.cmp(&y.board)));
    Ok(LayerDelta { metric, delta: a.metric(metric) - b.metric(metric), per_board })
}

/// One threshold-sweep row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    /// Suite size, e.g. `54 games`.
    pub scope: String,
    pub tau: f64,
    pub games: usize,
    pub turns: usize,
    pub llm_calls: usize,
    pub gate_opens: usize,
    pub llm_rate: f64,
    pub avg_f1: f64,
    pub win_rate: f64,
    /// No client call at this threshold.
    pub no_llm: bool,
}

/// Sweep rows for the `L4` rows of a summary, by ascending tau.
pub fn sweep_rows(rows: &[SummaryRow]) -> Vec<SweepRow> {
    let mut out: Vec<SweepRow> = rows
        .iter()
        .filter(|r| r.level == "L4")
        .filter_map(|r| {
            Some(SweepRow {
                scope: format!("{} games", r.games),
                tau: r.tau?,
                games: r.games,
                turns: r.turns,
                llm_calls: r.llm_calls,
                gate_opens: r.gate_opens,
                llm_rate: r.llm_rate,
                avg_f1: r.avg_f1,
                win_rate: r.win_rate,
                no_llm: r.llm_calls == 0,
            })
        })
        .collect();
    out.sort_by(|a, b| a.scope.cmp(&b.scope).then(a.tau.total_cmp(&b.tau)));
    out
}

/// Runs `L4` at every tau on the spec's boards and seeds.
pub fn threshold_sweep(
    spec: &SuiteSpec,
    config: &RunConfig,
    taus: &[f64],
    clients: &ClientSource,
) -> Result<(SuiteRun, Vec<SweepRow>), LabError> {
    if taus.is_empty() {
        return Err(LabError::Spec("no thresholds to sweep".into()));
    }
    let spec = SuiteSpec { levels: vec!["L4".into()], taus: taus.to_vec(), ..spec.clone() };
    let run = run_suite(&spec, config, clients)?;
    let rows = sweep_rows(&run.summary.rows);
    Ok((run, rows))
}
