//! Filtering and aggregating JSONL traces.
//!
//! Game-level filters (`level`, `board`, `seed`) select whole games; `phase`
//! and `kind` further select events for `count`, `mean` and `rate`. The
//! canned reports read the `game_end` summaries (and, for `trace`, the
//! revise events) of the selected games.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{layer_delta, summarize, sweep_rows, LabError, LayerDelta, Metric, SummaryRow, SweepRow};
use crate::harness::{EventBody, GameSummary, TraceEvent, TurnPhase};

/// One game's events, from `game_start` through `game_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameLog {
    pub level: String,
    pub board: String,
    pub seed: u64,
    pub events: Vec<(TraceEvent, Json)>,
}

impl GameLog {
    pub fn summary(&self) -> Option<&GameSummary> {
        self.events.iter().rev().find_map(|(e, _)| match &e.body {
            EventBody::GameEnd(s) => Some(s),
            _ => None,
        })
    }
}

/// Splits JSONL text into games. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_log(text: &str) -> Result<Vec<GameLog>, LabError> {
    let mut games: Vec<GameLog> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| LabError::MalformedLog { line: line_no, message };
        let json: Json = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let event: TraceEvent = serde_json::from_value(json.clone()).map_err(|e| malformed(e.to_string()))?;
        if let EventBody::GameStart { level, board, seed, .. } = &event.body {
            games.push(GameLog { level: level.clone(), board: board.clone(), seed: *seed, events: Vec::new() });
        }
        let game = games.last_mut().ok_or_else(|| malformed("event before any game_start".into()))?;
        game.events.push((event, json));
    }
    Ok(games)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    pub level: Option<String>,
    pub board: Option<String>,
    pub seed: Option<u64>,
    pub phase: Option<TurnPhase>,
    pub kind: Option<String>,
}

impl Filter {
    fn game(&self, g: &GameLog) -> bool {
        self.level.as_ref().is_none_or(|l| *l == g.level)
            && self.board.as_ref().is_none_or(|b| *b == g.board)
            && self.seed.is_none_or(|s| s == g.seed)
    }

    fn event(&self, e: &TraceEvent) -> bool {
        self.phase.is_none_or(|p| e.phase == Some(p)) && self.kind.as_ref().is_none_or(|k| k == e.body.kind())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    /// Number of selected events.
    Count,
    /// Mean of a numeric field (dotted path) over selected events that have it.
    Mean(String),
    /// Fraction of `true` among selected events where a boolean field is present.
    Rate(String),
    Table2,
    Table3,
    /// Per-board paired deltas of `on` minus `off`.
    Deltas { metric: Metric, on: String, off: String },
    /// Revision events of one board and seed, turn by turn.
    Trace { board: String, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceLine {
    pub level: String,
    pub turn: usize,
    pub preset: String,
    /// `llm`, `preset`, or `disabled` for an open gate with revision off.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Count(usize),
    Mean { field: String, n: usize, mean: Option<f64> },
    Rate { field: String, n: usize, rate: Option<f64> },
    Table2(Vec<SummaryRow>),
    Table3(Vec<SweepRow>),
    Deltas(Option<LayerDelta>),
    Trace(Vec<TraceLine>),
}

fn lookup<'a>(json: &'a Json, path: &str) -> Option<&'a Json> {
    path.split('.').try_fold(json, |v, key| v.get(key))
}

/// Runs `query` over every game in `logs` that passes `filter`.
pub fn lens(logs: &[GameLog], filter: &Filter, query: &Query) -> Result<Report, LabError> {
    let games: Vec<&GameLog> = logs.iter().filter(|g| filter.game(g)).collect();
    let events = || games.iter().flat_map(|g| g.events.iter()).filter(|(e, _)| filter.event(e));
    let summaries = || -> Vec<GameSummary> { games.iter().filter_map(|g| g.summary().cloned()).collect() };
    Ok(match query {
        Query::Count => Report::Count(events().count()),
        Query::Mean(field) => {
            let xs: Vec<f64> = events().filter_map(|(_, j)| lookup(j, field)?.as_f64()).collect();
            let mean = (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            Report::Mean { field: field.clone(), n: xs.len(), mean }
        }
        Query::Rate(field) => {
            let xs: Vec<bool> = events().filter_map(|(_, j)| lookup(j, field)?.as_bool()).collect();
            let rate = (!xs.is_empty()).then(|| xs.iter().filter(|b| **b).count() as f64 / xs.len() as f64);
            Report::Rate { field: field.clone(), n: xs.len(), rate }
        }
        Query::Table2 => Report::Table2(summarize(&summaries())?),
        Query::Table3 => Report::Table3(sweep_rows(&summarize(&summaries())?)),
        Query::Deltas { metric, on, off } => {
            let rows = summarize(&summaries())?;
            if rows.is_empty() {
                return Ok(Report::Deltas(None));
            }
            let find = |level: &str| {
                rows.iter()
                    .find(|r| r.level == level)
                    .ok_or_else(|| LabError::SuiteMismatch(format!("no {level} games in the log")))
            };
            Report::Deltas(Some(layer_delta(find(on)?, find(off)?, *metric)?))
        }
        Query::Trace { board, seed } => {
            let mut lines = Vec::new();
            for g in games.iter().filter(|g| g.board == *board && g.seed == *seed) {
                for (e, _) in &g.events {
                    let line = match &e.body {
                        EventBody::Revise(r) if r.applied => r.preset.map(|p| TraceLine {
                            level: g.level.clone(),
                            turn: e.turn,
                            preset: p.name().to_string(),
                            source: r.provenance.map_or("preset", |p| if p == crate::revision::Provenance::Llm { "llm" } else { "preset" }).to_string(),
                        }),
                        EventBody::Reflect(r) if r.gate_open && g.level == "L3-off" => Some(TraceLine {
                            level: g.level.clone(),
                            turn: e.turn,
                            preset: r.revision_kind.clone(),
                            source: "disabled".to_string(),
                        }),
                        _ => None,
                    };
                    lines.extend(line);
                }
            }
            Report::Trace(lines)
        }
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v}"))
}

impl Report {
    /// Text form: one line for scalar reports, CSV for tables, one line per
    /// revision for traces. Empty reports render as an empty string.
    pub fn render(&self) -> Result<String, LabError> {
        Ok(match self {
            Report::Count(n) => format!("count {n}\n"),
            Report::Mean { field, n, mean } => format!("mean {field} {} (n={n})\n", opt(*mean)),
            Report::Rate { field, n, rate } => format!("rate {field} {} (n={n})\n", opt(*rate)),
            Report::Table2(rows) if rows.is_empty() => String::new(),
            Report::Table2(rows) => super::summary_csv(rows)?,
            Report::Table3(rows) if rows.is_empty() => String::new(),
            Report::Table3(rows) => super::to_csv(rows)?,
            Report::Deltas(None) => String::new(),
            Report::Deltas(Some(d)) => {
                let mut out = String::from("board,delta\n");
                for b in &d.per_board {
                    let _ = writeln!(out, "{},{:+.3}", b.board, b.delta);
                }
                out
            }
            Report::Trace(lines) => {
                let mut out = String::new();
                for l in lines {
                    let _ = writeln!(out, "{} Turn {}: {} ({})", l.level, l.turn, l.preset, l.source);
                }
                out
            }
        })
    }
}
