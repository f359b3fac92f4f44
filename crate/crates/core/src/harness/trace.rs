//! JSONL trace events.
//!
//! One event per line. Every event has `turn` and `kind`; events that belong
//! to a turn phase also carry `phase`. A game's events are contiguous and
//! start with `game_start` and end with `game_end`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsl::{PatchRecord, Value};
use crate::planning::{CandidateAction, Preview};
use crate::reflection::PresetKind;
use crate::revision::{LlmAttempt, Provenance};
use crate::world::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TurnPhase {
    ObserveEvaluate,
    DecideAct,
    Reflect,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceEvent {
    pub turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<TurnPhase>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReflectRecord {
    pub e_pred: f64,
    pub e_cal: f64,
    #[serde(rename = "ePredEMA")]
    pub e_pred_ema: f64,
    #[serde(rename = "eCalEMA")]
    pub e_cal_ema: f64,
    pub confidence: f64,
    pub streak: usize,
    pub cooldown: usize,
    /// The four gate conditions plus a preset to apply; independent of
    /// whether revision is enabled.
    pub gate_open: bool,
    /// Preset name, or empty when no trigger fits.
    pub revision_kind: String,
    pub delta_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReviseRecord {
    pub applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patches: Vec<PatchRecord>,
}

/// Per-game summary, written as the `game_end` event and as a CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GameSummary {
    pub level: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub board: String,
    pub seed: u64,
    pub win: bool,
    pub f1: f64,
    pub turns: usize,
    pub shots: usize,
    pub questions_asked: usize,
    pub llm_calls: usize,
    pub revisions: usize,
    pub gate_opens: usize,
    pub provenance_counts: BTreeMap<Provenance, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", rename_all_fields = "camelCase")]
pub enum EventBody {
    GameStart {
        level: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<f64>,
        board: String,
        seed: u64,
        master_seed: u64,
    },
    Evaluate {
        entropy: f64,
        live_particles: usize,
        computed: BTreeMap<String, Value>,
    },
    Preview(Preview),
    Action {
        action: String,
        candidate: CandidateAction,
        patches: Vec<PatchRecord>,
        /// Planning-scope computed values at decision time (empty for L1).
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        computed: BTreeMap<String, Value>,
    },
    Observation {
        observation: Observation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        predicted_prob: Option<f64>,
    },
    Reflect(ReflectRecord),
    Revise(ReviseRecord),
    Llm(LlmAttempt),
    GameEnd(GameSummary),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::GameStart { .. } => "game_start",
            EventBody::Evaluate { .. } => "evaluate",
            EventBody::Preview(_) => "preview",
            EventBody::Action { .. } => "action",
            EventBody::Observation { .. } => "observation",
            EventBody::Reflect(_) => "reflect",
            EventBody::Revise(_) => "revise",
            EventBody::Llm(_) => "llm",
            EventBody::GameEnd(_) => "game_end",
        }
    }
}

impl TraceEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }
}

/// Events as JSONL, one line each, trailing newline included.
pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_json());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Cell, ShotReturn};

    #[test]
    fn events_round_trip_with_kind_and_phase() {
        let events = vec![
            TraceEvent {
                turn: 0,
                phase: None,
                body: EventBody::GameStart { level: "L2".into(), tau: None, board: "B01".into(), seed: 0, master_seed: 7 },
            },
            TraceEvent {
                turn: 1,
                phase: Some(TurnPhase::DecideAct),
                body: EventBody::Observation {
                    observation: Observation::Shot(ShotReturn { cell: Cell::new(2, 3), observed_hit: true }),
                    predicted_prob: Some(0.25),
                },
            },
        ];
        let text = to_jsonl(&events);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("{\"turn\":0,\"kind\":\"game_start\",\"level\":\"L2\""), "{}", lines[0]);
        assert!(lines[1].contains("\"phase\":\"decideAct\"") && lines[1].contains("\"predictedProb\":0.25"));
        for (line, e) in lines.iter().zip(&events) {
            assert_eq!(&serde_json::from_str::<TraceEvent>(line).unwrap(), e);
        }
    }
}
