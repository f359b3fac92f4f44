//! The runnable configurations and the four-phase turn loop.
//!
//! Every level plays on the same belief backend and the same named random
//! streams; higher levels only add structure on top. Decisions go through a
//! DSL [`Program`]: the host computes what the DSL cannot (posterior
//! entropy, previews, error signals), writes it into the state record, and
//! takes whichever action the program makes available.

mod config;
mod trace;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Budgets, BucketPolicies, LlmConfig, RunConfig, DEFAULT_MODEL};
pub use trace::{to_jsonl, EventBody, GameSummary, ReflectRecord, ReviseRecord, TraceEvent, TurnPhase};

use crate::belief::{BeliefError, Posterior};
use crate::dsl::{DslError, Program, Schema, Scope, StateRecord, Type, Value};
use crate::planning::{
    enumerate_candidates, l1_select, preview_all, select_action, best_previews, CandidateAction, PolicyParameters,
    QuestionBudgetPolicy, TurnContext,
};
use crate::reflection::{gate_precondition, preview_revision, select_preset, GateSettings, ReflectionSignals, GATE_PROGRAM};
use crate::revision::{revise_with_fallback, GenerationClient, Provenance, RevisionRequest};
use crate::rng::{game_seed, Stream, Streams};
use crate::world::suite::BoardSpec;
use crate::world::{Cell, Engine, Observation, Outcome, WorldError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Dsl(#[from] DslError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HarnessLevel {
    L1,
    L2,
    L3 { revision_enabled: bool },
    L4 { tau: f64 },
}

impl HarnessLevel {
    /// Parses a level label; `tau` is the threshold an `L4` label gets.
    pub fn parse(label: &str, tau: f64) -> Result<Self, HarnessError> {
        Ok(match label {
            "L1" => HarnessLevel::L1,
            "L2" => HarnessLevel::L2,
            "L3-off" => HarnessLevel::L3 { revision_enabled: false },
            "L3-on" | "L3" => HarnessLevel::L3 { revision_enabled: true },
            "L4" => HarnessLevel::L4 { tau },
            other => return Err(HarnessError::Config(format!("unknown level {other:?}"))),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            HarnessLevel::L1 => "L1",
            HarnessLevel::L2 => "L2",
            HarnessLevel::L3 { revision_enabled: false } => "L3-off",
            HarnessLevel::L3 { revision_enabled: true } => "L3-on",
            HarnessLevel::L4 { .. } => "L4",
        }
    }

    pub fn reflects(&self) -> bool {
        matches!(self, HarnessLevel::L3 { .. } | HarnessLevel::L4 { .. })
    }

    pub fn plans(&self) -> bool {
        !matches!(self, HarnessLevel::L1)
    }

    /// Gate threshold in force at this level.
    pub fn tau(&self, config: &RunConfig) -> Option<f64> {
        match self {
            HarnessLevel::L1 | HarnessLevel::L2 => None,
            HarnessLevel::L3 { .. } => Some(config.tau),
            HarnessLevel::L4 { tau } => Some(*tau),
        }
    }

    fn revision_enabled(&self) -> bool {
        matches!(self, HarnessLevel::L3 { revision_enabled: true } | HarnessLevel::L4 { .. })
    }

    pub fn question_policy(&self, config: &RunConfig) -> QuestionBudgetPolicy {
        if self.reflects() && !config.shared_question_policy {
            config.bucket_policy.reflection.clone()
        } else {
            config.bucket_policy.planning.clone()
        }
    }
}

const FIELDS: &[(&str, Type)] = &[
    ("posteriorEntropy", Type::Real),
    ("initialEntropy", Type::Real),
    ("maxUnfiredMarginal", Type::Real),
    ("liveParticles", Type::Int),
    ("shotsRemaining", Type::Int),
    ("questionsRemaining", Type::Int),
    ("bucketQuota", Type::Int),
    ("hasQuestion", Type::Bool),
    ("bestQuestionCollapse", Type::Real),
    ("bestShotCollapse", Type::Real),
    ("policyParameters", Type::RealMap),
    ("decision", Type::Str),
    ("predictionErrorEMA", Type::Real),
    ("calibrationErrorEMA", Type::Real),
    ("confidenceThreshold", Type::Real),
    ("lowConfidenceStreak", Type::Int),
    ("cooldownRemaining", Type::Int),
    ("revisionKind", Type::Str),
    ("revisionEnabled", Type::Bool),
    ("nextParameters", Type::RealMap),
    ("cooldown", Type::Int),
    ("cooldownTurns", Type::Int),
    ("previewDelta", Type::Real),
    ("deltaMin", Type::Real),
];

pub const BELIEF_PROGRAM: &str = "\
computed shotsLeft = shotsRemaining > 0
computed entropyReduction = initialEntropy - posteriorEntropy
computed beliefConcentrated = maxUnfiredMarginal >= 0.9
";

pub const ARGMAX_PROGRAM: &str = "\
action shoot available when shotsLeft:
    patch decision <- \"shoot\"
";

pub const PLANNING_PROGRAM: &str = "\
computed questionsOpen = hasQuestion and bucketQuota > 0 and questionsRemaining > 0
computed questionWins  = questionsOpen
                         and bestQuestionCollapse >= bestShotCollapse + policyParameters.questionMargin

action preferQuestion available when questionWins:
    patch decision <- \"ask\"
action shoot available when shotsLeft and not questionWins:
    patch decision <- \"shoot\"
";

/// The DSL program active at `level`. Levels 3 and 4 load the same text.
pub fn build_program(level: HarnessLevel) -> Program {
    let schema = Schema::from_fields(FIELDS).expect("field names are distinct");
    let mut program = Program::empty(Arc::new(schema));
    program.extend(Scope::Belief, BELIEF_PROGRAM).expect("belief program loads");
    let planning = if level.plans() { PLANNING_PROGRAM } else { ARGMAX_PROGRAM };
    program.extend(Scope::Planning, planning).expect("planning program loads");
    if level.reflects() {
        program.extend(Scope::Reflection, GATE_PROGRAM).expect("gate program loads");
    }
    program
}

fn map_value(params: &PolicyParameters) -> Value {
    Value::RealMap(params.to_map())
}

fn int(n: usize) -> i64 {
    i64::try_from(n).unwrap_or(i64::MAX)
}

/// One finished game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameRecord {
    pub summary: GameSummary,
    pub events: Vec<TraceEvent>,
}

impl GameRecord {
    pub fn jsonl(&self) -> String {
        to_jsonl(&self.events)
    }
}

/// Test hooks that are not part of the run configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GameOptions {
    /// Keep the revision gate shut on every turn.
    pub force_gate_closed: bool,
}

struct Game {
    gate: GateSettings,
    program: Program,
    state: StateRecord,
    events: Vec<TraceEvent>,
    turn: usize,
}

impl Game {
    fn emit(&mut self, phase: Option<TurnPhase>, body: EventBody) {
        self.events.push(TraceEvent { turn: self.turn, phase, body });
    }

    fn set(&mut self, field: &str, value: impl Into<Value>) -> Result<(), HarnessError> {
        self.state.patch(field, value)?;
        Ok(())
    }

    fn flag(&self, name: &str) -> Result<bool, HarnessError> {
        self.program
            .eval(&self.state, name)?
            .as_bool()
            .ok_or_else(|| DslError::RuntimeType(format!("{name} is not a bool")).into())
    }

    fn recent_events(&self) -> Vec<String> {
        let start = self.events.len().saturating_sub(crate::revision::RECENT_EVENTS);
        self.events[start..].iter().map(TraceEvent::to_json).collect()
    }
}

/// Plays one game. `client` is required for `L4` and ignored otherwise.
pub fn run_game(
    level: HarnessLevel,
    board: &BoardSpec,
    seed: u64,
    config: &RunConfig,
    client: Option<&dyn GenerationClient>,
) -> Result<GameRecord, HarnessError> {
    run_game_with(level, board, seed, config, client, GameOptions::default())
}

pub fn run_game_with(
    level: HarnessLevel,
    board: &BoardSpec,
    seed: u64,
    config: &RunConfig,
    client: Option<&dyn GenerationClient>,
    options: GameOptions,
) -> Result<GameRecord, HarnessError> {
    config.validate()?;
    let client = match (level, client) {
        (HarnessLevel::L4 { .. }, None) => {
            return Err(HarnessError::Config("L4 needs a generation client or a mock file".into()));
        }
        (HarnessLevel::L4 { .. }, Some(c)) => Some(c),
        _ => None,
    };
    let board_config = board.config(&config.base_board());
    let placement = board.placement(&config.base_board())?;
    let master = game_seed(board.id(), seed);
    let streams = Streams::new(master);
    let mut noise = streams.stream(Stream::Noise);
    let mut questions = streams.stream(Stream::Questions);
    let mut engine = Engine::new(board_config.clone(), placement)?;
    let mut posterior = Posterior::from_prior(&board_config, config.particles, streams)?;
    let initial_entropy = posterior.entropy();
    let policy = level.question_policy(config);
    let mut params = PolicyParameters::for_policy(&policy);
    let tau = level.tau(config);
    let gate = config.gate(tau.unwrap_or(0.0));
    let mut signals = ReflectionSignals::new(config.alpha, config.window());
    let program = build_program(level);

    let mut game = Game {
        gate,
        state: StateRecord::new(Arc::clone(program.schema())),
        program,
        events: Vec::new(),
        turn: 0,
    };
    game.set("initialEntropy", initial_entropy)?;
    game.set("policyParameters", map_value(&params))?;
    game.set("nextParameters", map_value(&params))?;
    game.set("confidenceThreshold", gate.tau)?;
    game.set("cooldownTurns", int(gate.cooldown_turns))?;
    game.set("deltaMin", gate.delta_min)?;
    game.set("revisionEnabled", level.revision_enabled())?;
    game.emit(
        None,
        EventBody::GameStart {
            level: level.label().to_string(),
            tau,
            board: board.id().to_string(),
            seed,
            master_seed: master,
        },
    );

    let mut llm_calls = 0;
    let mut revisions = 0;
    let mut gate_opens = 0;
    let mut provenance_counts: BTreeMap<Provenance, usize> = BTreeMap::new();
    let mut confidences: Vec<f64> = Vec::new();

    while engine.state().terminal.is_none() {
        game.turn = engine.state().turn + 1;

        // Observe / evaluate
        let max_unfired = (0..board_config.n_cells())
            .filter(|&i| !engine.state().is_fired(i))
            .map(|i| posterior.marginal(i))
            .fold(0.0, f64::max);
        game.set("posteriorEntropy", posterior.entropy())?;
        game.set("maxUnfiredMarginal", max_unfired)?;
        game.set("liveParticles", int(posterior.live_particles()))?;
        game.set("shotsRemaining", int(engine.state().shots_remaining))?;
        game.set("questionsRemaining", int(engine.state().questions_remaining))?;
        let computed = game.program.snapshot(&game.state, Scope::Belief)?;
        game.emit(
            Some(TurnPhase::ObserveEvaluate),
            EventBody::Evaluate { entropy: posterior.entropy(), live_particles: posterior.live_particles(), computed },
        );

        // Decide / act
        let phase = Some(TurnPhase::DecideAct);
        let mut computed = BTreeMap::new();
        let candidate = if level.plans() {
            let ctx = TurnContext { config: &board_config, state: engine.state(), policy: &policy, params: &params };
            let quota = ctx.quota();
            let candidates = enumerate_candidates(&posterior, &ctx, &mut questions);
            let previews = preview_all(&posterior, &candidates, board_config.noise_epsilon);
            for p in &previews {
                game.emit(phase, EventBody::Preview(*p));
            }
            let (best_q, best_s) = best_previews(&previews);
            game.set("bucketQuota", int(quota))?;
            game.set("hasQuestion", best_q.is_some())?;
            game.set("bestQuestionCollapse", best_q.map_or(0.0, |p| p.expected_collapse))?;
            game.set("bestShotCollapse", best_s.map_or(0.0, |p| p.expected_collapse))?;
            computed = game.program.snapshot(&game.state, Scope::Planning)?;
            let chosen = match game.program.available_actions(&game.state)?.first().copied() {
                Some("preferQuestion") => best_q.map(|p| p.candidate),
                Some("shoot") => best_s.map(|p| p.candidate),
                _ => None,
            };
            debug_assert_eq!(chosen, select_action(&previews, &params, quota));
            chosen
        } else {
            l1_select(&posterior, &board_config, engine.state())
        };
        let candidate = candidate.ok_or_else(|| HarnessError::Config("no legal action on a live game".into()))?;
        let action = if candidate.is_question() { "preferQuestion" } else { "shoot" };
        let (next, event) = game.program.apply_action(&game.state, action)?;
        game.state = next;
        game.emit(phase, EventBody::Action { action: event.action, candidate, patches: event.patches, computed });

        let (observation, predicted) = match candidate {
            CandidateAction::Shoot { cell } => {
                let predicted = posterior.marginal(cell.index(board_config.width));
                (Observation::Shot(engine.fire(cell, &mut noise)?), Some(predicted))
            }
            CandidateAction::Ask { question } => {
                let answer = engine.ask(question)?;
                (Observation::QuestionAnswer { question, answer }, None)
            }
        };
        posterior.update(observation, config.sweeps)?;
        game.emit(phase, EventBody::Observation { observation, predicted_prob: predicted });

        if !level.reflects() {
            continue;
        }

        // Reflect
        let phase = Some(TurnPhase::Reflect);
        match (observation, predicted) {
            (Observation::Shot(ret), Some(p)) => signals.update(p, ret.observed_hit),
            _ => signals.update_calibration_only(),
        }
        signals.record_confidence(game.gate.tau);
        confidences.push(signals.confidence());
        let preset = if options.force_gate_closed {
            None
        } else {
            select_preset(engine.state(), game.turn, posterior.entropy(), initial_entropy)
        };
        let ctx = TurnContext { config: &board_config, state: engine.state(), policy: &policy, params: &params };
        let preset_params = preset.map(|k| k.apply(&params));
        let delta_phi = match preset_params {
            Some(candidate) if gate_precondition(&signals, &game.gate) && engine.state().terminal.is_none() => {
                preview_revision(&posterior, &ctx, &candidate, &questions)
            }
            _ => 0.0,
        };
        game.set("predictionErrorEMA", signals.e_pred_ema)?;
        game.set("calibrationErrorEMA", signals.e_cal_ema)?;
        game.set("lowConfidenceStreak", int(signals.low_confidence_streak))?;
        game.set("cooldownRemaining", int(signals.cooldown_remaining))?;
        game.set("revisionKind", preset.map_or("", |k| k.name()))?;
        game.set("previewDelta", delta_phi)?;
        game.set("nextParameters", map_value(preset_params.as_ref().unwrap_or(&params)))?;
        let gate_open = game.flag("revisionRequested")?;
        gate_opens += usize::from(gate_open);
        game.emit(
            phase,
            EventBody::Reflect(ReflectRecord {
                e_pred: signals.e_pred,
                e_cal: signals.e_cal,
                e_pred_ema: signals.e_pred_ema,
                e_cal_ema: signals.e_cal_ema,
                confidence: game.real_confidence()?,
                streak: signals.low_confidence_streak,
                cooldown: signals.cooldown_remaining,
                gate_open,
                revision_kind: preset.map_or(String::new(), |k| k.name().to_string()),
                delta_phi,
            }),
        );

        // Revise
        let phase = Some(TurnPhase::Revise);
        let available = game.program.available_actions(&game.state)?.contains(&"applyRevision");
        if !available {
            signals.end_turn(None);
            game.emit(phase, EventBody::Revise(ReviseRecord { applied: false, provenance: None, preset, patches: Vec::new() }));
            continue;
        }
        let provenance = match (level, client) {
            (HarnessLevel::L4 { .. }, Some(client)) => {
                let marginals: Vec<(Cell, f64)> = (0..board_config.n_cells())
                    .filter(|&i| !engine.state().is_fired(i))
                    .map(|i| (Cell::from_index(i, board_config.width), posterior.marginal(i)))
                    .collect();
                let request = RevisionRequest::new(
                    game.turn,
                    &confidences,
                    &marginals,
                    posterior.entropy(),
                    &game.recent_events(),
                    params,
                );
                llm_calls += 1;
                let preview = |candidate: &PolicyParameters| preview_revision(&posterior, &ctx, candidate, &questions);
                let outcome = revise_with_fallback(client, &request, &params, preset, game.gate.delta_min, preview);
                game.emit(phase, EventBody::Llm(outcome.llm.clone()));
                let applied = outcome.applied.ok_or_else(|| HarnessError::Config("gate opened without a preset".into()))?;
                game.set("nextParameters", map_value(&applied))?;
                outcome.provenance.unwrap_or(Provenance::Preset)
            }
            _ => Provenance::Preset,
        };
        let (next, event) = game.program.apply_action(&game.state, "applyRevision")?;
        game.state = next;
        let map = game.state.get("policyParameters").and_then(Value::as_map).cloned().unwrap_or_default();
        params = params.with_map(&map).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cooldown = game.state.get("cooldown").and_then(Value::as_int).unwrap_or(0);
        signals.end_turn(Some(usize::try_from(cooldown).unwrap_or(0)));
        revisions += 1;
        *provenance_counts.entry(provenance).or_default() += 1;
        game.emit(
            phase,
            EventBody::Revise(ReviseRecord { applied: true, provenance: Some(provenance), preset, patches: event.patches }),
        );
    }

    let st = engine.state();
    let summary = GameSummary {
        level: level.label().to_string(),
        tau,
        board: board.id().to_string(),
        seed,
        win: st.terminal == Some(Outcome::Win),
        f1: engine.f1()?,
        turns: st.turn,
        shots: st.fired.len(),
        questions_asked: st.asked.len(),
        llm_calls,
        revisions,
        gate_opens,
        provenance_counts,
    };
    game.turn = st.turn;
    game.emit(None, EventBody::GameEnd(summary.clone()));
    Ok(GameRecord { summary, events: game.events })
}

impl Game {
    fn real_confidence(&self) -> Result<f64, HarnessError> {
        self.program
            .eval(&self.state, "modelConfidence")?
            .as_real()
            .ok_or_else(|| DslError::RuntimeType("modelConfidence is not a real".into()).into())
    }
}

#[cfg(test)]
mod tests;
