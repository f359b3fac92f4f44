//! Per-turn error signals, model confidence, the revision gate and the
//! preset library used when the gate opens.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::Posterior;
use crate::planning::{enumerate_candidates, preview_all, select_action, PolicyParameters, Preview, TurnContext};
use crate::world::GameState;

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const CALIBRATION_WINDOW: usize = 10;
pub const DEFAULT_TAU: f64 = 0.72;
pub const DEFAULT_DELTA_MIN: f64 = 0.01;
pub const DEFAULT_STREAK: usize = 2;
pub const DEFAULT_COOLDOWN: usize = 3;

/// Turns looked back over when searching for hit clusters.
const CLUSTER_TURNS: usize = 5;

/// The gate as a DSL program, reflection scope. `positivePreview` is the
/// host-side preview delta compared against `deltaMin`; the rest is the
/// gate listing as written.
pub const GATE_PROGRAM: &str = "\
computed positivePreview = previewDelta >= deltaMin
computed modelConfidence = 1 - (predictionErrorEMA
                               + calibrationErrorEMA) / 2
computed confident       = modelConfidence >= confidenceThreshold
computed sustained       = lowConfidenceStreak >= 2
computed canRevise       = not confident
                           and (cooldownRemaining == 0)
computed revisionRequested = canRevise and sustained
                             and positivePreview
                             and (revisionKind != \"\")
computed shouldRevise    = revisionEnabled and revisionRequested

action applyRevision available when shouldRevise:
    patch policyParameters <- nextParameters
    patch cooldown         <- cooldownTurns
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReflectionSignals {
    pub e_pred: f64,
    pub e_cal: f64,
    #[serde(rename = "ePredEMA")]
    pub e_pred_ema: f64,
    #[serde(rename = "eCalEMA")]
    pub e_cal_ema: f64,
    pub alpha: f64,
    pub low_confidence_streak: usize,
    pub cooldown_remaining: usize,
    /// `(predicted, outcome)` pairs, oldest first.
    pub cal_window: VecDeque<(f64, f64)>,
    pub window: usize,
}

impl Default for ReflectionSignals {
    fn default() -> Self {
        ReflectionSignals::new(DEFAULT_ALPHA, CALIBRATION_WINDOW)
    }
}

impl ReflectionSignals {
    pub fn new(alpha: f64, window: usize) -> Self {
        ReflectionSignals {
            e_pred: 0.0,
            e_cal: 0.0,
            e_pred_ema: 0.0,
            e_cal_ema: 0.0,
            alpha,
            low_confidence_streak: 0,
            cooldown_remaining: 0,
            cal_window: VecDeque::with_capacity(window),
            window: window.max(1),
        }
    }

    fn ema(&self, old: f64, e: f64) -> f64 {
        (self.alpha * e + (1.0 - self.alpha) * old).clamp(0.0, 1.0)
    }

    fn window_gap(&self) -> f64 {
        if self.cal_window.is_empty() {
            return 0.0;
        }
        let n = self.cal_window.len() as f64;
        let (p, y) = self.cal_window.iter().fold((0.0, 0.0), |(p, y), (a, b)| (p + a, y + b));
        ((p - y) / n).abs().clamp(0.0, 1.0)
    }

    /// Scores one prediction against its outcome and advances both EMAs.
    pub fn update(&mut self, predicted: f64, outcome: bool) {
        let p = predicted.clamp(0.0, 1.0);
        let y = if outcome { 1.0 } else { 0.0 };
        self.e_pred = (p - y).abs();
        if self.cal_window.len() == self.window {
            self.cal_window.pop_front();
        }
        self.cal_window.push_back((p, y));
        self.e_cal = self.window_gap();
        self.e_pred_ema = self.ema(self.e_pred_ema, self.e_pred);
        self.e_cal_ema = self.ema(self.e_cal_ema, self.e_cal);
    }

    /// Turns without a scored prediction (questions) advance only the
    /// calibration EMA, using the unchanged window.
    pub fn update_calibration_only(&mut self) {
        self.e_cal = self.window_gap();
        self.e_cal_ema = self.ema(self.e_cal_ema, self.e_cal);
    }

    pub fn confidence(&self) -> f64 {
        confidence(self.e_pred_ema, self.e_cal_ema)
    }

    /// Streak bookkeeping for the reflect phase.
    pub fn record_confidence(&mut self, tau: f64) {
        if self.confidence() < tau {
            self.low_confidence_streak += 1;
        } else {
            self.low_confidence_streak = 0;
        }
    }

    /// End of turn: either a revision just set the cooldown, or it ticks down.
    pub fn end_turn(&mut self, revised_cooldown: Option<usize>) {
        self.cooldown_remaining = match revised_cooldown {
            Some(c) => c,
            None => self.cooldown_remaining.saturating_sub(1),
        };
    }
}

pub fn confidence(e_pred_ema: f64, e_cal_ema: f64) -> f64 {
    (1.0 - (e_pred_ema + e_cal_ema) / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GateSettings {
    pub tau: f64,
    pub streak: usize,
    pub delta_min: f64,
    pub cooldown_turns: usize,
}

impl Default for GateSettings {
    fn default() -> Self {
        GateSettings {
            tau: DEFAULT_TAU,
            streak: DEFAULT_STREAK,
            delta_min: DEFAULT_DELTA_MIN,
            cooldown_turns: DEFAULT_COOLDOWN,
        }
    }
}

/// Every gate condition except the preview.
pub fn gate_precondition(signals: &ReflectionSignals, settings: &GateSettings) -> bool {
    signals.confidence() < settings.tau
        && signals.low_confidence_streak >= settings.streak
        && signals.cooldown_remaining == 0
}

pub fn gate_open(signals: &ReflectionSignals, settings: &GateSettings, delta_phi: f64) -> bool {
    gate_precondition(signals, settings) && delta_phi >= settings.delta_min
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    CoarseRoiCollapse,
    ClusterCloseoutBias,
    LateDiffuseReprobe,
}

impl PresetKind {
    pub const ALL: [PresetKind; 3] =
        [PresetKind::CoarseRoiCollapse, PresetKind::ClusterCloseoutBias, PresetKind::LateDiffuseReprobe];

    pub fn name(self) -> &'static str {
        match self {
            PresetKind::CoarseRoiCollapse => "coarse_roi_collapse",
            PresetKind::ClusterCloseoutBias => "cluster_closeout_bias",
            PresetKind::LateDiffuseReprobe => "late_diffuse_reprobe",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        PresetKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Parameter assignments this preset makes.
    pub fn assignments(self) -> &'static [(&'static str, f64)] {
        match self {
            PresetKind::CoarseRoiCollapse => &[("roiFocusFactor", 2.0)],
            PresetKind::ClusterCloseoutBias => &[("closeoutBias", 0.3)],
            PresetKind::LateDiffuseReprobe => &[("reprobeRadius", 2.0), ("questionMargin", -0.1)],
        }
    }

    pub fn apply(self, params: &PolicyParameters) -> PolicyParameters {
        let mut out = *params;
        for &(name, value) in self.assignments() {
            out.set(name, value).expect("preset values lie within bounds");
        }
        out
    }
}

/// Which preset, if any, fits the game right now. `turn` is the turn just
/// played; triggers are checked in the order coarse, cluster, late.
pub fn select_preset(
    state: &GameState,
    turn: usize,
    entropy: f64,
    initial_entropy: f64,
) -> Option<PresetKind> {
    if turn <= 4 && entropy > 0.8 * initial_entropy {
        return Some(PresetKind::CoarseRoiCollapse);
    }
    let hits: Vec<_> = state
        .fired
        .iter()
        .zip(&state.shot_turns)
        .filter(|(r, &t)| r.observed_hit && t + CLUSTER_TURNS > turn)
        .map(|(r, _)| r.cell)
        .collect();
    let clustered = hits
        .iter()
        .enumerate()
        .any(|(i, a)| hits[i + 1..].iter().any(|b| a.chebyshev(*b) <= 2));
    if clustered {
        return Some(PresetKind::ClusterCloseoutBias);
    }
    if state.shots_remaining <= 10 && entropy > 0.5 * initial_entropy {
        return Some(PresetKind::LateDiffuseReprobe);
    }
    None
}

/// The preview of the action the planner would pick next turn. Question
/// candidates are drawn from a copy of `rng`, so the live stream is left
/// alone and two calls with the same `rng` see the same questions.
pub fn preview_selection<R: Rng + Clone>(posterior: &Posterior, ctx: &TurnContext<'_>, rng: &R) -> Option<Preview> {
    let mut rng = rng.clone();
    let candidates = enumerate_candidates(posterior, ctx, &mut rng);
    let previews = preview_all(posterior, &candidates, ctx.config.noise_epsilon);
    let choice = select_action(&previews, ctx.params, ctx.quota())?;
    previews.into_iter().find(|p| p.candidate == choice)
}

/// Collapse of next turn's selected action under `candidate` minus the same
/// under the current parameters.
pub fn preview_revision<R: Rng + Clone>(
    posterior: &Posterior,
    ctx: &TurnContext<'_>,
    candidate: &PolicyParameters,
    rng: &R,
) -> f64 {
    let collapse = |ctx: &TurnContext<'_>| preview_selection(posterior, ctx, rng).map_or(0.0, |p| p.expected_collapse);
    let current = collapse(ctx);
    let revised = collapse(&TurnContext { params: candidate, ..*ctx });
    revised - current
}
