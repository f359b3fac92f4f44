//! Candidate generation, one-step previews and action selection.
//!
//! Each turn the planner proposes nine candidates (shots at the most likely
//! cells plus, when the question budget allows, count questions over random
//! rectangles), scores each by the expected drop in posterior entropy after
//! observing its outcome, and picks one.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{bernoulli_entropy, Posterior};
use crate::world::{Answer, BoardConfig, Cell, CellSet, GameState, Question, Region};

pub const CANDIDATES: usize = 9;
pub const MAX_QUESTIONS: usize = 3;
/// Turns an observed hit keeps attracting closeout bonus.
pub const RECENT_TURNS: usize = 5;
const QUESTION_TRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParameterError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    OutOfBounds { name: String, value: String, lo: String, hi: String },
}

/// Inclusive bounds of one policy parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParameterBound {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

pub const PARAMETER_BOUNDS: [ParameterBound; 5] = [
    ParameterBound { name: "questionMargin", lo: -0.5, hi: 0.5 },
    ParameterBound { name: "exploitThreshold", lo: 0.5, hi: 1.0 },
    ParameterBound { name: "roiFocusFactor", lo: 1.0, hi: 4.0 },
    ParameterBound { name: "closeoutBias", lo: 0.0, hi: 0.5 },
    ParameterBound { name: "reprobeRadius", lo: 0.0, hi: 3.0 },
];

/// The knobs revision may patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PolicyParameters {
    /// A question must beat the best shot's collapse by this much.
    pub question_margin: f64,
    /// Questions are skipped once some unfired cell is more likely than this.
    pub exploit_threshold: f64,
    /// Shots are drawn from the top `1 / roiFocusFactor` of unfired cells
    /// ranked by neighbourhood mass.
    pub roi_focus_factor: f64,
    /// Ranking bonus for cells next to a recent observed hit.
    pub closeout_bias: f64,
    /// When at least 1, one question per turn re-probes a square of this
    /// radius around the most uncertain unfired cell.
    pub reprobe_radius: f64,
}

impl Default for PolicyParameters {
    fn default() -> Self {
        PolicyParameters {
            question_margin: 0.0,
            exploit_threshold: 1.0,
            roi_focus_factor: 1.0,
            closeout_bias: 0.0,
            reprobe_radius: 0.0,
        }
    }
}

impl PolicyParameters {
    /// Defaults for a question policy (its exploit threshold, if any).
    pub fn for_policy(policy: &QuestionBudgetPolicy) -> Self {
        PolicyParameters { exploit_threshold: policy.exploit_threshold.unwrap_or(1.0), ..Default::default() }
    }

    pub fn get(&self, name: &str) -> Result<f64, ParameterError> {
        Ok(match name {
            "questionMargin" => self.question_margin,
            "exploitThreshold" => self.exploit_threshold,
            "roiFocusFactor" => self.roi_focus_factor,
            "closeoutBias" => self.closeout_bias,
            "reprobeRadius" => self.reprobe_radius,
            other => return Err(ParameterError::Unknown(other.to_string())),
        })
    }

    /// Sets one parameter after checking its bounds.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), ParameterError> {
        let bound = PARAMETER_BOUNDS
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ParameterError::Unknown(name.to_string()))?;
        if !(value.is_finite() && value >= bound.lo && value <= bound.hi) {
            return Err(ParameterError::OutOfBounds {
                name: name.to_string(),
                value: value.to_string(),
                lo: bound.lo.to_string(),
                hi: bound.hi.to_string(),
            });
        }
        let slot = match name {
            "questionMargin" => &mut self.question_margin,
            "exploitThreshold" => &mut self.exploit_threshold,
            "roiFocusFactor" => &mut self.roi_focus_factor,
            "closeoutBias" => &mut self.closeout_bias,
            _ => &mut self.reprobe_radius,
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ParameterError> {
        let mut copy = *self;
        for b in PARAMETER_BOUNDS {
            copy.set(b.name, self.get(b.name)?)?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        PARAMETER_BOUNDS
            .iter()
            .map(|b| (b.name.to_string(), self.get(b.name).expect("known name")))
            .collect()
    }

    /// Reads every known parameter from `map`; missing entries keep their
    /// current value, unknown or out-of-bounds entries are errors.
    pub fn with_map(&self, map: &BTreeMap<String, f64>) -> Result<Self, ParameterError> {
        let mut next = *self;
        for (name, value) in map {
            next.set(name, *value)?;
        }
        Ok(next)
    }

    fn reprobe_cells(&self) -> usize {
        self.reprobe_radius.round() as usize
    }
}

/// Turns `first..=last` (1-based; `last = None` means to the end of the game)
/// allow at most `quota` questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Bucket {
    pub first_turn: usize,
    pub last_turn: Option<usize>,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QuestionBudgetPolicy {
    pub buckets: Vec<Bucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploit_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("bucket boundaries must start at turn 1 and be contiguous")]
    Boundaries,
    #[error("bucket quotas sum to {total}, above the question budget {budget}")]
    OverBudget { total: usize, budget: usize },
    #[error("exploit threshold must lie in [0.5, 1]")]
    Threshold,
}

impl QuestionBudgetPolicy {
    /// Turns 1-12 with 10 questions, then 5 for the rest of the game.
    pub fn two_bucket() -> Self {
        QuestionBudgetPolicy {
            buckets: vec![
                Bucket { first_turn: 1, last_turn: Some(12), quota: 10 },
                Bucket { first_turn: 13, last_turn: None, quota: 5 },
            ],
            exploit_threshold: None,
        }
    }

    /// Turns 1-8 / 9-20 / 21+ with 4 / 3 / 1 questions, skipping questions
    /// once some cell is above 0.65.
    pub fn three_bucket() -> Self {
        QuestionBudgetPolicy {
            buckets: vec![
                Bucket { first_turn: 1, last_turn: Some(8), quota: 4 },
                Bucket { first_turn: 9, last_turn: Some(20), quota: 3 },
                Bucket { first_turn: 21, last_turn: None, quota: 1 },
            ],
            exploit_threshold: Some(0.65),
        }
    }

    pub fn validate(&self, question_budget: usize) -> Result<(), PolicyError> {
        let mut next = 1;
        for (i, b) in self.buckets.iter().enumerate() {
            let last = i + 1 == self.buckets.len();
            match b.last_turn {
                _ if b.first_turn != next => return Err(PolicyError::Boundaries),
                Some(l) if l < b.first_turn => return Err(PolicyError::Boundaries),
                Some(l) => next = l + 1,
                None if !last => return Err(PolicyError::Boundaries),
                None => {}
            }
        }
        let total: usize = self.buckets.iter().map(|b| b.quota).sum();
        if total > question_budget {
            return Err(PolicyError::OverBudget { total, budget: question_budget });
        }
        if let Some(t) = self.exploit_threshold {
            if !(0.5..=1.0).contains(&t) {
                return Err(PolicyError::Threshold);
            }
        }
        Ok(())
    }

    pub fn bucket_for(&self, turn: usize) -> Option<usize> {
        self.buckets
            .iter()
            .position(|b| turn >= b.first_turn && b.last_turn.is_none_or(|l| turn <= l))
    }

    /// Questions still allowed in the bucket containing `turn`, given the
    /// turns at which questions were already asked.
    pub fn remaining_quota(&self, turn: usize, question_turns: &[usize]) -> usize {
        let Some(i) = self.bucket_for(turn) else {
            return 0;
        };
        let b = self.buckets[i];
        let used = question_turns
            .iter()
            .filter(|&&t| t >= b.first_turn && b.last_turn.is_none_or(|l| t <= l))
            .count();
        b.quota.saturating_sub(used)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum CandidateAction {
    Shoot { cell: Cell },
    Ask { question: Question },
}

impl CandidateAction {
    pub fn is_question(&self) -> bool {
        matches!(self, CandidateAction::Ask { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Preview {
    pub candidate: CandidateAction,
    pub expected_collapse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_hit_prob: Option<f64>,
}

/// What the planner needs to know about the game besides the posterior.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    pub config: &'a BoardConfig,
    pub state: &'a GameState,
    pub policy: &'a QuestionBudgetPolicy,
    pub params: &'a PolicyParameters,
}

impl TurnContext<'_> {
    /// Index of the turn being decided (1-based).
    pub fn turn(&self) -> usize {
        self.state.turn + 1
    }

    pub fn quota(&self) -> usize {
        if self.state.questions_remaining == 0 {
            return 0;
        }
        self.policy
            .remaining_quota(self.turn(), &self.state.question_turns)
            .min(self.state.questions_remaining)
    }

    /// Cells of observed hits from the last [`RECENT_TURNS`] turns.
    pub fn recent_hits(&self) -> Vec<Cell> {
        let now = self.turn();
        self.state
            .fired
            .iter()
            .zip(&self.state.shot_turns)
            .filter(|(ret, &t)| ret.observed_hit && t + RECENT_TURNS >= now)
            .map(|(ret, _)| ret.cell)
            .collect()
    }
}

fn unfired(config: &BoardConfig, state: &GameState) -> Vec<usize> {
    (0..config.n_cells()).filter(|&i| !state.is_fired(i)).collect()
}

/// Shot ranking key: marginal plus closeout bonus next to recent hits.
pub fn shot_key(posterior: &Posterior, ctx: &TurnContext<'_>, index: usize, recent_hits: &[Cell]) -> f64 {
    let cell = Cell::from_index(index, ctx.config.width);
    let near = recent_hits.iter().any(|h| h.chebyshev(cell) <= 1);
    posterior.marginal(index) + if near { ctx.params.closeout_bias } else { 0.0 }
}

/// Sum of marginals over the 3x3 block around a cell.
fn neighbourhood_mass(posterior: &Posterior, config: &BoardConfig, index: usize) -> f64 {
    let c = Cell::from_index(index, config.width);
    let mut mass = 0.0;
    for r in c.row.saturating_sub(1)..=(c.row + 1).min(config.height - 1) {
        for col in c.col.saturating_sub(1)..=(c.col + 1).min(config.width - 1) {
            mass += posterior.marginal(Cell::new(r, col).index(config.width));
        }
    }
    mass
}

/// Unfired cells in shot-preference order: the focus pool (when
/// `roiFocusFactor > 1`) first, each part sorted by key descending then by
/// index.
fn ranked_shots(posterior: &Posterior, ctx: &TurnContext<'_>) -> Vec<usize> {
    let cells = unfired(ctx.config, ctx.state);
    let hits = ctx.recent_hits();
    let by_key = |cells: &mut Vec<usize>| {
        let keys: BTreeMap<usize, f64> = cells.iter().map(|&i| (i, shot_key(posterior, ctx, i, &hits))).collect();
        cells.sort_by(|a, b| keys[b].total_cmp(&keys[a]).then(a.cmp(b)));
    };
    let factor = ctx.params.roi_focus_factor;
    if factor <= 1.0 {
        let mut all = cells;
        by_key(&mut all);
        return all;
    }
    let keep = ((cells.len() as f64) / factor).ceil() as usize;
    let mut by_mass = cells.clone();
    let mass: BTreeMap<usize, f64> = cells.iter().map(|&i| (i, neighbourhood_mass(posterior, ctx.config, i))).collect();
    by_mass.sort_by(|a, b| mass[b].total_cmp(&mass[a]).then(a.cmp(b)));
    let mut pool: Vec<usize> = by_mass[..keep].to_vec();
    let mut rest: Vec<usize> = by_mass[keep..].to_vec();
    by_key(&mut pool);
    by_key(&mut rest);
    pool.extend(rest);
    pool
}

/// Whether this turn may ask at all.
pub fn questions_allowed(posterior: &Posterior, ctx: &TurnContext<'_>) -> bool {
    if ctx.quota() == 0 {
        return false;
    }
    let max_unfired = unfired(ctx.config, ctx.state)
        .into_iter()
        .map(|i| posterior.marginal(i))
        .fold(0.0, f64::max);
    max_unfired <= ctx.params.exploit_threshold
}

fn region_mass(posterior: &Posterior, region: &Region, width: usize) -> f64 {
    region.mask(width).iter().map(|i| posterior.marginal(i)).sum()
}

/// Up to `n` count questions: a re-probe square first when configured, then
/// random rectangles of area 4-16 whose marginal mass is neither nearly
/// empty nor nearly full.
fn generate_questions<R: Rng + ?Sized>(
    posterior: &Posterior,
    ctx: &TurnContext<'_>,
    n: usize,
    rng: &mut R,
) -> Vec<Question> {
    let (w, h) = (ctx.config.width, ctx.config.height);
    let mut out: Vec<Question> = Vec::with_capacity(n);
    let radius = ctx.params.reprobe_cells();
    if radius >= 1 && n > 0 {
        let centre = unfired(ctx.config, ctx.state).into_iter().max_by(|&a, &b| {
            bernoulli_entropy(posterior.marginal(a))
                .total_cmp(&bernoulli_entropy(posterior.marginal(b)))
                .then(b.cmp(&a))
        });
        if let Some(i) = centre {
            let c = Cell::from_index(i, w);
            let region = Region::new(
                c.row.saturating_sub(radius),
                c.col.saturating_sub(radius),
                (c.row + radius).min(h - 1),
                (c.col + radius).min(w - 1),
            );
            out.push(Question::count(region));
        }
    }
    let shapes: Vec<(usize, usize)> = (1..=h)
        .flat_map(|rh| (1..=w).map(move |rw| (rh, rw)))
        .filter(|(rh, rw)| (4..=16).contains(&(rh * rw)))
        .collect();
    if shapes.is_empty() {
        return out;
    }
    let mut tries = 0;
    while out.len() < n && tries < QUESTION_TRIES * n {
        tries += 1;
        let (rh, rw) = shapes[rng.random_range(0..shapes.len())];
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        let region = Region::new(top, left, top + rh - 1, left + rw - 1);
        let area = region.area() as f64;
        let mass = region_mass(posterior, &region, w);
        if mass > 0.05 * area && mass < 0.95 * area {
            let q = Question::count(region);
            if !out.contains(&q) {
                out.push(q);
            }
        }
    }
    out
}

/// The nine candidates of one turn: shots first (best first), then
/// questions. Fewer than nine only when fewer unfired cells remain, in which
/// case every unfired cell is a shot candidate.
pub fn enumerate_candidates<R: Rng + ?Sized>(
    posterior: &Posterior,
    ctx: &TurnContext<'_>,
    rng: &mut R,
) -> Vec<CandidateAction> {
    let shots = ranked_shots(posterior, ctx);
    if shots.len() < CANDIDATES {
        return shots
            .into_iter()
            .map(|i| CandidateAction::Shoot { cell: Cell::from_index(i, ctx.config.width) })
            .collect();
    }
    let questions = if questions_allowed(posterior, ctx) {
        generate_questions(posterior, ctx, MAX_QUESTIONS, rng)
    } else {
        Vec::new()
    };
    let n_shots = CANDIDATES - questions.len();
    shots[..n_shots]
        .iter()
        .map(|&i| CandidateAction::Shoot { cell: Cell::from_index(i, ctx.config.width) })
        .chain(questions.into_iter().map(|question| CandidateAction::Ask { question }))
        .collect()
}

/// Live particles as equally weighted occupancy sets.
fn particle_sets(posterior: &Posterior) -> Vec<CellSet> {
    posterior
        .particles()
        .iter()
        .filter(|p| p.is_live())
        .map(|p| p.placement.occupied())
        .collect()
}

/// Marginal entropy of a weighted set of occupancy sets.
fn weighted_entropy(sets: &[CellSet], weights: &[f64], n_cells: usize) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut mass = vec![0.0; n_cells];
    for (set, w) in sets.iter().zip(weights) {
        if *w > 0.0 {
            for i in set.iter() {
                mass[i] += w;
            }
        }
    }
    mass.iter().map(|m| bernoulli_entropy((m / total).clamp(0.0, 1.0))).sum()
}

/// Expected one-step entropy drop from taking `candidate`, computed by
/// reweighting the live particles under each possible outcome. Shots have
/// two outcomes (observed hit or miss, with noise `epsilon`); questions have
/// one outcome per answer value realized by some particle. The posterior
/// itself is only read.
pub fn sim_next(posterior: &Posterior, candidate: &CandidateAction, epsilon: f64) -> Preview {
    let sets = particle_sets(posterior);
    let n_cells = posterior.geometry().n_cells();
    let width = posterior.geometry().width();
    let uniform = vec![1.0; sets.len()];
    let before = weighted_entropy(&sets, &uniform, n_cells);
    let n = sets.len() as f64;

    match candidate {
        CandidateAction::Shoot { cell } => {
            let index = cell.index(width);
            let occupied = sets.iter().filter(|s| s.contains(index)).count() as f64;
            let hit_prob = if n > 0.0 { occupied / n } else { 0.0 };
            let mut after = 0.0;
            for observed in [true, false] {
                let weights: Vec<f64> = sets
                    .iter()
                    .map(|s| if s.contains(index) == observed { 1.0 - epsilon } else { epsilon })
                    .collect();
                let p_outcome = weights.iter().sum::<f64>() / n.max(1.0);
                if p_outcome > 0.0 {
                    after += p_outcome * weighted_entropy(&sets, &weights, n_cells);
                }
            }
            Preview { candidate: *candidate, expected_collapse: before - after, expected_hit_prob: Some(hit_prob) }
        }
        CandidateAction::Ask { question } => {
            let mut groups: BTreeMap<Answer, Vec<usize>> = BTreeMap::new();
            for (k, s) in sets.iter().enumerate() {
                groups.entry(question.answer_for(*s, width)).or_default().push(k);
            }
            let mut after = 0.0;
            for members in groups.values() {
                let mut weights = vec![0.0; sets.len()];
                for &k in members {
                    weights[k] = 1.0;
                }
                after += members.len() as f64 / n * weighted_entropy(&sets, &weights, n_cells);
            }
            Preview { candidate: *candidate, expected_collapse: before - after, expected_hit_prob: None }
        }
    }
}

/// All previews of one turn, in candidate order.
pub fn preview_all(posterior: &Posterior, candidates: &[CandidateAction], epsilon: f64) -> Vec<Preview> {
    candidates.iter().map(|c| sim_next(posterior, c, epsilon)).collect()
}

/// Best question preview (largest collapse, first on ties) and best shot
/// preview (the first shot, i.e. the highest shot key).
pub fn best_previews(previews: &[Preview]) -> (Option<&Preview>, Option<&Preview>) {
    let mut best_q: Option<&Preview> = None;
    let mut best_s: Option<&Preview> = None;
    for p in previews {
        match p.candidate {
            CandidateAction::Ask { .. } => {
                if best_q.is_none_or(|b| p.expected_collapse > b.expected_collapse) {
                    best_q = Some(p);
                }
            }
            CandidateAction::Shoot { .. } => {
                best_s = best_s.or(Some(p));
            }
        }
    }
    (best_q, best_s)
}

/// Picks the best question when questions are still allowed and its
/// collapse is at least the best shot's plus `questionMargin`; otherwise the
/// best shot. Shots do not compete on collapse among themselves: the best
/// shot is the first one, since candidates arrive in shot-key order.
pub fn select_action(previews: &[Preview], params: &PolicyParameters, quota: usize) -> Option<CandidateAction> {
    let (q, s) = best_previews(previews);
    match (q, s) {
        (Some(q), Some(s)) if quota > 0 && q.expected_collapse >= s.expected_collapse + params.question_margin => {
            Some(q.candidate)
        }
        (Some(q), None) if quota > 0 => Some(q.candidate),
        (_, Some(s)) => Some(s.candidate),
        _ => None,
    }
}

/// Belief-only policy: the unfired cell with the highest marginal, lowest
/// `(row, col)` on ties. Returns `None` when every cell has been fired.
pub fn l1_select(posterior: &Posterior, config: &BoardConfig, state: &GameState) -> Option<CandidateAction> {
    let mut best: Option<(usize, f64)> = None;
    for i in unfired(config, state) {
        let m = posterior.marginal(i);
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| CandidateAction::Shoot { cell: Cell::from_index(i, config.width) })
}
