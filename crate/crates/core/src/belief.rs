//! Particle posterior over ship placements.
//!
//! Particles are equally weighted states of independent Metropolis–Hastings
//! chains that target the posterior directly; there is no resampling. A
//! particle whose placement contradicts a noiseless observation (any question
//! answer, or any shot when epsilon is zero) carries zero weight until its
//! chain moves back into the support.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Stream, Streams};
use crate::world::{
    place_fleet_with, Answer, BoardConfig, CellSet, Geometry, Observation, Placement, QuestionKind,
    Ship, WorldError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("no placement is consistent with the observations")]
    DegeneratePosterior,
    #[error("more than {0} legal placements; too large to enumerate")]
    TooLargeToEnumerate(u64),
    #[error(transparent)]
    World(#[from] WorldError),
}

pub const DEFAULT_PARTICLES: usize = 500;
pub const DEFAULT_SWEEPS: usize = 20;
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BeliefConfig {
    pub particles: usize,
    pub sweeps: usize,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        BeliefConfig { particles: DEFAULT_PARTICLES, sweeps: DEFAULT_SWEEPS }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AnsweredRegion {
    mask: CellSet,
    kind: QuestionKind,
    answer: Answer,
}

/// Observations in arrival order, plus the bit masks the likelihood needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    observations: Vec<Observation>,
    width: usize,
    shot_hits: CellSet,
    shot_misses: CellSet,
    regions: Vec<AnsweredRegion>,
}

impl History {
    pub fn new(width: usize) -> Self {
        History { width, ..History::default() }
    }

    pub fn from_observations(width: usize, observations: &[Observation]) -> Self {
        let mut h = History::new(width);
        for &obs in observations {
            h.push(obs);
        }
        h
    }

    pub fn push(&mut self, obs: Observation) {
        match obs {
            Observation::Shot(ret) => {
                let index = ret.cell.index(self.width);
                if ret.observed_hit {
                    self.shot_hits.insert(index);
                } else {
                    self.shot_misses.insert(index);
                }
            }
            Observation::QuestionAnswer { question, answer } => {
                self.regions.push(AnsweredRegion {
                    mask: question.region.mask(self.width),
                    kind: question.kind,
                    answer,
                });
            }
        }
        self.observations.push(obs);
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn shots(&self) -> usize {
        self.shot_hits.len() + self.shot_misses.len()
    }

    /// Natural log of the observation likelihood for an occupancy set.
    pub fn log_likelihood(&self, occupied: CellSet, epsilon: f64) -> f64 {
        for r in &self.regions {
            let inside = occupied.intersection(r.mask).len();
            let consistent = match (r.kind, r.answer) {
                (QuestionKind::Count, Answer::Count(n)) => inside == n as usize,
                (QuestionKind::Any, Answer::Any(b)) => (inside > 0) == b,
                _ => false,
            };
            if !consistent {
                return f64::NEG_INFINITY;
            }
        }
        self.shot_log_likelihood(occupied, epsilon)
    }

    /// The shot part of [`History::log_likelihood`].
    pub fn shot_log_likelihood(&self, occupied: CellSet, epsilon: f64) -> f64 {
        let shots = self.shots();
        if shots == 0 {
            return 0.0;
        }
        let mismatched = occupied.intersection(self.shot_misses).len()
            + self.shot_hits.difference(occupied).len();
        let matched = shots - mismatched;
        let mut ll = 0.0;
        if mismatched > 0 {
            if epsilon == 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += mismatched as f64 * epsilon.ln();
        }
        if matched > 0 {
            ll += matched as f64 * (1.0 - epsilon).ln();
        }
        ll
    }
}

impl History {
    /// Distance from the noiseless constraints: the summed gaps of count
    /// answers, wrong yes/no answers, and (when `epsilon` is 0) mismatched
    /// shots. Zero exactly when the likelihood is positive.
    pub fn violation(&self, occupied: CellSet, epsilon: f64) -> usize {
        let mut v = 0;
        for r in &self.regions {
            let inside = occupied.intersection(r.mask).len();
            v += match (r.kind, r.answer) {
                (QuestionKind::Count, Answer::Count(n)) => inside.abs_diff(n as usize),
                (QuestionKind::Any, Answer::Any(b)) => usize::from((inside > 0) != b),
                _ => 1,
            };
        }
        if epsilon == 0.0 {
            v += occupied.intersection(self.shot_misses).len() + self.shot_hits.difference(occupied).len();
        }
        v
    }
}

impl History {
    /// Whether `occupied` can still be completed into a consistent set by
    /// adding at most `remaining` more cells.
    fn completable(&self, occupied: CellSet, remaining: usize, epsilon: f64) -> bool {
        for r in &self.regions {
            let inside = occupied.intersection(r.mask).len();
            let room = r.mask.difference(occupied).len().min(remaining);
            let ok = match (r.kind, r.answer) {
                (QuestionKind::Count, Answer::Count(n)) => inside <= n as usize && inside + room >= n as usize,
                (QuestionKind::Any, Answer::Any(true)) => inside > 0 || room > 0,
                (QuestionKind::Any, Answer::Any(false)) => inside == 0,
                _ => false,
            };
            if !ok {
                return false;
            }
        }
        epsilon > 0.0
            || (!occupied.intersects(self.shot_misses) && self.shot_hits.difference(occupied).len() <= remaining)
    }
}

/// Noisy-channel likelihood of a history under one placement.
pub fn likelihood(placement: &Placement, history: &History, epsilon: f64) -> f64 {
    history.log_likelihood(placement.occupied(), epsilon).exp()
}

/// One posterior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub placement: Placement,
    /// Log-likelihood of the conditioning history; `-inf` marks a particle
    /// that currently contradicts a noiseless observation (zero weight).
    pub log_weight: f64,
}

impl Particle {
    pub fn new(placement: Placement, history: &History, epsilon: f64) -> Self {
        let log_weight = history.log_likelihood(placement.occupied(), epsilon);
        Particle { placement, log_weight }
    }

    pub fn is_live(&self) -> bool {
        self.log_weight.is_finite()
    }
}

/// One MH step: with probability one half a single-ship move, otherwise a
/// two-ship block move (see [`gibbs_ship_step`], [`mh_pair_step`]). Returns
/// whether the proposal was accepted (a proposal may equal the current
/// state).
pub fn mh_step<R: Rng + ?Sized>(
    particle: &mut Particle,
    geometry: &Geometry,
    history: &History,
    epsilon: f64,
    rng: &mut R,
) -> bool {
    if particle.placement.ships().len() >= 2 && rng.random_bool(0.5) {
        mh_pair_step(particle, geometry, history, epsilon, rng)
    } else {
        gibbs_ship_step(particle, geometry, history, epsilon, rng)
    }
}

/// Likelihood-weighted legal positions of one ship with the rest of the
/// fleet (`others`) held fixed. Weights are relative to the best position;
/// the total is zero when no position is consistent.
fn ship_conditional(
    positions: &[(Ship, CellSet)],
    others: CellSet,
    history: &History,
    epsilon: f64,
    out: &mut Vec<(usize, f64)>,
) -> (f64, f64) {
    out.clear();
    let mut best = f64::NEG_INFINITY;
    for (k, (_, mask)) in positions.iter().enumerate() {
        if mask.intersects(others) {
            continue;
        }
        let ll = history.log_likelihood(others.union(*mask), epsilon);
        if ll > f64::NEG_INFINITY {
            best = best.max(ll);
            out.push((k, ll));
        }
    }
    let mut total = 0.0;
    for (_, w) in out.iter_mut() {
        *w = (*w - best).exp();
        total += *w;
    }
    (total, best)
}

/// Draws an index from `weights` with probability proportional to weight.
fn draw_weighted<R: Rng + ?Sized>(weights: &[(usize, f64)], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    for &(k, w) in weights {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights[weights.len() - 1].0
}

/// Re-place a uniformly chosen ship by drawing from its exact conditional
/// given the other ships and the history (an MH move whose proposal is the
/// conditional itself, hence always accepted). A particle with no consistent
/// position for that ship falls back to [`mh_single_step`].
pub fn gibbs_ship_step<R: Rng + ?Sized>(
    particle: &mut Particle,
    geometry: &Geometry,
    history: &History,
    epsilon: f64,
    rng: &mut R,
) -> bool {
    let ships = particle.placement.ships();
    if ships.is_empty() {
        return false;
    }
    let index = rng.random_range(0..ships.len());
    let ship = ships[index];
    let others = particle.placement.occupied().difference(ship.mask(geometry.width()));
    let positions = geometry.positions(ship.len);
    let mut weights = Vec::with_capacity(positions.len());
    let (total, _) = ship_conditional(positions, others, history, epsilon, &mut weights);
    if total == 0.0 {
        return mh_single_step(particle, geometry, history, epsilon, rng);
    }
    let (new_ship, new_mask) = positions[draw_weighted(&weights, total, rng)];
    let occupied = others.union(new_mask);
    particle.placement.move_ships(&[(index, new_ship)], occupied);
    particle.log_weight = history.log_likelihood(occupied, epsilon);
    true
}

fn accept<R: Rng + ?Sized>(current_ll: f64, proposed_ll: f64, log_q_ratio: f64, rng: &mut R) -> bool {
    if current_ll == f64::NEG_INFINITY {
        return true;
    }
    let log_ratio = proposed_ll - current_ll + log_q_ratio;
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

fn legal_count(positions: &[(Ship, CellSet)], blocked: CellSet) -> usize {
    positions.iter().filter(|(_, m)| !m.intersects(blocked)).count()
}

fn nth_legal(positions: &[(Ship, CellSet)], blocked: CellSet, n: usize) -> (Ship, CellSet) {
    *positions
        .iter()
        .filter(|(_, m)| !m.intersects(blocked))
        .nth(n)
        .expect("n < legal count")
}

/// Re-place a uniformly chosen ship uniformly among its legal positions with
/// the other ships held fixed; accept with `min(1, L(proposed) / L(current))`.
/// The proposal is symmetric, and the current position is always legal, so a
/// ship with no alternative proposes itself.
pub fn mh_single_step<R: Rng + ?Sized>(
    particle: &mut Particle,
    geometry: &Geometry,
    history: &History,
    epsilon: f64,
    rng: &mut R,
) -> bool {
    let ships = particle.placement.ships();
    if ships.is_empty() {
        return false;
    }
    let index = rng.random_range(0..ships.len());
    let ship = ships[index];
    let old_mask = ship.mask(geometry.width());
    let others = particle.placement.occupied().difference(old_mask);
    let positions = geometry.positions(ship.len);
    let legal = legal_count(positions, others);
    if legal == 0 {
        return false;
    }
    let (new_ship, new_mask) = nth_legal(positions, others, rng.random_range(0..legal));
    let proposed_ll = history.log_likelihood(others.union(new_mask), epsilon);
    if accept(particle.log_weight, proposed_ll, 0.0, rng) {
        particle.placement.move_ships(&[(index, new_ship)], others.union(new_mask));
        particle.log_weight = proposed_ll;
        true
    } else {
        false
    }
}

/// Block move on two ships `a`, `b`: `a` is proposed uniformly among
/// positions clear of the remaining fleet and `b` is drawn from its exact
/// conditional given the new `a`. With `b` integrated out the acceptance
/// ratio is `Z(a') / Z(a)`, where `Z(a)` sums the likelihood over every
/// legal position of `b` next to `a`.
///
/// Single-ship moves alone cannot cross between placements separated by a
/// hard constraint (a count answer that one ship can only satisfy if another
/// moves first); block moves connect them.
pub fn mh_pair_step<R: Rng + ?Sized>(
    particle: &mut Particle,
    geometry: &Geometry,
    history: &History,
    epsilon: f64,
    rng: &mut R,
) -> bool {
    let ships = particle.placement.ships();
    let k = ships.len();
    if k < 2 {
        return false;
    }
    let first = rng.random_range(0..k);
    let second = (first + 1 + rng.random_range(0..k - 1)) % k;
    let width = geometry.width();
    let (a, b) = (ships[first], ships[second]);
    let (a_old, b_old) = (a.mask(width), b.mask(width));
    let rest = particle.placement.occupied().difference(a_old).difference(b_old);

    let a_positions = geometry.positions(a.len);
    let b_positions = geometry.positions(b.len);
    let n_a = legal_count(a_positions, rest);
    if n_a == 0 {
        return false;
    }
    let (a_ship, a_new) = nth_legal(a_positions, rest, rng.random_range(0..n_a));
    let mut weights = Vec::with_capacity(b_positions.len());
    let (z_new, best_new) = ship_conditional(b_positions, rest.union(a_new), history, epsilon, &mut weights);
    if z_new == 0.0 {
        return false;
    }
    let b_index = draw_weighted(&weights, z_new, rng);
    let (b_ship, b_new) = b_positions[b_index];
    let mut scratch = Vec::with_capacity(b_positions.len());
    let (z_old, best_old) = ship_conditional(b_positions, rest.union(a_old), history, epsilon, &mut scratch);

    let occupied = rest.union(a_new).union(b_new);
    let proposed_ll = history.log_likelihood(occupied, epsilon);
    if z_old == 0.0 || !particle.is_live() {
        // current state has zero weight: any consistent proposal is taken
        particle.placement.move_ships(&[(first, a_ship), (second, b_ship)], occupied);
        particle.log_weight = proposed_ll;
        return true;
    }
    let log_ratio = (best_new + z_new.ln()) - (best_old + z_old.ln());
    if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
        particle.placement.move_ships(&[(first, a_ship), (second, b_ship)], occupied);
        particle.log_weight = proposed_ll;
        true
    } else {
        false
    }
}

/// Particle approximation of the posterior plus its cell marginals.
#[derive(Debug, Clone)]
pub struct Posterior {
    geometry: Arc<Geometry>,
    epsilon: f64,
    streams: Streams,
    updates: u64,
    particles: Vec<Particle>,
    marginals: Vec<f64>,
    history: History,
}

impl Posterior {
    /// `n` particles drawn from the uniform prior over legal placements.
    pub fn from_prior(config: &BoardConfig, n: usize, streams: Streams) -> Result<Self, BeliefError> {
        config.validate()?;
        let geometry = Arc::new(Geometry::for_config(config));
        let particles = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(streams.derive_seed(Stream::Mh, 0, i as u64));
                place_fleet_with(&geometry, &config.fleet, &mut rng)
                    .map(|placement| Particle { placement, log_weight: 0.0 })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Posterior::assemble(geometry, config.noise_epsilon, streams, particles, History::new(config.width))
    }

    /// A posterior over explicitly given placements (weights computed from
    /// `history`). Used for constructed scenarios and hypothetical analysis.
    pub fn from_placements(
        geometry: Arc<Geometry>,
        epsilon: f64,
        placements: Vec<Placement>,
        history: History,
    ) -> Result<Self, BeliefError> {
        let particles = placements
            .into_iter()
            .map(|p| Particle::new(p, &history, epsilon))
            .collect();
        Posterior::assemble(geometry, epsilon, Streams::new(0), particles, history)
    }

    fn assemble(
        geometry: Arc<Geometry>,
        epsilon: f64,
        streams: Streams,
        particles: Vec<Particle>,
        history: History,
    ) -> Result<Self, BeliefError> {
        let mut posterior = Posterior {
            marginals: vec![0.0; geometry.n_cells()],
            geometry,
            epsilon,
            streams,
            updates: 0,
            particles,
            history,
        };
        posterior.recompute_marginals()?;
        Ok(posterior)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn geometry_arc(&self) -> Arc<Geometry> {
        Arc::clone(&self.geometry)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    pub fn marginal(&self, index: usize) -> f64 {
        self.marginals[index]
    }

    /// Marginals rounded to four decimals, as written to trace logs.
    pub fn rounded_marginals(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| (m * 1e4).round() / 1e4).collect()
    }

    pub fn live_particles(&self) -> usize {
        self.particles.iter().filter(|p| p.is_live()).count()
    }

    /// Rao-Blackwellized estimate: for each live particle and each ship,
    /// the ship's exact conditional coverage given the rest of the particle,
    /// averaged over ships and particles. Unbiased for the same target as
    /// raw occupancy frequencies, with lower variance.
    fn recompute_marginals(&mut self) -> Result<(), BeliefError> {
        let n_cells = self.geometry.n_cells();
        let (geometry, history, epsilon) = (&*self.geometry, &self.history, self.epsilon);
        // Fixed chunks summed in order keep the result independent of how
        // rayon schedules the work.
        let partial: Vec<(Vec<f64>, usize)> = self
            .particles
            .par_chunks(MARGINAL_CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0f64; n_cells];
                let mut scratch = Vec::new();
                let mut live = 0;
                for p in chunk.iter().filter(|p| p.is_live()) {
                    particle_coverage(p, geometry, history, epsilon, &mut acc, &mut scratch);
                    live += 1;
                }
                (acc, live)
            })
            .collect();
        let mut sums = vec![0.0f64; n_cells];
        let mut live = 0;
        for (acc, l) in partial {
            sums.iter_mut().zip(acc).for_each(|(x, y)| *x += y);
            live += l;
        }
        if live == 0 {
            return Err(BeliefError::DegeneratePosterior);
        }
        for (m, s) in self.marginals.iter_mut().zip(sums) {
            *m = (s / live as f64).clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// Conditions on one more observation: every particle takes `sweeps` MH
    /// steps against the extended history, then marginals are recomputed.
    pub fn update(&mut self, obs: Observation, sweeps: usize) -> Result<(), BeliefError> {
        self.history.push(obs);
        self.updates += 1;
        let (geometry, history, epsilon) = (&*self.geometry, &self.history, self.epsilon);
        let (streams, update) = (self.streams, self.updates);
        self.particles.par_iter_mut().for_each(|particle| {
            particle.log_weight = history.log_likelihood(particle.placement.occupied(), epsilon);
        });
        let survivors: Vec<Particle> = self.particles.iter().filter(|p| p.is_live()).cloned().collect();
        self.particles.par_iter_mut().enumerate().for_each(|(i, particle)| {
            let mut rng = ChaCha8Rng::seed_from_u64(streams.derive_seed(Stream::Mh, update, i as u64));
            if !particle.is_live() {
                regenerate(particle, geometry, history, epsilon, &survivors, &mut rng);
            }
            for _ in 0..sweeps {
                mh_step(particle, geometry, history, epsilon, &mut rng);
            }
        });
        self.recompute_marginals()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.marginals)
    }
}

const MARGINAL_CHUNK: usize = 32;

/// Prior draws a zero-weight particle may spend looking for the support.
pub const REGENERATION_TRIES: usize = 2000;
/// Consistent draws pooled before one is kept.
pub const REGENERATION_POOL: usize = 16;

/// Ship moves the repair walk may spend.
pub const REPAIR_STEPS: usize = 2000;

/// Replaces a zero-weight particle. First by sampling-importance-resampling:
/// up to [`REGENERATION_POOL`] prior draws consistent with the history are
/// collected (within [`REGENERATION_TRIES`] attempts) and one is kept with
/// probability proportional to its likelihood. If the prior rarely meets
/// the constraints, a uniformly chosen surviving particle is copied instead;
/// with no survivors at all, [`search_consistent`] looks for a consistent
/// placement and [`repair`] walks toward one if the search runs out. Any move out of a zero-weight state leaves the posterior
/// invariant; the MH sweeps that follow do the mixing.
fn regenerate<R: Rng + ?Sized>(
    particle: &mut Particle,
    geometry: &Geometry,
    history: &History,
    epsilon: f64,
    survivors: &[Particle],
    rng: &mut R,
) {
    let fleet: Vec<usize> = particle.placement.ships().iter().map(|s| s.len).collect();
    let mut pool: Vec<Particle> = Vec::with_capacity(REGENERATION_POOL);
    for _ in 0..REGENERATION_TRIES {
        let Ok(candidate) = place_fleet_with(geometry, &fleet, rng) else {
            break;
        };
        let ll = history.log_likelihood(candidate.occupied(), epsilon);
        if ll > f64::NEG_INFINITY {
            pool.push(Particle { placement: candidate, log_weight: ll });
            if pool.len() == REGENERATION_POOL {
                break;
            }
        }
    }
    if let Some(best) = pool.iter().map(|p| p.log_weight).reduce(f64::max) {
        let weights: Vec<f64> = pool.iter().map(|p| (p.log_weight - best).exp()).collect();
        let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
        let mut chosen = pool.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = k;
                break;
            }
            u -= w;
        }
        *particle = pool.swap_remove(chosen);
    } else if !survivors.is_empty() {
        *particle = survivors[rng.random_range(0..survivors.len())].clone();
    } else if let Some(placement) = search_consistent(geometry, &fleet, history, epsilon, rng) {
        *particle = Particle::new(placement, history, epsilon);
    } else {
        repair(particle, geometry, history, epsilon, rng);
    }
}

/// Nodes the consistent-placement search may visit.
pub const SEARCH_NODES: usize = 200_000;

/// Depth-first search for a placement with positive likelihood, longest
/// ships first, each ship's positions tried in random order. Gives up after
/// [`SEARCH_NODES`] nodes.
fn search_consistent<R: Rng + ?Sized>(
    geometry: &Geometry,
    fleet: &[usize],
    history: &History,
    epsilon: f64,
    rng: &mut R,
) -> Option<Placement> {
    let mut order: Vec<usize> = fleet.to_vec();
    order.sort_unstable_by(|a, b| b.cmp(a));
    let mut ships: Vec<Ship> = Vec::with_capacity(order.len());
    let mut budget = SEARCH_NODES;
    let found = search_step(geometry, &order, history, epsilon, CellSet::EMPTY, &mut ships, &mut budget, rng);
    if !found {
        return None;
    }
    Placement::from_ships(geometry.width(), geometry.height(), ships).ok()
}

#[allow(clippy::too_many_arguments)]
fn search_step<R: Rng + ?Sized>(
    geometry: &Geometry,
    order: &[usize],
    history: &History,
    epsilon: f64,
    occupied: CellSet,
    ships: &mut Vec<Ship>,
    budget: &mut usize,
    rng: &mut R,
) -> bool {
    let Some((&len, rest)) = order.split_first() else {
        return history.log_likelihood(occupied, epsilon) > f64::NEG_INFINITY;
    };
    let remaining: usize = rest.iter().sum();
    let mut positions: Vec<&(Ship, CellSet)> = geometry.positions(len).iter().collect();
    positions.shuffle(rng);
    for (ship, mask) in positions {
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        if mask.intersects(occupied) {
            continue;
        }
        let next = occupied.union(*mask);
        if !history.completable(next, remaining, epsilon) {
            continue;
        }
        ships.push(*ship);
        if search_step(geometry, rest, history, epsilon, next, ships, budget, rng) {
            return true;
        }
        ships.pop();
    }
    false
}

/// Re-places one ship at a time, preferring positions with smaller
/// [`History::violation`] and better shot agreement, until the particle is
/// consistent or [`REPAIR_STEPS`] moves are spent.
fn repair<R: Rng + ?Sized>(particle: &mut Particle, geometry: &Geometry, history: &History, epsilon: f64, rng: &mut R) {
    const PENALTY: f64 = 3.0;
    let soft_eps = epsilon.max(0.05);
    let width = geometry.width();
    let mut ships = particle.placement.ships().to_vec();
    if ships.is_empty() {
        return;
    }
    let mut scores: Vec<f64> = Vec::new();
    for _ in 0..REPAIR_STEPS {
        let occupied = ships.iter().fold(CellSet::EMPTY, |acc, s| acc.union(s.mask(width)));
        if history.violation(occupied, epsilon) == 0 {
            break;
        }
        let k = rng.random_range(0..ships.len());
        let others = occupied.difference(ships[k].mask(width));
        let positions = geometry.positions(ships[k].len);
        scores.clear();
        scores.extend(positions.iter().map(|(_, mask)| {
            if mask.intersects(others) {
                return f64::NEG_INFINITY;
            }
            let occ = others.union(*mask);
            -PENALTY * history.violation(occ, epsilon) as f64 + history.shot_log_likelihood(occ, soft_eps)
        }));
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            continue;
        }
        let weights: Vec<(usize, f64)> =
            scores.iter().enumerate().map(|(j, s)| (j, (s - best).exp())).filter(|&(_, w)| w > 0.0).collect();
        let total = weights.iter().map(|w| w.1).sum();
        ships[k] = positions[draw_weighted(&weights, total, rng)].0;
    }
    if let Ok(placement) = Placement::from_ships(width, geometry.height(), ships) {
        *particle = Particle::new(placement, history, epsilon);
    }
}

/// Adds one live particle's conditional coverage (summing to at most 1 per
/// cell) into `acc`.
fn particle_coverage(
    particle: &Particle,
    geometry: &Geometry,
    history: &History,
    epsilon: f64,
    acc: &mut [f64],
    scratch: &mut Vec<(usize, f64)>,
) {
    let ships = particle.placement.ships();
    let occupied = particle.placement.occupied();
    if ships.is_empty() {
        return;
    }
    let share = 1.0 / ships.len() as f64;
    for ship in ships {
        let own = ship.mask(geometry.width());
        let others = occupied.difference(own);
        for i in others.iter() {
            acc[i] += share;
        }
        let positions = geometry.positions(ship.len);
        let (total, _) = ship_conditional(positions, others, history, epsilon, scratch);
        if total == 0.0 {
            // cannot happen for a live particle (its own position is consistent)
            for i in own.iter() {
                acc[i] += share;
            }
            continue;
        }
        for &(k, w) in scratch.iter() {
            let p = share * w / total;
            for i in positions[k].1.iter() {
                acc[i] += p;
            }
        }
    }
}

/// Bernoulli entropy (nats) of one probability.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.ln() };
    term(p) + term(1.0 - p)
}

/// Sum of per-cell Bernoulli entropies of a marginal map, in nats.
pub fn entropy(marginals: &[f64]) -> f64 {
    marginals.iter().map(|&p| bernoulli_entropy(p)).sum()
}

/// Exact cell marginals by enumerating every legal placement.
pub fn exact_posterior(config: &BoardConfig, history: &History, epsilon: f64) -> Result<Vec<f64>, BeliefError> {
    config.validate()?;
    let geometry = Geometry::for_config(config);

    fn count(geometry: &Geometry, fleet: &[usize], used: CellSet, total: &mut u64) -> bool {
        match fleet.split_first() {
            None => {
                *total += 1;
                *total <= ENUMERATION_LIMIT
            }
            Some((&len, rest)) => geometry
                .positions(len)
                .iter()
                .filter(|(_, m)| !m.intersects(used))
                .all(|&(_, m)| count(geometry, rest, used.union(m), total)),
        }
    }
    let mut total = 0;
    if !count(&geometry, &config.fleet, CellSet::EMPTY, &mut total) {
        return Err(BeliefError::TooLargeToEnumerate(ENUMERATION_LIMIT));
    }

    fn walk(
        geometry: &Geometry,
        fleet: &[usize],
        used: CellSet,
        history: &History,
        epsilon: f64,
        sums: &mut [f64],
        norm: &mut f64,
    ) {
        match fleet.split_first() {
            None => {
                let w = history.log_likelihood(used, epsilon).exp();
                if w > 0.0 {
                    *norm += w;
                    for i in used.iter() {
                        sums[i] += w;
                    }
                }
            }
            Some((&len, rest)) => {
                for &(_, m) in geometry.positions(len) {
                    if !m.intersects(used) {
                        walk(geometry, rest, used.union(m), history, epsilon, sums, norm);
                    }
                }
            }
        }
    }
    let mut sums = vec![0.0; geometry.n_cells()];
    let mut norm = 0.0;
    walk(&geometry, &config.fleet, CellSet::EMPTY, history, epsilon, &mut sums, &mut norm);
    if norm == 0.0 {
        return Err(BeliefError::DegeneratePosterior);
    }
    Ok(sums.into_iter().map(|s| s / norm).collect())
}
