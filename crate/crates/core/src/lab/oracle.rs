//! Particle posterior against exact enumeration on a small board.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabError;
use crate::belief::{exact_posterior, History, Posterior};
use crate::rng::Streams;
use crate::world::{answer_question, place_fleet, resolve_shot, BoardConfig, Cell, CellSet, Observation, Question, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct OracleSpec {
    pub width: usize,
    pub height: usize,
    pub fleet: Vec<usize>,
    pub epsilons: Vec<f64>,
    /// Random histories per epsilon.
    pub trials: usize,
    pub max_history: usize,
    /// Chance that a history step is a count question rather than a shot.
    pub question_rate: f64,
    pub particles: usize,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            width: 4,
            height: 4,
            fleet: vec![3, 2],
            epsilons: vec![0.0, 0.1],
            trials: 20,
            max_history: 6,
            question_rate: 0.25,
            particles: 500,
            sweeps: 20,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleCase {
    pub epsilon: f64,
    pub trial: usize,
    pub history_len: usize,
    pub live_particles: usize,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
    pub max_linf: f64,
}

/// For each epsilon and trial: draws a hidden placement and a random history
/// of 1 to `max_history` steps (shots at unfired cells resolved with noise,
/// or truthful count questions over random rectangles), conditions a fresh
/// particle posterior step by step, and compares its marginals with exact
/// enumeration.
pub fn oracle_check(spec: &OracleSpec) -> Result<OracleReport, LabError> {
    let n_cells = spec.width * spec.height;
    let mut cases = Vec::new();
    for &epsilon in &spec.epsilons {
        let config = BoardConfig {
            width: spec.width,
            height: spec.height,
            fleet: spec.fleet.clone(),
            noise_epsilon: epsilon,
            ..BoardConfig::default()
        };
        for trial in 0..spec.trials {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed + trial as u64);
            let truth = place_fleet(&config, &mut rng)?;
            let len = rng.random_range(1..=spec.max_history.clamp(1, n_cells));
            let streams = Streams::new(trial as u64 * 7 + 1);
            let mut post = Posterior::from_prior(&config, spec.particles, streams)?;
            let mut fired = CellSet::EMPTY;
            let mut history = History::new(spec.width);
            for _ in 0..len {
                let obs = if rng.random_bool(spec.question_rate) || fired.len() == n_cells {
                    let (r0, c0) = (rng.random_range(0..spec.height), rng.random_range(0..spec.width));
                    let (r1, c1) = (rng.random_range(r0..spec.height), rng.random_range(c0..spec.width));
                    let question = Question::count(Region::new(r0, c0, r1, c1));
                    Observation::QuestionAnswer { question, answer: answer_question(&truth, &config, &question)? }
                } else {
                    let i = loop {
                        let i = rng.random_range(0..n_cells);
                        if !fired.contains(i) {
                            break i;
                        }
                    };
                    let ret = resolve_shot(&truth, &config, fired, Cell::from_index(i, spec.width), &mut rng)?;
                    fired.insert(i);
                    Observation::Shot(ret)
                };
                history.push(obs);
                post.update(obs, spec.sweeps)?;
            }
            let exact = exact_posterior(&config, &history, epsilon)?;
            let linf = exact.iter().zip(post.marginals()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            cases.push(OracleCase { epsilon, trial, history_len: len, live_particles: post.live_particles(), linf });
        }
    }
    let max_linf = cases.iter().map(|c| c.linf).fold(0.0, f64::max);
    Ok(OracleReport { cases, max_linf })
}
