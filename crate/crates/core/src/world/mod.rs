//! Ground-truth Battleship engine.
//!
//! The engine owns the hidden [`Placement`], resolves noisy shots, answers
//! region questions truthfully and decides termination. A ship cell counts as
//! destroyed as soon as it is fired upon, whatever the noisy return said, so
//! the win condition depends only on the cells the agent chose.

mod cells;
pub mod suite;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cells::{Cell, CellSet, MAX_CELLS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid board configuration: {0}")]
    InvalidConfig(String),
    #[error("the fleet has no legal placement on this board")]
    NoLegalPlacement,
    #[error("cell {0} is out of bounds")]
    CellOutOfBounds(Cell),
    #[error("cell {0} was already fired upon")]
    CellAlreadyFired(Cell),
    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("invalid question region")]
    InvalidQuestion,
    #[error("no questions remaining")]
    QuestionBudgetExhausted,
    #[error("the game is already over")]
    GameOver,
    #[error("the game has not finished")]
    GameNotFinished,
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Board geometry, fleet and budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoardConfig {
    pub width: usize,
    pub height: usize,
    pub fleet: Vec<usize>,
    pub shot_budget: usize,
    pub question_budget: usize,
    pub noise_epsilon: f64,
}

impl Default for BoardConfig {
    fn default() -> Self {
        BoardConfig {
            width: 8,
            height: 8,
            fleet: vec![5, 4, 3, 2],
            shot_budget: 40,
            question_budget: 15,
            noise_epsilon: 0.1,
        }
    }
}

impl BoardConfig {
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn fleet_cells(&self) -> usize {
        self.fleet.iter().sum()
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(WorldError::InvalidConfig(msg.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("board dimensions must be positive");
        }
        if self.n_cells() > MAX_CELLS {
            return bad("board has more than 128 cells");
        }
        if self.fleet.contains(&0) {
            return bad("ship lengths must be positive");
        }
        if !(0.0..0.5).contains(&self.noise_epsilon) {
            return bad("noise epsilon must lie in [0, 0.5)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "H")]
    Horizontal,
    #[serde(rename = "V")]
    Vertical,
}

/// One ship: origin is the top-left cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ship {
    pub row: usize,
    pub col: usize,
    pub orient: Orientation,
    pub len: usize,
}

impl Ship {
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len).map(move |k| match self.orient {
            Orientation::Horizontal => Cell::new(self.row, self.col + k),
            Orientation::Vertical => Cell::new(self.row + k, self.col),
        })
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        match self.orient {
            Orientation::Horizontal => self.row < height && self.col + self.len <= width,
            Orientation::Vertical => self.col < width && self.row + self.len <= height,
        }
    }

    pub fn mask(&self, width: usize) -> CellSet {
        self.cells().map(|c| c.index(width)).collect()
    }
}

/// A concrete configuration of ships on a board.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Placement {
    ships: Vec<Ship>,
    occupied: CellSet,
}

impl Placement {
    /// Checks bounds and pairwise disjointness; the fleet itself is not checked.
    pub fn from_ships(width: usize, height: usize, ships: Vec<Ship>) -> Result<Self> {
        if width * height > MAX_CELLS {
            return Err(WorldError::InvalidPlacement("board too large".into()));
        }
        let mut occupied = CellSet::EMPTY;
        for ship in &ships {
            if ship.len == 0 || !ship.fits(width, height) {
                return Err(WorldError::InvalidPlacement(format!(
                    "ship at ({}, {}) does not fit",
                    ship.row, ship.col
                )));
            }
            let mask = ship.mask(width);
            if mask.intersects(occupied) {
                return Err(WorldError::InvalidPlacement("ships overlap".into()));
            }
            occupied = occupied.union(mask);
        }
        Ok(Placement { ships, occupied })
    }

    /// Builds a placement and checks that it realises the configured fleet.
    pub fn for_config(config: &BoardConfig, ships: Vec<Ship>) -> Result<Self> {
        let placement = Placement::from_ships(config.width, config.height, ships)?;
        let mut have: Vec<usize> = placement.ships.iter().map(|s| s.len).collect();
        let mut want = config.fleet.clone();
        have.sort_unstable();
        want.sort_unstable();
        if have != want {
            return Err(WorldError::InvalidPlacement(
                "ship lengths do not match the fleet".into(),
            ));
        }
        Ok(placement)
    }

    pub(crate) fn from_parts(ships: Vec<Ship>, occupied: CellSet) -> Self {
        Placement { ships, occupied }
    }

    pub fn ships(&self) -> &[Ship] {
        &self.ships
    }

    pub fn occupied(&self) -> CellSet {
        self.occupied
    }

    /// Moves ships in place; `occupied` must be the resulting occupancy.
    pub(crate) fn move_ships(&mut self, moves: &[(usize, Ship)], occupied: CellSet) {
        for &(index, ship) in moves {
            self.ships[index] = ship;
        }
        self.occupied = occupied;
    }
}

/// Every in-bounds position of every ship length on a board.
#[derive(Debug, Clone)]
pub struct Geometry {
    width: usize,
    height: usize,
    positions: BTreeMap<usize, Vec<(Ship, CellSet)>>,
}

impl Geometry {
    pub fn new(width: usize, height: usize, lengths: &[usize]) -> Self {
        let mut positions = BTreeMap::new();
        for &len in lengths {
            positions.entry(len).or_insert_with(|| {
                let orients: &[Orientation] = if len == 1 {
                    &[Orientation::Horizontal]
                } else {
                    &[Orientation::Horizontal, Orientation::Vertical]
                };
                let mut out = Vec::new();
                for &orient in orients {
                    for row in 0..height {
                        for col in 0..width {
                            let ship = Ship { row, col, orient, len };
                            if ship.fits(width, height) {
                                out.push((ship, ship.mask(width)));
                            }
                        }
                    }
                }
                out
            });
        }
        Geometry { width, height, positions }
    }

    pub fn for_config(config: &BoardConfig) -> Self {
        Geometry::new(config.width, config.height, &config.fleet)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// In-bounds positions for a ship length (empty when none fit).
    pub fn positions(&self, len: usize) -> &[(Ship, CellSet)] {
        self.positions.get(&len).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Whether some legal placement of the fleet exists (depth-first search).
fn fleet_fits(geometry: &Geometry, fleet: &[usize]) -> bool {
    fn go(geometry: &Geometry, fleet: &[usize], used: CellSet) -> bool {
        match fleet.split_first() {
            None => true,
            Some((&len, rest)) => geometry
                .positions(len)
                .iter()
                .any(|&(_, mask)| !mask.intersects(used) && go(geometry, rest, used.union(mask))),
        }
    }
    let mut sorted = fleet.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    go(geometry, &sorted, CellSet::EMPTY)
}

/// Draws a placement uniformly from all legal placements of the fleet.
pub fn place_fleet<R: Rng + ?Sized>(config: &BoardConfig, rng: &mut R) -> Result<Placement> {
    config.validate()?;
    let geometry = Geometry::for_config(config);
    place_fleet_with(&geometry, &config.fleet, rng)
}

pub(crate) fn place_fleet_with<R: Rng + ?Sized>(
    geometry: &Geometry,
    fleet: &[usize],
    rng: &mut R,
) -> Result<Placement> {
    if fleet.iter().sum::<usize>() > geometry.n_cells() || !fleet_fits(geometry, fleet) {
        return Err(WorldError::NoLegalPlacement);
    }
    // Independent uniform positions with whole-fleet rejection on overlap is
    // exactly uniform over legal placements.
    loop {
        let mut ships = Vec::with_capacity(fleet.len());
        let mut occupied = CellSet::EMPTY;
        let mut ok = true;
        for &len in fleet {
            let options = geometry.positions(len);
            let (ship, mask) = options[rng.random_range(0..options.len())];
            if mask.intersects(occupied) {
                ok = false;
                break;
            }
            occupied = occupied.union(mask);
            ships.push(ship);
        }
        if ok {
            return Ok(Placement::from_parts(ships, occupied));
        }
    }
}

/// Inclusive axis-aligned rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Region {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Region { top, left, bottom, right }
    }

    pub fn single(cell: Cell) -> Self {
        Region::new(cell.row, cell.col, cell.row, cell.col)
    }

    pub fn whole(config: &BoardConfig) -> Self {
        Region::new(0, 0, config.height - 1, config.width - 1)
    }

    pub fn area(&self) -> usize {
        (self.bottom + 1 - self.top) * (self.right + 1 - self.left)
    }

    pub fn is_valid(&self, width: usize, height: usize) -> bool {
        self.top <= self.bottom && self.left <= self.right && self.bottom < height && self.right < width
    }

    pub fn mask(&self, width: usize) -> CellSet {
        let mut set = CellSet::EMPTY;
        for row in self.top..=self.bottom {
            for col in self.left..=self.right {
                set.insert(Cell::new(row, col).index(width));
            }
        }
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Count,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub region: Region,
    pub kind: QuestionKind,
}

impl Question {
    pub fn count(region: Region) -> Self {
        Question { region, kind: QuestionKind::Count }
    }

    pub fn any(region: Region) -> Self {
        Question { region, kind: QuestionKind::Any }
    }

    /// Answer this question would receive if `occupied` were the truth.
    pub fn answer_for(&self, occupied: CellSet, width: usize) -> Answer {
        let hits = occupied.intersection(self.region.mask(width));
        match self.kind {
            QuestionKind::Count => Answer::Count(hits.len() as u32),
            QuestionKind::Any => Answer::Any(!hits.is_empty()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Count(u32),
    Any(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShotReturn {
    pub cell: Cell,
    pub observed_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Observation {
    Shot(ShotReturn),
    #[serde(rename_all = "camelCase")]
    QuestionAnswer { question: Question, answer: Answer },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
}

/// What the agent can see of a game in progress, plus the ground-truth
/// destruction mask the engine uses for termination.
#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    pub turn: usize,
    pub shots_remaining: usize,
    pub questions_remaining: usize,
    pub fired: Vec<ShotReturn>,
    pub asked: Vec<(Question, Answer)>,
    /// Turn index (1-based) of each entry of `fired`.
    pub shot_turns: Vec<usize>,
    /// Turn index (1-based) of each entry of `asked`.
    pub question_turns: Vec<usize>,
    pub terminal: Option<Outcome>,
    fired_mask: CellSet,
    destroyed: CellSet,
}

impl GameState {
    pub fn new(config: &BoardConfig) -> Self {
        GameState {
            turn: 0,
            shots_remaining: config.shot_budget,
            questions_remaining: config.question_budget,
            fired: Vec::new(),
            asked: Vec::new(),
            shot_turns: Vec::new(),
            question_turns: Vec::new(),
            terminal: None,
            fired_mask: CellSet::EMPTY,
            destroyed: CellSet::EMPTY,
        }
    }

    pub fn fired_mask(&self) -> CellSet {
        self.fired_mask
    }

    pub fn destroyed(&self) -> CellSet {
        self.destroyed
    }

    pub fn is_fired(&self, index: usize) -> bool {
        self.fired_mask.contains(index)
    }
}

/// Resolves one shot against the truth, flipping the return with probability `epsilon`.
pub fn resolve_shot<R: Rng + ?Sized>(
    placement: &Placement,
    config: &BoardConfig,
    fired: CellSet,
    cell: Cell,
    rng: &mut R,
) -> Result<ShotReturn> {
    if !config.in_bounds(cell) {
        return Err(WorldError::CellOutOfBounds(cell));
    }
    let index = cell.index(config.width);
    if fired.contains(index) {
        return Err(WorldError::CellAlreadyFired(cell));
    }
    let true_hit = placement.occupied().contains(index);
    // The draw happens even at epsilon = 0 so the noise stream advances one
    // value per shot regardless of configuration.
    let flip = rng.random::<f64>() < config.noise_epsilon;
    Ok(ShotReturn { cell, observed_hit: true_hit != flip })
}

pub fn answer_question(placement: &Placement, config: &BoardConfig, question: &Question) -> Result<Answer> {
    if !question.region.is_valid(config.width, config.height) {
        return Err(WorldError::InvalidQuestion);
    }
    Ok(question.answer_for(placement.occupied(), config.width))
}

/// F1 of fired cells against true ship cells.
pub fn score_f1(state: &GameState, placement: &Placement) -> Result<f64> {
    if state.terminal.is_none() {
        return Err(WorldError::GameNotFinished);
    }
    Ok(f1_from_counts(
        state.destroyed.len(),
        state.fired.len(),
        placement.occupied().len(),
    ))
}

pub fn f1_from_counts(true_hits: usize, fired: usize, ship_cells: usize) -> f64 {
    if true_hits == 0 {
        return 0.0;
    }
    let precision = true_hits as f64 / fired as f64;
    let recall = true_hits as f64 / ship_cells as f64;
    2.0 * precision * recall / (precision + recall)
}

/// One running game: the hidden placement and the evolving [`GameState`].
#[derive(Debug, Clone)]
pub struct Engine {
    config: BoardConfig,
    placement: Placement,
    state: GameState,
}

impl Engine {
    pub fn new(config: BoardConfig, placement: Placement) -> Result<Self> {
        config.validate()?;
        let placement = Placement::for_config(&config, placement.ships().to_vec())?;
        let state = GameState::new(&config);
        let mut engine = Engine { config, placement, state };
        engine.update_terminal();
        Ok(engine)
    }

    pub fn config(&self) -> &BoardConfig {
        &self.config
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn state(&self) -> &GameState {
        &self.state
    }

    pub fn all_ships_sunk(&self) -> bool {
        self.state.destroyed == self.placement.occupied()
    }

    fn update_terminal(&mut self) {
        self.state.terminal = if self.all_ships_sunk() {
            Some(Outcome::Win)
        } else if self.state.shots_remaining == 0 {
            Some(Outcome::Loss)
        } else {
            None
        };
    }

    pub fn fire<R: Rng + ?Sized>(&mut self, cell: Cell, rng: &mut R) -> Result<ShotReturn> {
        if self.state.terminal.is_some() {
            return Err(WorldError::GameOver);
        }
        let ret = resolve_shot(&self.placement, &self.config, self.state.fired_mask, cell, rng)?;
        let index = cell.index(self.config.width);
        self.state.turn += 1;
        self.state.shots_remaining -= 1;
        self.state.fired_mask.insert(index);
        if self.placement.occupied().contains(index) {
            self.state.destroyed.insert(index);
        }
        self.state.fired.push(ret);
        self.state.shot_turns.push(self.state.turn);
        self.update_terminal();
        Ok(ret)
    }

    pub fn ask(&mut self, question: Question) -> Result<Answer> {
        if self.state.terminal.is_some() {
            return Err(WorldError::GameOver);
        }
        if self.state.questions_remaining == 0 {
            return Err(WorldError::QuestionBudgetExhausted);
        }
        let answer = answer_question(&self.placement, &self.config, &question)?;
        self.state.turn += 1;
        self.state.questions_remaining -= 1;
        self.state.asked.push((question, answer));
        self.state.question_turns.push(self.state.turn);
        Ok(answer)
    }

    pub fn f1(&self) -> Result<f64> {
        score_f1(&self.state, &self.placement)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small(width: usize, height: usize, fleet: Vec<usize>) -> BoardConfig {
        BoardConfig { width, height, fleet, ..BoardConfig::default() }
    }

    #[test]
    fn default_fleet_placement_is_legal() {
        let config = BoardConfig::default();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = place_fleet(&config, &mut rng).unwrap();
            assert_eq!(p.occupied().len(), 14);
            assert!(Placement::for_config(&config, p.ships().to_vec()).is_ok());
        }
    }

    #[test]
    fn ship_longer_than_board() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            place_fleet(&small(2, 2, vec![5]), &mut rng),
            Err(WorldError::NoLegalPlacement)
        );
    }

    #[test]
    fn unique_placement_on_strip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = place_fleet(&small(5, 1, vec![5]), &mut rng).unwrap();
        assert_eq!(
            p.ships(),
            &[Ship { row: 0, col: 0, orient: Orientation::Horizontal, len: 5 }]
        );
    }

    #[test]
    fn infeasible_packing_is_detected() {
        // Two length-3 ships cannot share a 2x3 board with a length-2 ship.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            place_fleet(&small(3, 2, vec![3, 3, 2]), &mut rng),
            Err(WorldError::NoLegalPlacement)
        );
    }

    #[test]
    fn placement_is_deterministic_per_seed() {
        let config = BoardConfig::default();
        let a = place_fleet(&config, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = place_fleet(&config, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_shots_report_truth() {
        let config = BoardConfig { noise_epsilon: 0.0, ..small(5, 1, vec![2]) };
        let placement = Placement::for_config(
            &config,
            vec![Ship { row: 0, col: 1, orient: Orientation::Horizontal, len: 2 }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hit = resolve_shot(&placement, &config, CellSet::EMPTY, Cell::new(0, 1), &mut rng).unwrap();
        let miss = resolve_shot(&placement, &config, CellSet::EMPTY, Cell::new(0, 4), &mut rng).unwrap();
        assert!(hit.observed_hit);
        assert!(!miss.observed_hit);
    }

    #[test]
    fn shot_errors() {
        let config = small(5, 1, vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let placement = place_fleet(&config, &mut rng).unwrap();
        let mut engine = Engine::new(config, placement).unwrap();
        assert_eq!(
            engine.fire(Cell::new(1, 0), &mut rng),
            Err(WorldError::CellOutOfBounds(Cell::new(1, 0)))
        );
        engine.fire(Cell::new(0, 0), &mut rng).unwrap();
        assert_eq!(
            engine.fire(Cell::new(0, 0), &mut rng),
            Err(WorldError::CellAlreadyFired(Cell::new(0, 0)))
        );
    }

    #[test]
    fn question_answers() {
        let config = BoardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let placement = place_fleet(&config, &mut rng).unwrap();
        let whole = Question::count(Region::whole(&config));
        assert_eq!(answer_question(&placement, &config, &whole).unwrap(), Answer::Count(14));

        let ship_cell = Cell::from_index(placement.occupied().iter().next().unwrap(), 8);
        let single = Question::count(Region::single(ship_cell));
        assert_eq!(answer_question(&placement, &config, &single).unwrap(), Answer::Count(1));

        let water = (0..64).find(|&i| !placement.occupied().contains(i)).unwrap();
        let q = Question::any(Region::single(Cell::from_index(water, 8)));
        assert_eq!(answer_question(&placement, &config, &q).unwrap(), Answer::Any(false));

        let bad = Question::count(Region::new(3, 3, 2, 2));
        assert_eq!(answer_question(&placement, &config, &bad), Err(WorldError::InvalidQuestion));
    }

    #[test]
    fn f1_examples() {
        assert!((f1_from_counts(14, 14, 14) - 1.0).abs() < 1e-12);
        let f1 = f1_from_counts(7, 40, 14);
        assert!((f1 - 0.2593).abs() < 5e-5, "{f1}");
        assert_eq!(f1_from_counts(0, 40, 14), 0.0);
    }

    #[test]
    fn perfect_game_scores_one() {
        let config = BoardConfig { noise_epsilon: 0.0, ..BoardConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let placement = place_fleet(&config, &mut rng).unwrap();
        let cells: Vec<Cell> = placement.occupied().iter().map(|i| Cell::from_index(i, 8)).collect();
        let mut engine = Engine::new(config, placement).unwrap();
        assert_eq!(engine.f1(), Err(WorldError::GameNotFinished));
        for cell in cells {
            engine.fire(cell, &mut rng).unwrap();
        }
        assert_eq!(engine.state().terminal, Some(Outcome::Win));
        assert_eq!(engine.f1().unwrap(), 1.0);
        assert_eq!(engine.state().shots_remaining, 40 - 14);
    }

    #[test]
    fn questions_do_not_spend_shots() {
        let config = BoardConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let placement = place_fleet(&config, &mut rng).unwrap();
        let mut engine = Engine::new(config.clone(), placement).unwrap();
        for _ in 0..15 {
            engine.ask(Question::any(Region::whole(&config))).unwrap();
        }
        assert_eq!(
            engine.ask(Question::any(Region::whole(&config))),
            Err(WorldError::QuestionBudgetExhausted)
        );
        assert_eq!(engine.state().shots_remaining, 40);
        assert_eq!(engine.state().turn, 15);
    }
}
