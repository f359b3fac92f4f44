//! Board-suite files.
//!
//! A suite is a JSON array. Each board either lists its ships explicitly or
//! names a seed from which the engine draws the placement:
//!
//! ```json
//! [
//!   {"id": "B01", "width": 8, "height": 8, "ships": [{"row": 0, "col": 0, "orient": "H", "len": 5}]},
//!   {"id": "B02", "seed": 17}
//! ]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{place_fleet, BoardConfig, Placement, Ship, WorldError};
use crate::rng::{Stream, Streams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoardSpec {
    Explicit {
        id: String,
        width: usize,
        height: usize,
        ships: Vec<Ship>,
    },
    Seeded {
        id: String,
        seed: u64,
    },
}

impl BoardSpec {
    pub fn id(&self) -> &str {
        match self {
            BoardSpec::Explicit { id, .. } | BoardSpec::Seeded { id, .. } => id,
        }
    }

    /// The game configuration for this board: `base` with the board's own
    /// dimensions when it declares them.
    pub fn config(&self, base: &BoardConfig) -> BoardConfig {
        match self {
            BoardSpec::Explicit { width, height, .. } => BoardConfig {
                width: *width,
                height: *height,
                ..base.clone()
            },
            BoardSpec::Seeded { .. } => base.clone(),
        }
    }

    pub fn placement(&self, base: &BoardConfig) -> Result<Placement, WorldError> {
        let config = self.config(base);
        match self {
            BoardSpec::Explicit { ships, .. } => Placement::for_config(&config, ships.clone()),
            BoardSpec::Seeded { seed, .. } => {
                let mut rng = Streams::new(*seed).stream(Stream::Placement);
                place_fleet(&config, &mut rng)
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed suite file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("board {id}: {source}")]
    Board { id: String, source: WorldError },
    #[error("duplicate board id {0}")]
    DuplicateId(String),
    #[error("empty suite")]
    Empty,
}

pub fn parse_suite(text: &str) -> Result<Vec<BoardSpec>, SuiteError> {
    let boards: Vec<BoardSpec> = serde_json::from_str(text)?;
    let mut seen = std::collections::HashSet::new();
    for b in &boards {
        if !seen.insert(b.id().to_string()) {
            return Err(SuiteError::DuplicateId(b.id().to_string()));
        }
    }
    Ok(boards)
}

/// Canonical text form: two-space pretty JSON with a trailing newline.
pub fn render_suite(boards: &[BoardSpec]) -> String {
    let mut text = serde_json::to_string_pretty(boards).expect("suite serializes");
    text.push('\n');
    text
}

pub fn load_suite(path: &Path) -> Result<Vec<BoardSpec>, SuiteError> {
    parse_suite(&std::fs::read_to_string(path)?)
}

/// Checks every board against the base configuration.
pub fn validate_suite(boards: &[BoardSpec], base: &BoardConfig) -> Result<(), SuiteError> {
    if boards.is_empty() {
        return Err(SuiteError::Empty);
    }
    for b in boards {
        b.placement(base).map_err(|source| SuiteError::Board { id: b.id().to_string(), source })?;
    }
    Ok(())
}

/// `count` explicit boards `B01`, `B02`, ... drawn from the uniform prior.
pub fn generate_suite(base: &BoardConfig, count: usize, master_seed: u64) -> Result<Vec<BoardSpec>, WorldError> {
    let mut rng = Streams::new(master_seed).stream(Stream::Placement);
    (0..count)
        .map(|i| {
            let placement = place_fleet(base, &mut rng)?;
            Ok(BoardSpec::Explicit {
                id: format!("B{:02}", i + 1),
                width: base.width,
                height: base.height,
                ships: placement.ships().to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::world::Orientation;

    #[test]
    fn both_entry_forms_parse() {
        let text = r#"[
          {"id": "B01", "width": 5, "height": 1, "ships": [{"row": 0, "col": 0, "orient": "H", "len": 5}]},
          {"id": "B02", "seed": 17}
        ]"#;
        let boards = parse_suite(text).unwrap();
        assert_eq!(boards.len(), 2);
        let strip = BoardConfig { fleet: vec![5], ..BoardConfig::default() };
        assert_eq!(boards[0].config(&strip).width, 5);
        assert!(boards[0].placement(&strip).is_ok());
        assert!(matches!(boards[1], BoardSpec::Seeded { seed: 17, .. }));
        let a = boards[1].placement(&BoardConfig::default()).unwrap();
        let b = boards[1].placement(&BoardConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"[{"id": "X", "seed": 1}, {"id": "X", "seed": 2}]"#;
        assert!(matches!(parse_suite(text), Err(SuiteError::DuplicateId(_))));
    }

    #[test]
    fn generated_suite_is_valid() {
        let base = BoardConfig::default();
        let boards = generate_suite(&base, 18, 2026).unwrap();
        assert_eq!(boards[17].id(), "B18");
        validate_suite(&boards, &base).unwrap();
    }

    fn arb_board() -> impl Strategy<Value = BoardSpec> {
        prop_oneof![
            ("[A-Z][0-9]{2}", any::<u64>()).prop_map(|(id, seed)| BoardSpec::Seeded { id, seed }),
            (
                "[A-Z][0-9]{2}",
                1usize..12,
                1usize..12,
                prop::collection::vec((0usize..12, 0usize..12, any::<bool>(), 1usize..6), 0..5)
            )
                .prop_map(|(id, width, height, ships)| BoardSpec::Explicit {
                    id,
                    width,
                    height,
                    ships: ships
                        .into_iter()
                        .map(|(row, col, h, len)| Ship {
                            row,
                            col,
                            orient: if h { Orientation::Horizontal } else { Orientation::Vertical },
                            len,
                        })
                        .collect(),
                }),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_is_byte_exact(boards in prop::collection::vec(arb_board(), 0..6)) {
            let text = render_suite(&boards);
            let back: Vec<BoardSpec> = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &boards);
            prop_assert_eq!(render_suite(&back), text);
        }
    }
}
