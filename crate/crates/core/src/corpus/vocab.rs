//! Token vocabulary and grid/program encoding.
//!
//! Layout (version `v1`, 19 ids):
//!
//! | ids    | tokens                                   |
//! |--------|------------------------------------------|
//! | 0..=2  | `Empty`, `Rock`, `Marker`                |
//! | 3..=6  | `Robot(N/E/S/W)`                         |
//! | 7..=10 | `RobotOnMarker(N/E/S/W)`                 |
//! | 11..=15| `move`, `turn_right`, `turn_left`, `put_marker`, `pick_marker` |
//! | 16..=18| `BOS`, `SEP`, `EOS`                      |

use crate::gridworld::{Action, Direction, GridState, Position, Program, NUM_CELLS};

use super::CorpusError;

pub const VOCAB_SIZE: usize = 19;
pub const VOCAB_VERSION: &str = "v1";

pub const BOS: u8 = 16;
pub const SEP: u8 = 17;
pub const EOS: u8 = 18;
const ACTION_BASE: u8 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellToken {
    Empty,
    Rock,
    Marker,
    Robot(Direction),
    RobotOnMarker(Direction),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Cell,
    Action,
    Separator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Cell(CellToken),
    Action(Action),
    Bos,
    Sep,
    Eos,
}

impl Token {
    pub fn id(self) -> u8 {
        match self {
            Token::Cell(CellToken::Empty) => 0,
            Token::Cell(CellToken::Rock) => 1,
            Token::Cell(CellToken::Marker) => 2,
            Token::Cell(CellToken::Robot(d)) => 3 + d.index() as u8,
            Token::Cell(CellToken::RobotOnMarker(d)) => 7 + d.index() as u8,
            Token::Action(a) => ACTION_BASE + a.index() as u8,
            Token::Bos => BOS,
            Token::Sep => SEP,
            Token::Eos => EOS,
        }
    }

    pub fn from_id(id: u8) -> Option<Token> {
        Some(match id {
            0 => Token::Cell(CellToken::Empty),
            1 => Token::Cell(CellToken::Rock),
            2 => Token::Cell(CellToken::Marker),
            3..=6 => Token::Cell(CellToken::Robot(Direction::from_index((id - 3) as usize)?)),
            7..=10 => Token::Cell(CellToken::RobotOnMarker(Direction::from_index(
                (id - 7) as usize,
            )?)),
            11..=15 => Token::Action(Action::from_index((id - ACTION_BASE) as usize)?),
            BOS => Token::Bos,
            SEP => Token::Sep,
            EOS => Token::Eos,
            _ => return None,
        })
    }

    pub fn class(self) -> TokenClass {
        match self {
            Token::Cell(_) => TokenClass::Cell,
            Token::Action(_) => TokenClass::Action,
            _ => TokenClass::Separator,
        }
    }
}

pub fn action_token(a: Action) -> u8 {
    Token::Action(a).id()
}

/// Action encoded by `id`, if it is an action token.
pub fn token_action(id: u8) -> Option<Action> {
    match Token::from_id(id) {
        Some(Token::Action(a)) => Some(a),
        _ => None,
    }
}

/// Row-major scan, one token per cell.
pub fn encode_grid(state: &GridState) -> [u8; NUM_CELLS] {
    let mut out = [0u8; NUM_CELLS];
    let robot = state.robot_pos();
    for (cell, slot) in out.iter_mut().enumerate() {
        let pos = Position::from_cell(cell);
        let tok = if pos == robot {
            if state.has_marker(pos) {
                CellToken::RobotOnMarker(state.robot_dir())
            } else {
                CellToken::Robot(state.robot_dir())
            }
        } else if state.is_rock(pos) {
            CellToken::Rock
        } else if state.has_marker(pos) {
            CellToken::Marker
        } else {
            CellToken::Empty
        };
        *slot = Token::Cell(tok).id();
    }
    out
}

pub fn decode_grid(tokens: &[u8]) -> Result<GridState, CorpusError> {
    if tokens.len() != NUM_CELLS {
        return Err(CorpusError::MalformedTokens(format!(
            "expected {NUM_CELLS} cell tokens, got {}",
            tokens.len()
        )));
    }
    let mut rocks = 0u64;
    let mut markers = 0u64;
    let mut robot = None;
    for (cell, &id) in tokens.iter().enumerate() {
        let bit = 1u64 << cell;
        let tok = match Token::from_id(id) {
            Some(Token::Cell(c)) => c,
            _ => {
                return Err(CorpusError::MalformedTokens(format!(
                    "token {id} at cell {cell} is not a cell token"
                )))
            }
        };
        let robot_here = match tok {
            CellToken::Empty => None,
            CellToken::Rock => {
                rocks |= bit;
                None
            }
            CellToken::Marker => {
                markers |= bit;
                None
            }
            CellToken::Robot(d) => Some(d),
            CellToken::RobotOnMarker(d) => {
                markers |= bit;
                Some(d)
            }
        };
        if let Some(d) = robot_here {
            if robot.replace((Position::from_cell(cell), d)).is_some() {
                return Err(CorpusError::MalformedTokens(
                    "more than one robot cell".into(),
                ));
            }
        }
    }
    let (pos, dir) = robot.ok_or_else(|| CorpusError::MalformedTokens("no robot cell".into()))?;
    GridState::new(rocks, markers, pos, dir)
        .map_err(|e| CorpusError::MalformedTokens(e.to_string()))
}

/// Decodes action tokens up to (not including) the first `EOS`.
pub fn decode_program(tokens: &[u8]) -> Result<Program, CorpusError> {
    let mut actions = Vec::new();
    for &id in tokens {
        if id == EOS {
            break;
        }
        let a = token_action(id).ok_or_else(|| {
            CorpusError::MalformedTokens(format!("token {id} is not an action token"))
        })?;
        actions.push(a);
    }
    Ok(Program::new(actions))
}

pub fn encode_program(program: &Program) -> Vec<u8> {
    program.actions().iter().map(|&a| action_token(a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{sample_initial_state, WorldConfig};

    #[test]
    fn ids_are_contiguous_and_closed() {
        for id in 0..VOCAB_SIZE as u8 {
            assert_eq!(Token::from_id(id).unwrap().id(), id);
        }
        assert!(Token::from_id(VOCAB_SIZE as u8).is_none());
        let classes: Vec<_> = (0..VOCAB_SIZE as u8)
            .map(|i| Token::from_id(i).unwrap().class())
            .collect();
        assert_eq!(
            classes.iter().filter(|c| **c == TokenClass::Cell).count(),
            11
        );
        assert_eq!(
            classes.iter().filter(|c| **c == TokenClass::Action).count(),
            5
        );
        assert_eq!(
            classes
                .iter()
                .filter(|c| **c == TokenClass::Separator)
                .count(),
            3
        );
    }

    #[test]
    fn empty_grid_robot_corner() {
        let s = GridState::empty(Position::new(0, 0), Direction::North).unwrap();
        let enc = encode_grid(&s);
        assert_eq!(enc[0], Token::Cell(CellToken::Robot(Direction::North)).id());
        assert!(enc[1..].iter().all(|&t| t == 0));
    }

    #[test]
    fn robot_on_marker_round_trips() {
        let p = Position::new(6, 1);
        let s = GridState::new(1 << 9, 1 << p.cell(), p, Direction::West).unwrap();
        let enc = encode_grid(&s);
        assert_eq!(enc[p.cell()], 10);
        assert_eq!(decode_grid(&enc).unwrap(), s);
    }

    #[test]
    fn decode_rejects_malformed() {
        let s = sample_initial_state(3, &WorldConfig::default()).unwrap();
        let enc = encode_grid(&s);
        assert!(matches!(
            decode_grid(&enc[..63]),
            Err(CorpusError::MalformedTokens(_))
        ));
        let mut two = enc;
        let other = (s.robot_pos().cell() + 1) % NUM_CELLS;
        two[other] = 3;
        assert!(matches!(
            decode_grid(&two),
            Err(CorpusError::MalformedTokens(_))
        ));
        let mut none = enc;
        none[s.robot_pos().cell()] = 0;
        assert!(matches!(
            decode_grid(&none),
            Err(CorpusError::MalformedTokens(_))
        ));
        let mut unknown = enc;
        unknown[0] = 42;
        assert!(matches!(
            decode_grid(&unknown),
            Err(CorpusError::MalformedTokens(_))
        ));
    }

    #[test]
    fn decode_program_stops_at_eos() {
        let toks = [11, 12, 13, EOS, 99];
        let p = decode_program(&toks).unwrap();
        assert_eq!(
            p.actions(),
            &[Action::Move, Action::TurnRight, Action::TurnLeft]
        );
        assert!(decode_program(&[11, SEP, EOS]).is_err());
    }
}
