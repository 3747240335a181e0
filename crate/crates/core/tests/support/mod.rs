//! A deliberately naive reference interpreter, written against the textual
//! rules of the language rather than the library's bitboards: a grid of
//! characters, a robot as `(row, col, heading)` with headings as compass
//! letters, and actions looked up by name.

#![allow(dead_code)]

use gridprobe_core::gridworld::{Action, Direction, GridState, Position, SemanticsMap};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    /// `'#'` rock, `'o'` marker, `'.'` empty.
    pub cells: Vec<Vec<char>>,
    pub row: i64,
    pub col: i64,
    /// One of `N`, `E`, `S`, `W`.
    pub heading: char,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleCrash {
    Blocked,
    Marker,
}

pub fn from_state(s: &GridState) -> World {
    let mut cells = vec![vec!['.'; 8]; 8];
    for (r, row) in cells.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let p = Position::new(r, c);
            if s.is_rock(p) {
                *cell = '#';
            } else if s.has_marker(p) {
                *cell = 'o';
            }
        }
    }
    let heading = match s.robot_dir() {
        Direction::North => 'N',
        Direction::East => 'E',
        Direction::South => 'S',
        Direction::West => 'W',
    };
    World {
        cells,
        row: s.robot_pos().row as i64,
        col: s.robot_pos().col as i64,
        heading,
    }
}

fn forward(heading: char) -> (i64, i64) {
    match heading {
        'N' => (-1, 0),
        'S' => (1, 0),
        'E' => (0, 1),
        'W' => (0, -1),
        _ => unreachable!(),
    }
}

fn right_of(heading: char) -> char {
    match heading {
        'N' => 'E',
        'E' => 'S',
        'S' => 'W',
        _ => 'N',
    }
}

fn left_of(heading: char) -> char {
    right_of(right_of(right_of(heading)))
}

pub fn front_blocked(w: &World) -> bool {
    let (dr, dc) = forward(w.heading);
    let (r, c) = (w.row + dr, w.col + dc);
    !(0..8).contains(&r) || !(0..8).contains(&c) || w.cells[r as usize][c as usize] == '#'
}

/// Executes the action *named* `effect`.
pub fn act(w: &World, effect: &str) -> Result<World, OracleCrash> {
    let mut n = w.clone();
    let here = w.cells[w.row as usize][w.col as usize];
    match effect {
        "move" => {
            if front_blocked(w) {
                return Err(OracleCrash::Blocked);
            }
            let (dr, dc) = forward(w.heading);
            n.row += dr;
            n.col += dc;
        }
        "turn_right" => n.heading = right_of(w.heading),
        "turn_left" => n.heading = left_of(w.heading),
        "put_marker" => {
            if here == 'o' {
                return Err(OracleCrash::Marker);
            }
            n.cells[w.row as usize][w.col as usize] = 'o';
        }
        "pick_marker" => {
            if here != 'o' {
                return Err(OracleCrash::Marker);
            }
            n.cells[w.row as usize][w.col as usize] = '.';
        }
        other => panic!("unknown action {other}"),
    }
    Ok(n)
}

/// Runs `tokens` where token `t` executes `table[t]`. Returns every state
/// visited, or the index and kind of the first crash.
pub fn run(
    start: &World,
    tokens: &[&str],
    table: &[(&str, &str)],
) -> Result<Vec<World>, (usize, OracleCrash)> {
    let mut states = vec![start.clone()];
    for (i, t) in tokens.iter().enumerate() {
        let effect = table
            .iter()
            .find(|(k, _)| k == t)
            .map(|(_, v)| *v)
            .expect("token in table");
        let next = act(states.last().unwrap(), effect).map_err(|e| (i, e))?;
        states.push(next);
    }
    Ok(states)
}

/// The semantics as a name table, read off through the public API.
pub fn table_of(s: &SemanticsMap) -> Vec<(&'static str, &'static str)> {
    Action::ALL
        .iter()
        .map(|&a| (a.name(), s.apply(a).name()))
        .collect()
}

/// `(row, col, heading index N=0 E=1 S=2 W=3, front blocked)`.
pub fn label(w: &World) -> (usize, usize, usize, bool) {
    let h = "NESW".find(w.heading).unwrap();
    (w.row as usize, w.col as usize, h, front_blocked(w))
}

/// Cell tokens of the vocabulary, computed from the character grid.
pub fn encode(w: &World) -> Vec<u8> {
    let h = "NESW".find(w.heading).unwrap() as u8;
    let mut out = Vec::with_capacity(64);
    for r in 0..8 {
        for c in 0..8 {
            let ch = w.cells[r][c];
            out.push(if r as i64 == w.row && c as i64 == w.col {
                if ch == 'o' {
                    7 + h
                } else {
                    3 + h
                }
            } else {
                match ch {
                    '#' => 1,
                    'o' => 2,
                    _ => 0,
                }
            });
        }
    }
    out
}

/// All 120 permutations of the five actions.
pub fn all_semantics() -> Vec<SemanticsMap> {
    let mut out = Vec::new();
    let mut perm = [0usize, 1, 2, 3, 4];
    permute(&mut perm, 0, &mut out);
    out
}

fn permute(p: &mut [usize; 5], k: usize, out: &mut Vec<SemanticsMap>) {
    if k == 5 {
        let mapping = p.map(|i| Action::ALL[i]);
        out.push(SemanticsMap::from_mapping(mapping).unwrap());
        return;
    }
    for i in k..5 {
        p.swap(k, i);
        permute(p, k + 1, out);
        p.swap(k, i);
    }
}

/// The small end-to-end configuration shipped in `configs/smoke.json`,
/// writing under `out`.
pub fn smoke_config(out: &std::path::Path) -> gridprobe_core::experiment::ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let mut cfg = gridprobe_core::experiment::ExperimentConfig::load(&path).expect("smoke config");
    cfg.out_dir = out.to_path_buf();
    cfg
}
