//! Grid-world navigation language: states, actions, intervenable dynamics and
//! latent-feature extraction.
//!
//! A [`GridState`] is an 8×8 world holding rocks, binary markers and a single
//! robot. Programs are flat sequences of [`Action`] tokens. What a token *does*
//! is decided by a [`SemanticsMap`]: the identity map gives the reference
//! dynamics, any other permutation is a do-intervention on the dynamics that
//! defines an alternative causal model over the same variables.

use std::fmt;
use std::ops::RangeInclusive;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID_SIZE: usize = 8;
pub const NUM_CELLS: usize = GRID_SIZE * GRID_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn turn_right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }

    pub fn turn_left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    /// Row/column offset of one step forward. North is decreasing row.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::North => (-1, 0),
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Move,
    TurnRight,
    TurnLeft,
    PutMarker,
    PickMarker,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Move,
        Action::TurnRight,
        Action::TurnLeft,
        Action::PutMarker,
        Action::PickMarker,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Move => "move",
            Action::TurnRight => "turn_right",
            Action::TurnLeft => "turn_left",
            Action::PutMarker => "put_marker",
            Action::PickMarker => "pick_marker",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.name() == name)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn cell(self) -> usize {
        self.row * GRID_SIZE + self.col
    }

    pub fn from_cell(cell: usize) -> Self {
        Self {
            row: cell / GRID_SIZE,
            col: cell % GRID_SIZE,
        }
    }

    /// The neighbouring cell in `dir`, or `None` when it falls off the grid.
    pub fn ahead(self, dir: Direction) -> Option<Position> {
        let (dr, dc) = dir.delta();
        let row = self.row as isize + dr;
        let col = self.col as isize + dc;
        let range = 0..GRID_SIZE as isize;
        (range.contains(&row) && range.contains(&col))
            .then(|| Position::new(row as usize, col as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("invalid grid state: {0}")]
    InvalidState(String),
    #[error("invalid world or semantics: {0}")]
    Config(String),
    #[error("no valid action exists from the current state")]
    SamplingStuck,
    #[error("empty program length range")]
    EmptyLengthRange,
}

/// Runtime failure of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
pub enum Crash {
    #[error("move blocked by a rock or the grid boundary")]
    MoveBlocked,
    #[error("marker conflict")]
    MarkerConflict,
}

/// A crash raised while executing a program; `index` is the 0-based position
/// of the failing token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("program crashed at token {index}: {crash}")]
pub struct ExecError {
    pub index: usize,
    pub crash: Crash,
}

/// World state. Rocks and markers are stored as row-major bitboards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    rocks: u64,
    markers: u64,
    robot: Position,
    dir: Direction,
}

impl GridState {
    pub fn new(
        rocks: u64,
        markers: u64,
        robot: Position,
        dir: Direction,
    ) -> Result<Self, GridError> {
        if robot.row >= GRID_SIZE || robot.col >= GRID_SIZE {
            return Err(GridError::InvalidState(format!(
                "robot {robot:?} out of bounds"
            )));
        }
        if rocks & (1 << robot.cell()) != 0 {
            return Err(GridError::InvalidState("robot stands on a rock".into()));
        }
        if rocks & markers != 0 {
            return Err(GridError::InvalidState("rock cell carries a marker".into()));
        }
        Ok(Self {
            rocks,
            markers,
            robot,
            dir,
        })
    }

    /// An otherwise empty grid with only the robot.
    pub fn empty(robot: Position, dir: Direction) -> Result<Self, GridError> {
        Self::new(0, 0, robot, dir)
    }

    pub fn width(&self) -> usize {
        GRID_SIZE
    }

    pub fn height(&self) -> usize {
        GRID_SIZE
    }

    pub fn rocks(&self) -> u64 {
        self.rocks
    }

    pub fn markers(&self) -> u64 {
        self.markers
    }

    pub fn robot_pos(&self) -> Position {
        self.robot
    }

    pub fn robot_dir(&self) -> Direction {
        self.dir
    }

    pub fn is_rock(&self, pos: Position) -> bool {
        self.rocks & (1 << pos.cell()) != 0
    }

    pub fn has_marker(&self, pos: Position) -> bool {
        self.markers & (1 << pos.cell()) != 0
    }

    pub fn marker_count(&self) -> u32 {
        self.markers.count_ones()
    }

    /// True iff the cell in front of the robot is off-grid or a rock.
    pub fn facing_blocked(&self) -> bool {
        match self.robot.ahead(self.dir) {
            None => true,
            Some(p) => self.is_rock(p),
        }
    }

    /// Applies an executed action (after semantics lookup).
    pub fn apply(&self, action: Action) -> Result<GridState, Crash> {
        let mut next = *self;
        let bit = 1u64 << self.robot.cell();
        match action {
            Action::Move => match self.robot.ahead(self.dir) {
                Some(p) if !self.is_rock(p) => next.robot = p,
                _ => return Err(Crash::MoveBlocked),
            },
            Action::TurnRight => next.dir = self.dir.turn_right(),
            Action::TurnLeft => next.dir = self.dir.turn_left(),
            Action::PutMarker => {
                if self.markers & bit != 0 {
                    return Err(Crash::MarkerConflict);
                }
                next.markers |= bit;
            }
            Action::PickMarker => {
                if self.markers & bit == 0 {
                    return Err(Crash::MarkerConflict);
                }
                next.markers &= !bit;
            }
        }
        Ok(next)
    }
}

/// A bijection from program tokens to the action each token executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SemanticsMap {
    mapping: [Action; 5],
}

impl Default for SemanticsMap {
    fn default() -> Self {
        Self::identity()
    }
}

impl SemanticsMap {
    pub fn identity() -> Self {
        Self {
            mapping: Action::ALL,
        }
    }

    /// turn_right → turn_left, turn_left → move, move → turn_right.
    pub fn cycle3() -> Self {
        let mut m = Self::identity();
        m.mapping[Action::TurnRight.index()] = Action::TurnLeft;
        m.mapping[Action::TurnLeft.index()] = Action::Move;
        m.mapping[Action::Move.index()] = Action::TurnRight;
        m
    }

    pub fn swap(a: Action, b: Action) -> Self {
        let mut m = Self::identity();
        m.mapping.swap(a.index(), b.index());
        m
    }

    pub fn from_mapping(mapping: [Action; 5]) -> Result<Self, GridError> {
        let mut seen = [false; 5];
        for a in mapping {
            if std::mem::replace(&mut seen[a.index()], true) {
                return Err(GridError::Config(format!(
                    "semantics table is not a bijection: {a} appears twice"
                )));
            }
        }
        Ok(Self { mapping })
    }

    pub fn mapping(&self) -> [Action; 5] {
        self.mapping
    }

    /// The action executed when `token` is read.
    pub fn apply(&self, token: Action) -> Action {
        self.mapping[token.index()]
    }

    /// `compose(a, b)` executes `b` first then `a`: `a(b(x))`.
    pub fn compose(&self, inner: &SemanticsMap) -> SemanticsMap {
        let mut mapping = Action::ALL;
        for a in Action::ALL {
            mapping[a.index()] = self.apply(inner.apply(a));
        }
        SemanticsMap { mapping }
    }

    pub fn invert(&self) -> SemanticsMap {
        let mut mapping = Action::ALL;
        for a in Action::ALL {
            mapping[self.apply(a).index()] = a;
        }
        SemanticsMap { mapping }
    }

    pub fn is_identity(&self) -> bool {
        self.mapping == Action::ALL
    }

    /// Stable identifier. Well-known maps get names, everything else is
    /// `perm:` followed by the executed action index for each token.
    pub fn id(&self) -> String {
        for (name, s) in Self::named() {
            if s == *self {
                return name.to_string();
            }
        }
        let digits: String = self
            .mapping
            .iter()
            .map(|a| char::from(b'0' + a.index() as u8))
            .collect();
        format!("perm:{digits}")
    }

    pub fn from_id(id: &str) -> Result<Self, GridError> {
        if let Some((_, s)) = Self::named().into_iter().find(|(n, _)| *n == id) {
            return Ok(s);
        }
        let digits = id
            .strip_prefix("perm:")
            .ok_or_else(|| GridError::Config(format!("unknown semantics id `{id}`")))?;
        let idx: Vec<usize> = digits
            .chars()
            .filter_map(|c| c.to_digit(10).map(|d| d as usize))
            .collect();
        if idx.len() != 5 || digits.len() != 5 {
            return Err(GridError::Config(format!("malformed semantics id `{id}`")));
        }
        let mut mapping = Action::ALL;
        for (slot, i) in mapping.iter_mut().zip(idx) {
            *slot = Action::from_index(i)
                .ok_or_else(|| GridError::Config(format!("malformed semantics id `{id}`")))?;
        }
        Self::from_mapping(mapping)
    }

    fn named() -> [(&'static str, SemanticsMap); 4] {
        [
            ("identity", Self::identity()),
            ("cycle3", Self::cycle3()),
            (
                "swap_move_turn_left",
                Self::swap(Action::Move, Action::TurnLeft),
            ),
            (
                "swap_turn_right_turn_left",
                Self::swap(Action::TurnRight, Action::TurnLeft),
            ),
        ]
    }

    /// Relabels every token of `program` through the map.
    pub fn map_program(&self, program: &Program) -> Program {
        Program::new(program.actions().iter().map(|&a| self.apply(a)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Program {
    actions: Vec<Action>,
}

impl Program {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions }
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

impl FromIterator<Action> for Program {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub states: Vec<GridState>,
}

impl Trace {
    pub fn initial(&self) -> &GridState {
        &self.states[0]
    }

    pub fn last(&self) -> &GridState {
        self.states.last().expect("trace is never empty")
    }
}

/// Target features of one latent state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentLabel {
    pub row: usize,
    pub col: usize,
    pub dir: Direction,
    pub facing_blocked: bool,
}

pub fn step(
    state: &GridState,
    token: Action,
    semantics: &SemanticsMap,
) -> Result<GridState, Crash> {
    state.apply(semantics.apply(token))
}

pub fn execute(
    s0: &GridState,
    program: &Program,
    semantics: &SemanticsMap,
) -> Result<Trace, ExecError> {
    let mut states = Vec::with_capacity(program.len() + 1);
    states.push(*s0);
    for (index, &token) in program.actions().iter().enumerate() {
        let next = step(states.last().unwrap(), token, semantics)
            .map_err(|crash| ExecError { index, crash })?;
        states.push(next);
    }
    Ok(Trace { states })
}

pub fn latent_features(state: &GridState) -> LatentLabel {
    let pos = state.robot_pos();
    LatentLabel {
        row: pos.row,
        col: pos.col,
        dir: state.robot_dir(),
        facing_blocked: state.facing_blocked(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub rock_density: f64,
    pub marker_density: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            rock_density: 0.1,
            marker_density: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        for (name, v) in [
            ("rock_density", self.rock_density),
            ("marker_density", self.marker_density),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(GridError::Config(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn sample_initial_state(seed: u64, config: &WorldConfig) -> Result<GridState, GridError> {
    sample_initial_state_with(&mut ChaCha8Rng::seed_from_u64(seed), config)
}

/// Cells are filled independently (rock, else marker, else empty); the robot
/// then lands uniformly on a non-rock cell with a uniform heading. A marker
/// under the robot is kept.
pub fn sample_initial_state_with<R: Rng>(
    rng: &mut R,
    config: &WorldConfig,
) -> Result<GridState, GridError> {
    config.validate()?;
    loop {
        let mut rocks = 0u64;
        let mut markers = 0u64;
        for cell in 0..NUM_CELLS {
            if rng.gen_bool(config.rock_density) {
                rocks |= 1 << cell;
            } else if rng.gen_bool(config.marker_density) {
                markers |= 1 << cell;
            }
        }
        let free: Vec<usize> = (0..NUM_CELLS).filter(|c| rocks & (1 << c) == 0).collect();
        if free.is_empty() {
            continue;
        }
        let cell = free[rng.gen_range(0..free.len())];
        let dir = Direction::ALL[rng.gen_range(0..4)];
        return GridState::new(rocks, markers, Position::from_cell(cell), dir);
    }
}

pub fn sample_program(
    seed: u64,
    s0: &GridState,
    length_range: RangeInclusive<usize>,
    semantics: &SemanticsMap,
) -> Result<Program, GridError> {
    sample_program_with(
        &mut ChaCha8Rng::seed_from_u64(seed),
        s0,
        length_range,
        semantics,
    )
}

/// Samples over *executed* actions: at each step an effect is drawn uniformly
/// from those that do not crash, and the emitted token is its preimage under
/// `semantics`. The random stream is therefore consumed identically for every
/// semantics, and the token sequence under `π` is `π⁻¹` of the identity one.
pub fn sample_program_with<R: Rng>(
    rng: &mut R,
    s0: &GridState,
    length_range: RangeInclusive<usize>,
    semantics: &SemanticsMap,
) -> Result<Program, GridError> {
    if length_range.is_empty() {
        return Err(GridError::EmptyLengthRange);
    }
    let inverse = semantics.invert();
    let len = rng.gen_range(length_range);
    let mut state = *s0;
    let mut actions = Vec::with_capacity(len);
    let mut valid = Vec::with_capacity(5);
    for _ in 0..len {
        valid.clear();
        valid.extend(
            Action::ALL
                .iter()
                .filter_map(|&a| state.apply(a).ok().map(|s| (a, s))),
        );
        if valid.is_empty() {
            return Err(GridError::SamplingStuck);
        }
        let (effect, next) = valid[rng.gen_range(0..valid.len())];
        actions.push(inverse.apply(effect));
        state = next;
    }
    Ok(Program::new(actions))
}

/// Exogenous variables of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExogenousAssignment {
    pub initial_state: GridState,
    pub program: Program,
    pub sample_seed: u64,
}

impl ExogenousAssignment {
    /// Draws the initial state then the program from a single stream seeded by
    /// `sample_seed`.
    pub fn sample(
        sample_seed: u64,
        world: &WorldConfig,
        length_range: RangeInclusive<usize>,
        semantics: &SemanticsMap,
    ) -> Result<Self, GridError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let initial_state = sample_initial_state_with(&mut rng, world)?;
        let program = sample_program_with(&mut rng, &initial_state, length_range, semantics)?;
        Ok(Self {
            initial_state,
            program,
            sample_seed,
        })
    }

    pub fn trace(&self, semantics: &SemanticsMap) -> Result<Trace, ExecError> {
        execute(&self.initial_state, &self.program, semantics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open(row: usize, col: usize, dir: Direction) -> GridState {
        GridState::empty(Position::new(row, col), dir).unwrap()
    }

    #[test]
    fn rotations_compose() {
        for d in Direction::ALL {
            assert_eq!(d.turn_right().turn_right().turn_right().turn_right(), d);
            assert_eq!(d.turn_right().turn_left(), d);
        }
    }

    #[test]
    fn move_east() {
        let s = open(3, 3, Direction::East);
        let t = step(&s, Action::Move, &SemanticsMap::identity()).unwrap();
        assert_eq!(t.robot_pos(), Position::new(3, 4));
        assert_eq!(t.robot_dir(), Direction::East);
    }

    #[test]
    fn turn_left_then_right_is_identity() {
        let id = SemanticsMap::identity();
        let s = GridState::new(0b1010, 1 << 40, Position::new(5, 2), Direction::South).unwrap();
        let t = step(
            &step(&s, Action::TurnLeft, &id).unwrap(),
            Action::TurnRight,
            &id,
        )
        .unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn move_off_north_edge_crashes() {
        let s = open(0, 4, Direction::North);
        assert_eq!(
            step(&s, Action::Move, &SemanticsMap::identity()),
            Err(Crash::MoveBlocked)
        );
    }

    #[test]
    fn move_into_rock_crashes() {
        let rock = Position::new(3, 4);
        let s = GridState::new(1 << rock.cell(), 0, Position::new(3, 3), Direction::East).unwrap();
        assert_eq!(s.apply(Action::Move), Err(Crash::MoveBlocked));
    }

    #[test]
    fn permuted_move_turns_right() {
        let mut mapping = Action::ALL;
        mapping[Action::Move.index()] = Action::TurnRight;
        mapping[Action::TurnRight.index()] = Action::Move;
        let sem = SemanticsMap::from_mapping(mapping).unwrap();
        let t = step(&open(3, 3, Direction::East), Action::Move, &sem).unwrap();
        assert_eq!(t.robot_pos(), Position::new(3, 3));
        assert_eq!(t.robot_dir(), Direction::South);
    }

    #[test]
    fn marker_conflicts() {
        let s = open(2, 2, Direction::West);
        assert_eq!(s.apply(Action::PickMarker), Err(Crash::MarkerConflict));
        let m = s.apply(Action::PutMarker).unwrap();
        assert!(m.has_marker(Position::new(2, 2)));
        assert_eq!(m.apply(Action::PutMarker), Err(Crash::MarkerConflict));
        assert_eq!(m.apply(Action::PickMarker).unwrap(), s);
    }

    #[test]
    fn invalid_states_rejected() {
        let p = Position::new(1, 1);
        assert!(GridState::new(1 << p.cell(), 0, p, Direction::North).is_err());
        assert!(GridState::new(1, 1, Position::new(4, 4), Direction::North).is_err());
        assert!(GridState::new(0, 0, Position::new(8, 0), Direction::North).is_err());
    }

    #[test]
    fn execute_empty_and_full_rotation() {
        let s0 = open(4, 4, Direction::North);
        let id = SemanticsMap::identity();
        assert_eq!(
            execute(&s0, &Program::default(), &id).unwrap().states,
            vec![s0]
        );
        let prog = Program::new(vec![Action::TurnRight; 4]);
        let trace = execute(&s0, &prog, &id).unwrap();
        assert_eq!(trace.states.len(), 5);
        assert_eq!(*trace.last(), s0);
    }

    #[test]
    fn execute_reports_failing_index() {
        let s0 = open(0, 0, Direction::East);
        let prog = Program::new(vec![Action::TurnLeft, Action::TurnLeft, Action::Move]);
        let err = execute(&s0, &prog, &SemanticsMap::identity()).unwrap_err();
        assert_eq!(
            err,
            ExecError {
                index: 2,
                crash: Crash::MoveBlocked
            }
        );
    }

    #[test]
    fn latent_feature_examples() {
        assert!(latent_features(&open(0, 0, Direction::North)).facing_blocked);
        let rock = Position::new(4, 5);
        let s = GridState::new(1 << rock.cell(), 0, Position::new(4, 4), Direction::East).unwrap();
        let l = latent_features(&s);
        assert_eq!(
            (l.row, l.col, l.dir, l.facing_blocked),
            (4, 4, Direction::East, true)
        );
        let l = latent_features(&open(4, 4, Direction::East));
        assert_eq!(
            (l.row, l.col, l.dir, l.facing_blocked),
            (4, 4, Direction::East, false)
        );
    }

    #[test]
    fn semantics_group_laws() {
        let c = SemanticsMap::cycle3();
        assert!(c.compose(&c.invert()).is_identity());
        assert!(c.compose(&c).compose(&c).is_identity());
        assert!(!c.compose(&c).is_identity());
        let s = SemanticsMap::swap(Action::Move, Action::TurnLeft);
        assert_eq!(s.invert(), s);
        assert_eq!(c.apply(Action::TurnRight), Action::TurnLeft);
        assert_eq!(c.apply(Action::TurnLeft), Action::Move);
        assert_eq!(c.apply(Action::Move), Action::TurnRight);
    }

    #[test]
    fn semantics_ids_round_trip() {
        for s in [
            SemanticsMap::identity(),
            SemanticsMap::cycle3(),
            SemanticsMap::swap(Action::PutMarker, Action::Move),
            SemanticsMap::swap(Action::TurnRight, Action::TurnLeft),
        ] {
            assert_eq!(SemanticsMap::from_id(&s.id()).unwrap(), s);
        }
        assert_eq!(
            SemanticsMap::swap(Action::PutMarker, Action::Move).id(),
            "perm:31204"
        );
        assert!(SemanticsMap::from_id("perm:00234").is_err());
        assert!(SemanticsMap::from_id("bogus").is_err());
    }

    #[test]
    fn degenerate_densities_give_bare_grid() {
        let cfg = WorldConfig {
            rock_density: 0.0,
            marker_density: 0.0,
        };
        let s = sample_initial_state(11, &cfg).unwrap();
        assert_eq!(s.rocks(), 0);
        assert_eq!(s.markers(), 0);
    }

    #[test]
    fn bad_densities_rejected() {
        let cfg = WorldConfig {
            rock_density: 1.0,
            marker_density: 0.0,
        };
        assert!(matches!(
            sample_initial_state(0, &cfg),
            Err(GridError::Config(_))
        ));
        let cfg = WorldConfig {
            rock_density: 0.1,
            marker_density: -0.1,
        };
        assert!(matches!(
            sample_initial_state(0, &cfg),
            Err(GridError::Config(_))
        ));
    }

    #[test]
    fn initial_state_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(
            sample_initial_state(99, &cfg).unwrap(),
            sample_initial_state(99, &cfg).unwrap()
        );
    }

    #[test]
    fn empty_length_range_rejected() {
        let s0 = open(1, 1, Direction::North);
        #[allow(clippy::reversed_empty_ranges)]
        let r = sample_program(0, &s0, 5..=4, &SemanticsMap::identity());
        assert_eq!(r, Err(GridError::EmptyLengthRange));
    }

    proptest! {
        #[test]
        fn sampled_programs_never_crash(seed in any::<u64>(), perm in 0usize..4) {
            let sem = [SemanticsMap::identity(), SemanticsMap::cycle3(),
                SemanticsMap::swap(Action::Move, Action::TurnLeft),
                SemanticsMap::swap(Action::PutMarker, Action::TurnRight)][perm];
            let exo = ExogenousAssignment::sample(seed, &WorldConfig::default(), 1..=15, &sem).unwrap();
            prop_assert!(exo.trace(&sem).is_ok());
        }

        #[test]
        fn permutation_symmetry(seed in any::<u64>(), perm in prop::sample::select(vec![
            [0usize, 1, 2, 3, 4], [1, 2, 0, 3, 4], [3, 4, 0, 1, 2], [4, 3, 2, 1, 0], [2, 0, 1, 4, 3]])) {
            let pi = SemanticsMap::from_mapping(perm.map(|i| Action::ALL[i])).unwrap();
            let exo = ExogenousAssignment::sample(seed, &WorldConfig::default(), 1..=15, &SemanticsMap::identity()).unwrap();
            let a = execute(&exo.initial_state, &exo.program, &pi);
            let b = execute(&exo.initial_state, &pi.map_program(&exo.program), &SemanticsMap::identity());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn sampling_order_relates_tokens_by_inverse(seed in any::<u64>()) {
            let pi = SemanticsMap::cycle3();
            let world = WorldConfig::default();
            let id = ExogenousAssignment::sample(seed, &world, 6..=10, &SemanticsMap::identity()).unwrap();
            let pm = ExogenousAssignment::sample(seed, &world, 6..=10, &pi).unwrap();
            prop_assert_eq!(pm.initial_state, id.initial_state);
            prop_assert_eq!(&pm.program, &pi.invert().map_program(&id.program));
            prop_assert_eq!(pm.trace(&pi).unwrap(), id.trace(&SemanticsMap::identity()).unwrap());
        }

        #[test]
        fn markers_conserved_and_rocks_fixed(seed in any::<u64>()) {
            let id = SemanticsMap::identity();
            let exo = ExogenousAssignment::sample(seed, &WorldConfig { rock_density: 0.1, marker_density: 0.3 }, 1..=15, &id).unwrap();
            let trace = exo.trace(&id).unwrap();
            for (w, &a) in trace.states.windows(2).zip(exo.program.actions()) {
                let delta = w[1].marker_count() as i64 - w[0].marker_count() as i64;
                let expected = match a { Action::PutMarker => 1, Action::PickMarker => -1, _ => 0 };
                prop_assert_eq!(delta, expected);
                prop_assert_eq!(w[1].rocks(), exo.initial_state.rocks());
            }
        }
    }
}
