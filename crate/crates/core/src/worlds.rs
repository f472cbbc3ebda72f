//! Exact combinatorial models of the three task worlds.
//!
//! Objects are interchangeable, so a state is nothing more than the set of
//! occupied slots, stored as a bitmask. Slot numbering per world:
//!
//! * `BoxManipulation`: 3x3 grid, slot = `row * 3 + col`, moves to a free
//!   4-neighbour.
//! * `ShelfArrangement`: slots `0..4` are table slots, `4..8` shelf slots;
//!   moves go table -> shelf or shelf -> table.
//! * `BoxStacking`: 3 columns x 3 heights, slot = `col * 3 + height`; only
//!   the top box of a column moves, onto the ground or onto another column.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorldError {
    #[error("invalid state {state:#b} for {kind}")]
    InvalidState { kind: WorldKind, state: u32 },
    #[error("illegal action {from}->{to} in state {state:#b}")]
    IllegalAction { from: usize, to: usize, state: u32 },
    #[error("unknown world kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorldKind {
    BoxManipulation,
    ShelfArrangement,
    BoxStacking,
}

impl WorldKind {
    pub const ALL: [WorldKind; 3] = [
        WorldKind::BoxManipulation,
        WorldKind::ShelfArrangement,
        WorldKind::BoxStacking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorldKind::BoxManipulation => "box-manipulation",
            WorldKind::ShelfArrangement => "shelf-arrangement",
            WorldKind::BoxStacking => "box-stacking",
        }
    }
}

impl fmt::Display for WorldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorldKind {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "boxmanipulation" | "bm" => Ok(WorldKind::BoxManipulation),
            "shelfarrangement" | "sa" => Ok(WorldKind::ShelfArrangement),
            "boxstacking" | "bs" => Ok(WorldKind::BoxStacking),
            _ => Err(WorldError::UnknownKind(s.to_string())),
        }
    }
}

/// Geometry and object count of a task world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldSpec {
    pub kind: WorldKind,
    pub slots: usize,
    pub objects: usize,
}

const STACK_HEIGHT: usize = 3;
const SHELF_TABLE_SLOTS: usize = 4;

impl WorldSpec {
    pub fn new(kind: WorldKind) -> Self {
        let (slots, objects) = match kind {
            WorldKind::BoxManipulation => (9, 4),
            WorldKind::ShelfArrangement => (8, 4),
            WorldKind::BoxStacking => (9, 4),
        };
        WorldSpec { kind, slots, objects }
    }

    fn full_mask(&self) -> u32 {
        (1u32 << self.slots) - 1
    }

    /// Checks the population and gravity invariants.
    pub fn is_valid(&self, state: WorldState) -> bool {
        let bits = state.0;
        if bits & !self.full_mask() != 0 || bits.count_ones() as usize != self.objects {
            return false;
        }
        match self.kind {
            WorldKind::BoxStacking => (0..3).all(|col| {
                let column = (bits >> (col * STACK_HEIGHT)) & 0b111;
                // occupied cells must form a prefix from the ground up
                column & (column + 1) == 0
            }),
            _ => true,
        }
    }

    pub fn validate(&self, state: WorldState) -> Result<(), WorldError> {
        if self.is_valid(state) {
            Ok(())
        } else {
            Err(WorldError::InvalidState {
                kind: self.kind,
                state: state.0,
            })
        }
    }
}

/// Occupancy bitmask over the world's slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorldState(pub u32);

impl WorldState {
    pub fn from_slots(slots: &[usize]) -> Self {
        WorldState(slots.iter().fold(0, |acc, &s| acc | (1 << s)))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn is_occupied(self, slot: usize) -> bool {
        self.0 >> slot & 1 == 1
    }

    pub fn occupied_slots(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&s| self.is_occupied(s))
    }

    /// Occupancy as a 0/1 vector of length `slots`.
    pub fn occupancy(self, slots: usize) -> Vec<f64> {
        (0..slots)
            .map(|s| if self.is_occupied(s) { 1.0 } else { 0.0 })
            .collect()
    }
}

impl fmt::Display for WorldState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub from_slot: usize,
    pub to_slot: usize,
}

impl Action {
    pub fn new(from_slot: usize, to_slot: usize) -> Self {
        Action { from_slot, to_slot }
    }

    pub fn reversed(self) -> Self {
        Action {
            from_slot: self.to_slot,
            to_slot: self.from_slot,
        }
    }
}

/// All valid states in ascending bitmask order.
pub fn enumerate_states(spec: &WorldSpec) -> Vec<WorldState> {
    (0..=spec.full_mask())
        .map(WorldState)
        .filter(|&s| spec.is_valid(s))
        .collect()
}

fn grid_neighbours(cell: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (cell / 3, cell % 3);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(cell - 3);
    }
    if r < 2 {
        out.push(cell + 3);
    }
    if c > 0 {
        out.push(cell - 1);
    }
    if c < 2 {
        out.push(cell + 1);
    }
    out.into_iter()
}

fn column_height(state: WorldState, col: usize) -> usize {
    (0..STACK_HEIGHT)
        .take_while(|h| state.is_occupied(col * STACK_HEIGHT + h))
        .count()
}

pub fn legal_actions(spec: &WorldSpec, state: WorldState) -> Result<Vec<Action>, WorldError> {
    spec.validate(state)?;
    let mut actions = Vec::new();
    match spec.kind {
        WorldKind::BoxManipulation => {
            for from in state.occupied_slots() {
                for to in grid_neighbours(from) {
                    if !state.is_occupied(to) {
                        actions.push(Action::new(from, to));
                    }
                }
            }
        }
        WorldKind::ShelfArrangement => {
            for from in state.occupied_slots() {
                let targets = if from < SHELF_TABLE_SLOTS {
                    SHELF_TABLE_SLOTS..spec.slots
                } else {
                    0..SHELF_TABLE_SLOTS
                };
                for to in targets.filter(|&t| !state.is_occupied(t)) {
                    actions.push(Action::new(from, to));
                }
            }
        }
        WorldKind::BoxStacking => {
            let heights: Vec<usize> = (0..3).map(|c| column_height(state, c)).collect();
            for (src, &hs) in heights.iter().enumerate() {
                if hs == 0 {
                    continue;
                }
                for (dst, &hd) in heights.iter().enumerate() {
                    if dst != src && hd < STACK_HEIGHT {
                        actions.push(Action::new(
                            src * STACK_HEIGHT + hs - 1,
                            dst * STACK_HEIGHT + hd,
                        ));
                    }
                }
            }
        }
    }
    actions.sort();
    Ok(actions)
}

pub fn apply_action(
    spec: &WorldSpec,
    state: WorldState,
    action: Action,
) -> Result<WorldState, WorldError> {
    let legal = legal_actions(spec, state)?;
    if !legal.contains(&action) {
        return Err(WorldError::IllegalAction {
            from: action.from_slot,
            to: action.to_slot,
            state: state.0,
        });
    }
    Ok(WorldState(
        (state.0 & !(1 << action.from_slot)) | (1 << action.to_slot),
    ))
}

/// Every ordered move `(s, apply_action(s, a))`. Each undirected transition
/// appears twice, once per direction.
pub fn directed_transitions(spec: &WorldSpec) -> Vec<(WorldState, WorldState)> {
    let mut out = Vec::new();
    for s in enumerate_states(spec) {
        for a in legal_actions(spec, s).expect("enumerated states are valid") {
            out.push((s, apply_action(spec, s, a).expect("action is legal")));
        }
    }
    out
}

/// Legal state transitions as unordered pairs `(a, b)` with `a < b`, sorted.
/// Every move is reversible, so this is the transition graph's edge set.
pub fn legal_transitions(spec: &WorldSpec) -> Vec<(WorldState, WorldState)> {
    let mut out: Vec<_> = directed_transitions(spec)
        .into_iter()
        .filter(|(a, b)| a < b)
        .collect();
    out.sort();
    out
}

pub fn is_legal_transition(
    spec: &WorldSpec,
    a: WorldState,
    b: WorldState,
) -> Result<bool, WorldError> {
    spec.validate(a)?;
    spec.validate(b)?;
    let diff = a.0 ^ b.0;
    if diff.count_ones() != 2 {
        return Ok(false);
    }
    let from = (a.0 & diff).trailing_zeros() as usize;
    let to = (b.0 & diff).trailing_zeros() as usize;
    Ok(legal_actions(spec, a)?.contains(&Action::new(from, to)))
}

/// Writes the undirected transition graph as "state_a state_b" lines.
pub fn write_edge_list<W: Write>(spec: &WorldSpec, mut out: W) -> std::io::Result<()> {
    for (a, b) in legal_transitions(spec) {
        writeln!(out, "{} {}", a.0, b.0)?;
    }
    Ok(())
}
