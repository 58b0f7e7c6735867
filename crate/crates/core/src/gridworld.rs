//! ASCII gridworld maps and their MDP semantics.
//!
//! A map is a rectangle of `#` (wall) and `.` (free) characters. Free cells are
//! enumerated row-major; that enumeration is the dense state index used by every
//! table in the crate. Start and goal are not map characters, they are carried
//! by [`Task`] and re-sampled per episode.

use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub const N_ACTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map text is empty")]
    Empty,
    #[error("ragged rows: line {line} has {found} cells, expected {expected}")]
    RaggedRows {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown map character {ch:?} at line {line}, column {col}")]
    UnknownChar { ch: char, line: usize, col: usize },
    #[error("map has {0} free cells, need at least 2")]
    TooFewFreeCells(usize),
    #[error("no bundled map named {0:?}")]
    UnknownBundled(String),
    #[error("reading map file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("discount must lie in (0,1), got {0}")]
    BadDiscount(f64),
    #[error("slip probability must lie in [0,1), got {0}")]
    BadSlip(f64),
    #[error("max_episode_steps must be positive")]
    NoSteps,
}

/// Primitive moves in their fixed order N, E, S, W (encoded 0..4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    North,
    East,
    South,
    West,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::North, Action::East, Action::South, Action::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (-1, 0),
            Action::East => (0, 1),
            Action::South => (1, 0),
            Action::West => (0, -1),
        }
    }

    pub fn arrow(self) -> char {
        match self {
            Action::North => '^',
            Action::East => '>',
            Action::South => 'v',
            Action::West => '<',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Free,
}

/// (row, column) grid coordinate.
pub type Coord = (usize, usize);

/// Dense index of a free cell in row-major enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    name: String,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    free: Vec<Coord>,
    index: Vec<Option<usize>>,
}

const BUNDLED: [(&str, &str); 4] = [
    ("fourroom", include_str!("../assets/fourroom.map")),
    ("tworoom", include_str!("../assets/tworoom.map")),
    ("hallway", include_str!("../assets/hallway.map")),
    ("roundabout", include_str!("../assets/roundabout.map")),
];

impl GridMap {
    pub fn parse(name: &str, text: &str) -> Result<GridMap, MapError> {
        let lines: Vec<&str> = text
            .strip_suffix('\n')
            .unwrap_or(text)
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        if lines.iter().all(|l| l.is_empty()) {
            return Err(MapError::Empty);
        }
        let width = lines[0].chars().count();
        let mut cells = Vec::with_capacity(width * lines.len());
        for (r, line) in lines.iter().enumerate() {
            let found = line.chars().count();
            if found != width {
                return Err(MapError::RaggedRows {
                    line: r + 1,
                    expected: width,
                    found,
                });
            }
            for (c, ch) in line.chars().enumerate() {
                cells.push(match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Free,
                    _ => {
                        return Err(MapError::UnknownChar {
                            ch,
                            line: r + 1,
                            col: c + 1,
                        })
                    }
                });
            }
        }
        let height = lines.len();
        let mut free = Vec::new();
        let mut index = vec![None; cells.len()];
        for (i, cell) in cells.iter().enumerate() {
            if *cell == Cell::Free {
                index[i] = Some(free.len());
                free.push((i / width, i % width));
            }
        }
        if free.len() < 2 {
            return Err(MapError::TooFewFreeCells(free.len()));
        }
        Ok(GridMap {
            name: name.to_string(),
            width,
            height,
            cells,
            free,
            index,
        })
    }

    /// Loads a map file; the map id is the file stem.
    pub fn load(path: &Path) -> Result<GridMap, MapError> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "map".to_string());
        GridMap::parse(&name, &text)
    }

    pub fn bundled(name: &str) -> Result<GridMap, MapError> {
        let key = name.strip_suffix(".map").unwrap_or(name);
        BUNDLED
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| MapError::UnknownBundled(name.to_string()))
            .and_then(|(n, text)| GridMap::parse(n, text))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// Resolves a bundled map name or a path on disk.
    pub fn resolve(spec: &str) -> Result<GridMap, MapError> {
        let path = Path::new(spec);
        if path.exists() {
            GridMap::load(path)
        } else {
            GridMap::bundled(spec)
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_states(&self) -> usize {
        self.free.len()
    }

    pub fn free_states(&self) -> &[Coord] {
        &self.free
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.free.len()).map(StateId)
    }

    pub fn cell(&self, (r, c): Coord) -> Option<Cell> {
        (r < self.height && c < self.width).then(|| self.cells[r * self.width + c])
    }

    pub fn coord(&self, s: StateId) -> Coord {
        self.free[s.0]
    }

    pub fn state_at(&self, (r, c): Coord) -> Option<StateId> {
        if r < self.height && c < self.width {
            self.index[r * self.width + c].map(StateId)
        } else {
            None
        }
    }

    /// Cell reached by attempting `a` from `s`; blocked moves stay put.
    pub fn neighbor(&self, s: StateId, a: Action) -> StateId {
        let (r, c) = self.coord(s);
        let (dr, dc) = a.delta();
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 {
            return s;
        }
        self.state_at((nr as usize, nc as usize)).unwrap_or(s)
    }

    /// Shortest-path step counts from every state to `target`; `None` where unreachable.
    pub fn bfs_distances(&self, target: StateId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_states()];
        let mut queue = std::collections::VecDeque::new();
        dist[target.0] = Some(0);
        queue.push_back(target);
        while let Some(s) = queue.pop_front() {
            let d = dist[s.0].unwrap_or(0);
            for a in Action::ALL {
                // Moves are symmetric, so neighbours of s are predecessors of s.
                let n = self.neighbor(s, a);
                if dist[n.0].is_none() {
                    dist[n.0] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.bfs_distances(StateId(0)).iter().all(Option::is_some)
    }

    /// Doorway cells: free cells walled in on both sides along one axis and
    /// open on both sides along the other.
    pub fn bottlenecks(&self) -> Vec<StateId> {
        let wall = |r: usize, c: usize| self.cell((r, c)) != Some(Cell::Free);
        (0..self.n_states())
            .map(StateId)
            .filter(|&s| {
                let (r, c) = self.coord(s);
                if r == 0 || c == 0 {
                    return false;
                }
                let ns = wall(r - 1, c) && wall(r + 1, c);
                let ew = wall(r, c - 1) && wall(r, c + 1);
                (ns && !wall(r, c - 1) && !wall(r, c + 1)) || (ew && !wall(r - 1, c) && !wall(r + 1, c))
            })
            .collect()
    }
}

impl fmt::Display for GridMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            for c in 0..self.width {
                let ch = match self.cells[r * self.width + c] {
                    Cell::Wall => '#',
                    Cell::Free => '.',
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub slip_prob: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub discount: f64,
    pub max_episode_steps: usize,
}

impl Default for MdpSpec {
    fn default() -> Self {
        MdpSpec {
            slip_prob: 0.0,
            goal_reward: 1.0,
            step_reward: 0.0,
            discount: 0.99,
            max_episode_steps: 200,
        }
    }
}

impl MdpSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(SpecError::BadDiscount(self.discount));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(SpecError::BadSlip(self.slip_prob));
        }
        if self.max_episode_steps == 0 {
            return Err(SpecError::NoSteps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub start: StateId,
    pub goal: StateId,
    pub map_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: StateId,
    pub reward: f64,
    pub done: bool,
}

/// A map together with its transition and reward semantics.
#[derive(Debug, Clone)]
pub struct Gridworld {
    pub map: GridMap,
    pub spec: MdpSpec,
}

impl Gridworld {
    pub fn new(map: GridMap, spec: MdpSpec) -> Result<Self, SpecError> {
        spec.validate()?;
        Ok(Gridworld { map, spec })
    }

    pub fn n_states(&self) -> usize {
        self.map.n_states()
    }

    /// Outcome distribution of attempting `a` in `s`, one entry per attempted move.
    pub fn transitions(&self, s: StateId, a: Action) -> [(StateId, f64); N_ACTIONS] {
        let slip = self.spec.slip_prob / (N_ACTIONS - 1) as f64;
        Action::ALL.map(|b| {
            let p = if b == a { 1.0 - self.spec.slip_prob } else { slip };
            (self.map.neighbor(s, b), p)
        })
    }

    pub fn reward(&self, next: StateId, goal: StateId) -> f64 {
        if next == goal {
            self.spec.goal_reward
        } else {
            self.spec.step_reward
        }
    }

    /// Samples one transition. Episode-length truncation is the caller's job.
    pub fn step(&self, s: StateId, a: Action, goal: StateId, rng: &mut Rng) -> StepOutcome {
        let attempted = if self.spec.slip_prob > 0.0 && rng.random::<f64>() < self.spec.slip_prob {
            let k = rng.random_range(0..N_ACTIONS - 1);
            let others: Vec<Action> = Action::ALL.into_iter().filter(|&b| b != a).collect();
            others[k]
        } else {
            a
        };
        let next = self.map.neighbor(s, attempted);
        StepOutcome {
            next,
            reward: self.reward(next, goal),
            done: next == goal,
        }
    }

    /// Draws start and goal uniformly without replacement from the free cells.
    pub fn sample_task(&self, rng: &mut Rng) -> Task {
        sample_task(&self.map, rng)
    }
}

pub fn sample_task(map: &GridMap, rng: &mut Rng) -> Task {
    let picked = sample(rng, map.n_states(), 2);
    Task {
        start: StateId(picked.index(0)),
        goal: StateId(picked.index(1)),
        map_id: map.name().to_string(),
    }
}
