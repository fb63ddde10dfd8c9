//! Identifiers for the two axes of the task grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Rgb,
    Depth,
    Thermal,
    Flow,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Rgb, Domain::Depth, Domain::Thermal, Domain::Flow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Rgb => "rgb",
            Domain::Depth => "depth",
            Domain::Thermal => "thermal",
            Domain::Flow => "flow",
        }
    }

    /// Single-letter code used in pair names (`RD`, `TF`, ...).
    pub fn letter(self) -> char {
        match self {
            Domain::Rgb => 'R',
            Domain::Depth => 'D',
            Domain::Thermal => 'T',
            Domain::Flow => 'F',
        }
    }

    pub fn has_aux(self) -> bool {
        self != Domain::Rgb
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownDomain(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sod,
    Cod,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Sod, Task::Cod];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sod => "sod",
            Task::Cod => "cod",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// One (domain, task) combination of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub domain: Domain,
    pub task: Task,
}

impl Cell {
    pub const fn new(domain: Domain, task: Task) -> Self {
        Cell { domain, task }
    }

    /// All eight cells, domain-major.
    pub fn all() -> Vec<Cell> {
        Domain::ALL
            .into_iter()
            .flat_map(|d| Task::ALL.into_iter().map(move |t| Cell::new(d, t)))
            .collect()
    }

    /// The six cells used for joint training: four SOD domains plus RGB and
    /// flow COD.
    pub fn training_default() -> Vec<Cell> {
        vec![
            Cell::new(Domain::Rgb, Task::Sod),
            Cell::new(Domain::Depth, Task::Sod),
            Cell::new(Domain::Thermal, Task::Sod),
            Cell::new(Domain::Flow, Task::Sod),
            Cell::new(Domain::Rgb, Task::Cod),
            Cell::new(Domain::Flow, Task::Cod),
        ]
    }

    /// The cell held out for zero-shot composition.
    pub const ZERO_SHOT: Cell = Cell::new(Domain::Depth, Task::Cod);

    /// Directory-style name, e.g. `depth_cod`.
    pub fn dir_name(self) -> String {
        format!("{}_{}", self.domain, self.task)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain, self.task)
    }
}

impl FromStr for Cell {
    type Err = Error;

    /// Parses `domain:task` (also accepts `domain_task` and `domain/task`).
    fn from_str(s: &str) -> Result<Self, Error> {
        let (d, t) = s
            .split_once([':', '_', '/'])
            .ok_or_else(|| Error::Config(format!("cell `{s}` is not of the form domain:task")))?;
        Ok(Cell::new(d.parse()?, t.parse()?))
    }
}
