//! Procedural tabletop task: scenes on a 4×4 grid, rendering, instructions,
//! the gold-action oracle and the perturbation suites.

mod corpus;
mod generate;
mod oracle;
mod perturb;
pub(crate) mod render;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use crate::error::GladError;

pub use corpus::{dump_record, write_corpus};
pub use generate::{generate_scene, generate_with, sample_spec, scene_for_spec, TaskSpec, Template};
pub use oracle::{gold_actions, parse_instruction, Noun, Query};
pub use perturb::perturb;
pub use render::{render, render_with, Image, BACKGROUND};
pub use vocab::{Extreme, Relation, Verb};

/// Cells per side of the table grid.
pub const GRID: usize = 4;
/// Rendered image side in pixels.
pub const IMAGE_SIZE: usize = 32;
pub const CELL_PIXELS: usize = IMAGE_SIZE / GRID;
/// Length of every gold action sequence.
pub const ACTION_LEN: usize = 4;
/// Depth assigned to bare table.
pub const TABLE_DEPTH: f64 = 1.2;
pub const DEPTH_MIN: f64 = 0.2;
pub const DEPTH_MAX: f64 = 1.0;
pub const DEPTH_GAP: f64 = 0.1;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Cube,
    Sphere,
    Tray,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Tray];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Tray => "tray",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.1, 0.1],
            Color::Green => [0.1, 1.0, 0.1],
            Color::Blue => [0.15, 0.3, 1.0],
            Color::Yellow => [1.0, 0.9, 0.1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    /// Glyph half-extent in pixels.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 2.0,
            Size::Large => 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// `(x, y)` grid cell; `y = 0` is the far edge of the table.
    pub cell: (usize, usize),
    /// Distance from the camera.
    pub depth: f64,
}

/// A tabletop arrangement. Geometry is shape, cell and depth; color and size
/// are appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn object_at(&self, cell: (usize, usize)) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    /// Same geometry as `other`, ignoring color and size.
    pub fn same_geometry(&self, other: &Scene) -> bool {
        self.objects.len() == other.objects.len()
            && self
                .objects
                .iter()
                .zip(&other.objects)
                .all(|(a, b)| a.shape == b.shape && a.cell == b.cell && a.depth == b.depth)
    }

    /// Checks the structural invariants: object count, distinct cells,
    /// separated depths.
    pub fn validate(&self) -> crate::Result<()> {
        let n = self.objects.len();
        if !(MIN_OBJECTS..=MAX_OBJECTS).contains(&n) {
            return Err(GladError::Contract(format!("scene has {n} objects")));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if a.cell.0 >= GRID || a.cell.1 >= GRID {
                return Err(GladError::Contract(format!("cell {:?} off the grid", a.cell)));
            }
            for b in &self.objects[i + 1..] {
                if a.cell == b.cell {
                    return Err(GladError::Contract(format!("two objects at {:?}", a.cell)));
                }
                if a.depth == b.depth {
                    return Err(GladError::Contract("depths are not distinct".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Perturbation {
    Ori,
    Obj,
    Pos,
    Sem,
    Task,
}

impl Perturbation {
    pub const ALL: [Perturbation; 5] = [
        Perturbation::Ori,
        Perturbation::Obj,
        Perturbation::Pos,
        Perturbation::Sem,
        Perturbation::Task,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::Ori => "ori",
            Perturbation::Obj => "obj",
            Perturbation::Pos => "pos",
            Perturbation::Sem => "sem",
            Perturbation::Task => "task",
        }
    }

    /// Column label used in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            Perturbation::Ori => "Ori",
            Perturbation::Obj => "Obj",
            Perturbation::Pos => "Pos",
            Perturbation::Sem => "Sem",
            Perturbation::Task => "Task",
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Perturbation {
    type Err = GladError;

    fn from_str(s: &str) -> crate::Result<Self> {
        Perturbation::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GladError::Config(format!("unknown perturbation {s:?}")))
    }
}

/// An instruction and the action sequence that solves it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub instruction: [u32; vocab::INSTRUCTION_LEN],
    pub gold: [usize; ACTION_LEN],
    pub tag: Perturbation,
}

/// Knobs of the scene distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    /// Probability that a training scene ties appearance to depth order
    /// (nearest object large and red, then green, blue, yellow).
    pub appearance_bias: f64,
    /// Per-token probability of using the synonym in training instructions.
    pub synonym_rate: f64,
    /// Fraction of brightness lost between the nearest and farthest depth.
    pub shade_strength: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            appearance_bias: 0.9,
            synonym_rate: 0.1,
            shade_strength: 0.6,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> crate::Result<()> {
        for (name, v) in [
            ("appearance_bias", self.appearance_bias),
            ("synonym_rate", self.synonym_rate),
            ("shade_strength", self.shade_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GladError::Config(format!("task.{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Verb and referent-shape pairings withheld from training; the Task suite
/// asks for exactly these.
pub const HELD_OUT: [(Verb, Shape); 2] = [(Verb::Push, Shape::Sphere), (Verb::Lift, Shape::Tray)];

pub fn is_held_out(verb: Verb, shape: Shape) -> bool {
    HELD_OUT.contains(&(verb, shape))
}
