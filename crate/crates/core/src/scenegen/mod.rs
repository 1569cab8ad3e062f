//! Procedural shape scenes.
//!
//! A [`SceneSpec`] is the ground truth; the rendered image, captions, QA
//! pairs and statements are all views of it, and every label can be checked
//! with the predicate evaluator in [`language`].

mod augment;
mod corpus;
pub mod language;
mod vocab;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Image;

pub use augment::{augment, AugmentPolicy};
pub use corpus::{
    build_corpus, decode_ppm, encode_ppm, fingerprint, read_ppm, write_ppm, Corpus, CorpusExample, CorpusSummary, QaRecord, SceneRecord,
    Split, StatementRecord,
};
pub use language::{
    answer_for, caption_of, evaluate_statement, qa_pairs_of, statement_of, QaKind, QaPair, Statement,
};
pub use vocab::{Vocabulary, MAX_VOCAB};

pub const GRID: usize = 4;
pub const CELL: usize = 8;
pub const IMAGE_SIZE: usize = GRID * CELL;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no single-attribute perturbation makes the statement false")]
    CannotFalsify,
    #[error("unknown augmentation policy {0:?}")]
    UnknownPolicy(String),
    #[error("text has {len} tokens, more than the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("corpus needs at least one train and one eval scene")]
    EmptySplit,
    #[error("malformed corpus: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// 8-bit RGB; rendering uses `byte / 255` so PPM files round-trip exactly.
    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 160, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 220, 0],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        self.rgb8().map(|b| b as f32 / 255.0)
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
    pub size: Size,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    /// Restores the (row, col) ordering invariant.
    pub fn normalize(&mut self) {
        self.objects.sort_by_key(|o| (o.row, o.col));
    }

    /// Checks the structural invariants: 1–3 objects inside the grid, no
    /// shared cell, no repeated (shape, color), ordered by (row, col).
    pub fn is_valid(&self) -> bool {
        let n = self.objects.len();
        if !(1..=3).contains(&n) {
            return false;
        }
        if self.objects.iter().any(|o| o.row >= GRID || o.col >= GRID) {
            return false;
        }
        let sorted = self.objects.windows(2).all(|w| (w[0].row, w[0].col) < (w[1].row, w[1].col));
        let mut kinds: Vec<_> = self.objects.iter().map(|o| (o.shape, o.color)).collect();
        kinds.sort();
        kinds.dedup();
        sorted && kinds.len() == n
    }

    pub fn combos(&self) -> impl Iterator<Item = (Shape, Color)> + '_ {
        self.objects.iter().map(|o| (o.shape, o.color))
    }
}

/// Draws a scene: 1–3 objects in distinct cells with distinct
/// (shape, color) pairs. Pure function of `seed`.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3usize);
    let cells = sample(&mut rng, GRID * GRID, count);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for cell in cells.iter() {
        let (shape, color) = loop {
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
            if !objects.iter().any(|o| o.shape == shape && o.color == color) {
                break (shape, color);
            }
        };
        let size = Size::ALL[rng.random_range(0..Size::ALL.len())];
        objects.push(SceneObject {
            shape,
            color,
            row: cell / GRID,
            col: cell % GRID,
            size,
        });
    }
    let mut spec = SceneSpec { objects, seed };
    spec.normalize();
    spec
}

/// Whether pixel `(i, j)` of a `side × side` box is covered by `shape`.
fn covers(shape: Shape, side: usize, i: usize, j: usize) -> bool {
    let half = side as f32 / 2.0;
    let dy = i as f32 + 0.5 - half;
    let dx = j as f32 + 0.5 - half;
    match shape {
        Shape::Square => true,
        Shape::Circle => dx * dx + dy * dy <= half * half,
        // apex at the top, full-width base on the bottom row
        Shape::Triangle => dx.abs() <= (i as f32 + 1.0) / 2.0,
    }
}

/// Renders a 32×32 image: white background, each object inside its 8×8
/// cell (large fills the cell, small the centered 4×4 box).
pub fn render_scene(scene: &SceneSpec) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, [1.0; 3]);
    for o in &scene.objects {
        let (side, offset) = match o.size {
            Size::Large => (CELL, 0),
            Size::Small => (CELL / 2, CELL / 4),
        };
        let (y0, x0) = (o.row * CELL + offset, o.col * CELL + offset);
        for i in 0..side {
            for j in 0..side {
                if covers(o.shape, side, i, j) {
                    img.set_pixel(y0 + i, x0 + j, o.color.rgb());
                }
            }
        }
    }
    img
}
