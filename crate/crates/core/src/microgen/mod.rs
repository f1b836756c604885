//! Deterministic generator of grid-world scenes with compositional
//! questions, under color/shape constraint regimes.
//!
//! Objects carry a size, shape, material and color and occupy one cell of
//! an `H×W` grid. Condition A restricts cube and cylinder colors, condition
//! B swaps the two palettes, and spheres are never constrained.

mod dataset;
mod oracle;
mod question;

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    build_dataset, child_seed, split_shards, CategoryMix, Corpus, CorpusHeader, DatasetConfig, QASample, QUESTIONS_FILE, SCENES_FILE,
    QUESTIONS_FORMAT, SCENES_FORMAT,
};
pub use oracle::{answer_oracle, matching};
pub use question::{
    answer_words, generate_question, parse_question, question_words, realize, Category, CompareOp, Filter,
    Program, QuestionOptions, Relation, MAX_QUESTION_TOKENS,
};

/// Largest object count a scene may hold; also the largest count answer.
pub const MAX_OBJECTS: usize = 10;

/// Feature channels per grid cell: size, shape, material, color one-hots
/// followed by an occupancy bit.
pub const FEATURE_WIDTH: usize = 2 + 3 + 2 + 8 + 1;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

attribute!(Size { Large => "large", Small => "small" });
attribute!(Shape { Cube => "cube", Cylinder => "cylinder", Sphere => "sphere" });
attribute!(Material { Rubber => "rubber", Metal => "metal" });
attribute!(Color {
    Gray => "gray",
    Blue => "blue",
    Brown => "brown",
    Yellow => "yellow",
    Red => "red",
    Green => "green",
    Purple => "purple",
    Cyan => "cyan",
});

impl Shape {
    pub fn plural(self) -> &'static str {
        match self {
            Shape::Cube => "cubes",
            Shape::Cylinder => "cylinders",
            Shape::Sphere => "spheres",
        }
    }

    pub fn from_plural(word: &str) -> Option<Self> {
        Shape::ALL.iter().copied().find(|s| s.plural() == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Size,
    Shape,
    Material,
    Color,
}

impl AttrKind {
    pub const ALL: [AttrKind; 4] = [AttrKind::Size, AttrKind::Shape, AttrKind::Material, AttrKind::Color];

    pub fn word(self) -> &'static str {
        match self {
            AttrKind::Size => "size",
            AttrKind::Shape => "shape",
            AttrKind::Material => "material",
            AttrKind::Color => "color",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        AttrKind::ALL.iter().copied().find(|a| a.word() == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub size: Size,
    pub shape: Shape,
    pub material: Material,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

impl ObjectSpec {
    pub fn attribute_word(&self, attr: AttrKind) -> &'static str {
        match attr {
            AttrKind::Size => self.size.word(),
            AttrKind::Shape => self.shape.word(),
            AttrKind::Material => self.material.word(),
            AttrKind::Color => self.color.word(),
        }
    }
}

/// Named constraint regime: the colors each shape may take.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    /// Indexed by [`Shape::index`].
    pub allowed: [Vec<Color>; 3],
}

const PALETTE_A: [Color; 4] = [Color::Gray, Color::Blue, Color::Brown, Color::Yellow];
const PALETTE_B: [Color; 4] = [Color::Red, Color::Green, Color::Purple, Color::Cyan];

impl ConditionSpec {
    pub const CLEVR: &'static str = "clevr";
    pub const COGENT_A: &'static str = "cogent-a";
    pub const COGENT_B: &'static str = "cogent-b";

    pub fn clevr() -> Self {
        Self {
            name: Self::CLEVR.into(),
            allowed: [Color::ALL.to_vec(), Color::ALL.to_vec(), Color::ALL.to_vec()],
        }
    }

    pub fn cogent_a() -> Self {
        Self {
            name: Self::COGENT_A.into(),
            allowed: [PALETTE_A.to_vec(), PALETTE_B.to_vec(), Color::ALL.to_vec()],
        }
    }

    pub fn cogent_b() -> Self {
        Self {
            name: Self::COGENT_B.into(),
            allowed: [PALETTE_B.to_vec(), PALETTE_A.to_vec(), Color::ALL.to_vec()],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "clevr" | "clevr-like" => Ok(Self::clevr()),
            "cogent-a" | "a" => Ok(Self::cogent_a()),
            "cogent-b" | "b" => Ok(Self::cogent_b()),
            other => Err(Error::contract(format!("unknown condition {other:?}"))),
        }
    }

    pub fn permits(&self, shape: Shape, color: Color) -> bool {
        self.allowed[shape.index()].contains(&color)
    }

    /// Objects that break this condition's constraints.
    pub fn violations<'a>(&self, scene: &'a Scene) -> Vec<&'a ObjectSpec> {
        scene.objects.iter().filter(|o| !self.permits(o.shape, o.color)).collect()
    }
}

/// A color/shape pair that condition A never shows.
pub fn is_b_only(shape: Shape, color: Color) -> bool {
    !ConditionSpec::cogent_a().permits(shape, color)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            h: 6,
            w: 6,
            min_objects: 2,
            max_objects: 6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Generation("grid must be non-empty".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Generation(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.h * self.w || self.max_objects > MAX_OBJECTS {
            return Err(Error::Generation(format!(
                "max_objects {} exceeds grid {}x{} or limit {MAX_OBJECTS}",
                self.max_objects, self.h, self.w
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub objects: Vec<ObjectSpec>,
    pub condition: String,
}

pub fn generate_scene(cond: &ConditionSpec, config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    if let Some(shape) = Shape::ALL.iter().find(|s| cond.allowed[s.index()].is_empty()) {
        return Err(Error::Generation(format!(
            "condition {} allows no color for {shape}",
            cond.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let cells = sample_indices(&mut rng, config.h * config.w, n);
    let objects = cells
        .iter()
        .map(|cell| {
            let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            let palette = &cond.allowed[shape.index()];
            ObjectSpec {
                size: Size::ALL[rng.gen_range(0..Size::ALL.len())],
                shape,
                material: Material::ALL[rng.gen_range(0..Material::ALL.len())],
                color: palette[rng.gen_range(0..palette.len())],
                row: cell / config.w,
                col: cell % config.w,
            }
        })
        .collect();
    Ok(Scene {
        id: format!("scene-{seed:016x}"),
        seed,
        h: config.h,
        w: config.w,
        condition: cond.name.clone(),
        objects,
    })
}

/// `[H×W×FEATURE_WIDTH]` symbolic rendering of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

const SIZE_OFF: usize = 0;
const SHAPE_OFF: usize = 2;
const MATERIAL_OFF: usize = 5;
const COLOR_OFF: usize = 7;
const OCCUPIED: usize = 15;

pub fn render_feature_grid(scene: &Scene) -> FeatureGrid {
    let mut data = vec![0.0; scene.h * scene.w * FEATURE_WIDTH];
    for o in &scene.objects {
        let base = (o.row * scene.w + o.col) * FEATURE_WIDTH;
        data[base + SIZE_OFF + o.size.index()] = 1.0;
        data[base + SHAPE_OFF + o.shape.index()] = 1.0;
        data[base + MATERIAL_OFF + o.material.index()] = 1.0;
        data[base + COLOR_OFF + o.color.index()] = 1.0;
        data[base + OCCUPIED] = 1.0;
    }
    FeatureGrid {
        h: scene.h,
        w: scene.w,
        data,
    }
}

/// Inverse of [`render_feature_grid`], in row-major cell order.
pub fn decode_feature_grid(grid: &FeatureGrid) -> Result<Vec<ObjectSpec>> {
    fn one_hot(cell: &[f64], what: &'static str) -> Result<usize> {
        let hot: Vec<usize> = cell.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        if hot.len() != 1 || cell.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format("feature grid", format!("{what} is not one-hot: {cell:?}")));
        }
        Ok(hot[0])
    }
    let mut objects = Vec::new();
    for (cell_idx, cell) in grid.data.chunks(FEATURE_WIDTH).enumerate() {
        match cell[OCCUPIED] {
            0.0 => {
                if cell.iter().any(|&v| v != 0.0) {
                    return Err(Error::format("feature grid", format!("unoccupied cell {cell_idx} has features")));
                }
            }
            1.0 => objects.push(ObjectSpec {
                size: Size::ALL[one_hot(&cell[SIZE_OFF..SHAPE_OFF], "size")?],
                shape: Shape::ALL[one_hot(&cell[SHAPE_OFF..MATERIAL_OFF], "shape")?],
                material: Material::ALL[one_hot(&cell[MATERIAL_OFF..COLOR_OFF], "material")?],
                color: Color::ALL[one_hot(&cell[COLOR_OFF..OCCUPIED], "color")?],
                row: cell_idx / grid.w,
                col: cell_idx % grid.w,
            }),
            v => return Err(Error::format("feature grid", format!("occupancy {v} in cell {cell_idx}"))),
        }
    }
    Ok(objects)
}
