//! Question programs, their surface templates and the template parser.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::QASample;
use super::oracle::{answer_oracle, matching};
use super::{AttrKind, Color, Material, ObjectSpec, Scene, Shape, Size, MAX_OBJECTS};
use crate::error::{Error, Result};

/// Upper bound on the token length of any question the grammar produces.
pub const MAX_QUESTION_TOKENS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Exist,
    Count,
    CompareInteger,
    QueryAttribute,
    CompareAttribute,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Exist,
        Category::Count,
        Category::CompareInteger,
        Category::QueryAttribute,
        Category::CompareAttribute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Exist => "exist",
            Category::Count => "count",
            Category::CompareInteger => "compare_integer",
            Category::QueryAttribute => "query_attribute",
            Category::CompareAttribute => "compare_attribute",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Category::ALL.iter().copied().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::InFrontOf, Relation::Behind];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::InFrontOf => &["in", "front", "of"],
            Relation::Behind => &["behind"],
        }
    }

    /// Grid semantics: columns grow to the right, rows grow toward the viewer.
    pub fn holds(self, subject: &ObjectSpec, anchor: &ObjectSpec) -> bool {
        match self {
            Relation::LeftOf => subject.col < anchor.col,
            Relation::RightOf => subject.col > anchor.col,
            Relation::InFrontOf => subject.row > anchor.row,
            Relation::Behind => subject.row < anchor.row,
        }
    }
}

/// Attribute constraints plus an optional spatial hop relative to a
/// uniquely described anchor object.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Filter {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub material: Option<Material>,
    pub shape: Option<Shape>,
    pub relation: Option<(Relation, Box<Filter>)>,
}

impl Filter {
    pub fn matches_attributes(&self, o: &ObjectSpec) -> bool {
        self.size.is_none_or(|s| s == o.size)
            && self.color.is_none_or(|c| c == o.color)
            && self.material.is_none_or(|m| m == o.material)
            && self.shape.is_none_or(|s| s == o.shape)
    }

    pub fn mentions(&self, attr: AttrKind) -> bool {
        match attr {
            AttrKind::Size => self.size.is_some(),
            AttrKind::Shape => self.shape.is_some(),
            AttrKind::Material => self.material.is_some(),
            AttrKind::Color => self.color.is_some(),
        }
    }

    /// Filter using the attributes of `o` selected by the low four bits of
    /// `mask` (size, color, material, shape).
    fn from_mask(o: &ObjectSpec, mask: u8) -> Self {
        Filter {
            size: (mask & 1 != 0).then_some(o.size),
            color: (mask & 2 != 0).then_some(o.color),
            material: (mask & 4 != 0).then_some(o.material),
            shape: (mask & 8 != 0).then_some(o.shape),
            relation: None,
        }
    }

    fn noun_phrase(&self, plural: bool, out: &mut Vec<String>) {
        if let Some(s) = self.size {
            out.push(s.word().into());
        }
        if let Some(c) = self.color {
            out.push(c.word().into());
        }
        if let Some(m) = self.material {
            out.push(m.word().into());
        }
        out.push(
            match (self.shape, plural) {
                (Some(s), false) => s.word(),
                (Some(s), true) => s.plural(),
                (None, false) => "object",
                (None, true) => "objects",
            }
            .into(),
        );
        if let Some((rel, anchor)) = &self.relation {
            out.extend(rel.words().iter().map(|w| w.to_string()));
            out.push("the".into());
            anchor.noun_phrase(false, out);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompareOp {
    More,
    Fewer,
    Same,
}

/// Parsed question semantics.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Program {
    Exist(Filter),
    Count(Filter),
    CompareInteger { op: CompareOp, left: Filter, right: Filter },
    QueryAttribute { attr: AttrKind, referent: Filter },
    CompareAttribute { attr: AttrKind, left: Filter, right: Filter },
}

impl Program {
    pub fn category(&self) -> Category {
        match self {
            Program::Exist(_) => Category::Exist,
            Program::Count(_) => Category::Count,
            Program::CompareInteger { .. } => Category::CompareInteger,
            Program::QueryAttribute { .. } => Category::QueryAttribute,
            Program::CompareAttribute { .. } => Category::CompareAttribute,
        }
    }

    /// Filters that must denote a single object.
    pub fn referents(&self) -> Vec<&Filter> {
        match self {
            Program::QueryAttribute { referent, .. } => vec![referent],
            Program::CompareAttribute { left, right, .. } => vec![left, right],
            _ => Vec::new(),
        }
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(str::to_string)
}

/// Surface form of `program`; `form` selects among the category's
/// templates (taken modulo their number).
pub fn realize(program: &Program, form: usize) -> Vec<String> {
    let mut out = Vec::new();
    match program {
        Program::Exist(f) => {
            if form.is_multiple_of(2) {
                out.extend(words("is there a"));
                f.noun_phrase(false, &mut out);
            } else {
                out.extend(words("are there any"));
                f.noun_phrase(true, &mut out);
            }
        }
        Program::Count(f) => {
            out.extend(words(if form.is_multiple_of(2) { "how many" } else { "what number of" }));
            f.noun_phrase(true, &mut out);
            out.extend(words("are there"));
        }
        Program::CompareInteger { op, left, right } => match op {
            CompareOp::More | CompareOp::Fewer => {
                out.extend(words(if *op == CompareOp::More { "are there more" } else { "are there fewer" }));
                left.noun_phrase(true, &mut out);
                out.push("than".into());
                right.noun_phrase(true, &mut out);
            }
            CompareOp::Same => {
                out.extend(words("are there the same number of"));
                left.noun_phrase(true, &mut out);
                out.push("and".into());
                right.noun_phrase(true, &mut out);
            }
        },
        Program::QueryAttribute { attr, referent } => {
            if form.is_multiple_of(2) {
                out.push("what".into());
                out.push(attr.word().into());
                out.extend(words("is the"));
            } else {
                out.extend(words("what is the"));
                out.push(attr.word().into());
                out.extend(words("of the"));
            }
            referent.noun_phrase(false, &mut out);
        }
        Program::CompareAttribute { attr, left, right } => {
            if form.is_multiple_of(2) {
                out.extend(words("does the"));
                left.noun_phrase(false, &mut out);
                out.extend(words("have the same"));
            } else {
                out.extend(words("is the"));
                left.noun_phrase(false, &mut out);
                out.extend(words("the same"));
            }
            out.push(attr.word().into());
            out.extend(words("as the"));
            right.noun_phrase(false, &mut out);
        }
    }
    out
}

struct Parser<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn peek_at(&self, ahead: usize) -> Option<&'a str> {
        self.tokens.get(self.pos + ahead).map(String::as_str)
    }

    fn error(&self, what: &str) -> Error {
        Error::format(
            "question",
            format!("{what} at token {} of {:?}", self.pos, self.tokens.join(" ")),
        )
    }

    fn expect(&mut self, phrase: &str) -> Result<()> {
        for w in phrase.split_whitespace() {
            if self.peek() != Some(w) {
                return Err(self.error(&format!("expected {w:?}")));
            }
            self.pos += 1;
        }
        Ok(())
    }

    fn accept(&mut self, phrase: &str) -> bool {
        let ws: Vec<&str> = phrase.split_whitespace().collect();
        if ws.iter().enumerate().all(|(i, w)| self.peek_at(i) == Some(*w)) {
            self.pos += ws.len();
            true
        } else {
            false
        }
    }

    fn attr(&mut self) -> Result<AttrKind> {
        let a = self.peek().and_then(AttrKind::from_word).ok_or_else(|| self.error("expected attribute"))?;
        self.pos += 1;
        Ok(a)
    }

    fn noun_phrase(&mut self) -> Result<Filter> {
        let mut f = Filter::default();
        if let Some(s) = self.peek().and_then(Size::from_word) {
            f.size = Some(s);
            self.pos += 1;
        }
        if let Some(c) = self.peek().and_then(Color::from_word) {
            f.color = Some(c);
            self.pos += 1;
        }
        if let Some(m) = self.peek().and_then(Material::from_word) {
            f.material = Some(m);
            self.pos += 1;
        }
        let noun = self.peek().ok_or_else(|| self.error("expected noun"))?;
        f.shape = match noun {
            "object" | "objects" => None,
            w => Some(
                Shape::from_word(w)
                    .or_else(|| Shape::from_plural(w))
                    .ok_or_else(|| self.error("expected noun"))?,
            ),
        };
        self.pos += 1;
        for rel in Relation::ALL {
            let phrase = rel.words().join(" ");
            let save = self.pos;
            if self.accept(&phrase) {
                if self.accept("the") {
                    f.relation = Some((rel, Box::new(self.noun_phrase()?)));
                    break;
                }
                self.pos = save;
            }
        }
        Ok(f)
    }

    fn finish(&self, program: Program) -> Result<Program> {
        if self.pos != self.tokens.len() {
            return Err(self.error("trailing tokens"));
        }
        Ok(program)
    }
}

/// Parses a question produced by [`realize`].
pub fn parse_question<S: AsRef<str>>(tokens: &[S]) -> Result<Program> {
    let owned: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let mut p = Parser { tokens: &owned, pos: 0 };
    let program = if p.accept("is there a") || p.accept("are there any") {
        Program::Exist(p.noun_phrase()?)
    } else if p.accept("how many") || p.accept("what number of") {
        let f = p.noun_phrase()?;
        p.expect("are there")?;
        Program::Count(f)
    } else if p.accept("are there more") || p.accept("are there fewer") {
        let op = if owned[2] == "more" { CompareOp::More } else { CompareOp::Fewer };
        let left = p.noun_phrase()?;
        p.expect("than")?;
        let right = p.noun_phrase()?;
        Program::CompareInteger { op, left, right }
    } else if p.accept("are there the same number of") {
        let left = p.noun_phrase()?;
        p.expect("and")?;
        let right = p.noun_phrase()?;
        Program::CompareInteger {
            op: CompareOp::Same,
            left,
            right,
        }
    } else if p.accept("what is the") {
        let attr = p.attr()?;
        p.expect("of the")?;
        Program::QueryAttribute {
            attr,
            referent: p.noun_phrase()?,
        }
    } else if p.accept("what") {
        let attr = p.attr()?;
        p.expect("is the")?;
        Program::QueryAttribute {
            attr,
            referent: p.noun_phrase()?,
        }
    } else if p.accept("does the") {
        let left = p.noun_phrase()?;
        p.expect("have the same")?;
        let attr = p.attr()?;
        p.expect("as the")?;
        Program::CompareAttribute {
            attr,
            left,
            right: p.noun_phrase()?,
        }
    } else if p.accept("is the") {
        let left = p.noun_phrase()?;
        p.expect("the same")?;
        let attr = p.attr()?;
        p.expect("as the")?;
        Program::CompareAttribute {
            attr,
            left,
            right: p.noun_phrase()?,
        }
    } else {
        return Err(p.error("unknown template"));
    };
    p.finish(program)
}

/// Every word the grammar can emit, sorted.
pub fn question_words() -> Vec<String> {
    let mut all: Vec<String> = "is there a are any how many what number of more fewer than the same and does have as object objects"
        .split_whitespace()
        .map(str::to_string)
        .collect();
    for rel in Relation::ALL {
        all.extend(rel.words().iter().map(|w| w.to_string()));
    }
    all.extend(AttrKind::ALL.iter().map(|a| a.word().to_string()));
    all.extend(Size::ALL.iter().map(|x| x.word().to_string()));
    all.extend(Color::ALL.iter().map(|x| x.word().to_string()));
    all.extend(Material::ALL.iter().map(|x| x.word().to_string()));
    for s in Shape::ALL {
        all.push(s.word().into());
        all.push(s.plural().into());
    }
    all.sort();
    all.dedup();
    all
}

/// The closed answer set, in classifier order.
pub fn answer_words() -> Vec<String> {
    let mut out = vec!["yes".to_string(), "no".to_string()];
    out.extend((0..=MAX_OBJECTS).map(|n| n.to_string()));
    out.extend(Size::ALL.iter().map(|x| x.word().to_string()));
    out.extend(Shape::ALL.iter().map(|x| x.word().to_string()));
    out.extend(Material::ALL.iter().map(|x| x.word().to_string()));
    out.extend(Color::ALL.iter().map(|x| x.word().to_string()));
    out
}

/// Knobs for question sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionOptions {
    /// Allow one spatial hop in filters and referring expressions.
    pub relations: bool,
}

#[allow(clippy::derivable_impls)]
impl Default for QuestionOptions {
    fn default() -> Self {
        // Feature grids carry no coordinates, so relational questions are
        // opt-in.
        Self { relations: false }
    }
}

fn count(scene: &Scene, f: &Filter) -> Option<usize> {
    matching(scene, f).ok().map(|m| m.len())
}

/// Random unique description of `scene.objects[target]` that does not
/// mention `exclude`.
fn describe_unique<R: Rng>(
    scene: &Scene,
    target: usize,
    exclude: Option<AttrKind>,
    relations: bool,
    rng: &mut R,
) -> Option<Filter> {
    let obj = &scene.objects[target];
    let allowed = |mask: u8| match exclude {
        Some(AttrKind::Size) => mask & 1 == 0,
        Some(AttrKind::Color) => mask & 2 == 0,
        Some(AttrKind::Material) => mask & 4 == 0,
        Some(AttrKind::Shape) => mask & 8 == 0,
        None => true,
    };
    let unique = |f: &Filter| {
        matching(scene, f)
            .map(|m| m.len() == 1 && m[0] == target)
            .unwrap_or(false)
    };
    let candidates: Vec<Filter> = (0u8..16)
        .filter(|&m| allowed(m))
        .map(|m| Filter::from_mask(obj, m))
        .filter(|f| unique(f))
        .collect();
    if let Some(f) = candidates.choose(rng) {
        return Some(f.clone());
    }
    if !relations {
        return None;
    }
    let mut anchors: Vec<usize> = (0..scene.objects.len()).filter(|&i| i != target).collect();
    anchors.shuffle(rng);
    for anchor in anchors {
        let Some(anchor_desc) = describe_unique(scene, anchor, None, false, rng) else {
            continue;
        };
        let mut rels = Relation::ALL;
        rels.shuffle(rng);
        for rel in rels {
            let hopped: Vec<Filter> = (0u8..16)
                .filter(|&m| allowed(m))
                .map(|m| Filter {
                    relation: Some((rel, Box::new(anchor_desc.clone()))),
                    ..Filter::from_mask(obj, m)
                })
                .filter(|f| unique(f))
                .collect();
            if let Some(f) = hopped.choose(rng) {
                return Some(f.clone());
            }
        }
    }
    None
}

fn random_filter<R: Rng>(rng: &mut R, p: f64) -> Filter {
    Filter {
        size: rng.gen_bool(p).then(|| *Size::ALL.choose(rng).unwrap()),
        color: rng.gen_bool(p).then(|| *Color::ALL.choose(rng).unwrap()),
        material: rng.gen_bool(p).then(|| *Material::ALL.choose(rng).unwrap()),
        shape: rng.gen_bool(p).then(|| *Shape::ALL.choose(rng).unwrap()),
        relation: None,
    }
}

/// Either a sub-description of a random scene object or a random filter.
fn counting_filter<R: Rng>(scene: &Scene, opts: &QuestionOptions, rng: &mut R) -> Filter {
    let mut f = if !scene.objects.is_empty() && rng.gen_bool(0.5) {
        let o = scene.objects.choose(rng).unwrap();
        Filter::from_mask(o, rng.gen_range(0..16))
    } else {
        random_filter(rng, 0.5)
    };
    maybe_hop(scene, opts, rng, &mut f);
    f
}

fn maybe_hop<R: Rng>(scene: &Scene, opts: &QuestionOptions, rng: &mut R, f: &mut Filter) {
    if opts.relations && scene.objects.len() > 1 && rng.gen_bool(0.25) {
        let anchor = rng.gen_range(0..scene.objects.len());
        if let Some(desc) = describe_unique(scene, anchor, None, false, rng) {
            f.relation = Some((*Relation::ALL.choose(rng).unwrap(), Box::new(desc)));
        }
    }
}

fn sample_program<R: Rng>(scene: &Scene, category: Category, opts: &QuestionOptions, rng: &mut R) -> Result<Program> {
    let n = scene.objects.len();
    let no_referent = || Error::Generation(format!("no unambiguous referent for {category} in {}", scene.id));
    match category {
        Category::Exist => {
            let want_yes = rng.gen_bool(0.5);
            if want_yes && n > 0 {
                let o = scene.objects.choose(rng).unwrap();
                let mut f = Filter::from_mask(o, rng.gen_range(1..16));
                maybe_hop(scene, opts, rng, &mut f);
                return Ok(Program::Exist(f));
            }
            for _ in 0..64 {
                let f = random_filter(rng, 0.6);
                if count(scene, &f) == Some(0) {
                    return Ok(Program::Exist(f));
                }
            }
            Ok(Program::Exist(random_filter(rng, 0.6)))
        }
        Category::Count => Ok(Program::Count(counting_filter(scene, opts, rng))),
        Category::CompareInteger => {
            let op = *[CompareOp::More, CompareOp::Fewer, CompareOp::Same].choose(rng).unwrap();
            let left = counting_filter(scene, opts, rng);
            let mut right = counting_filter(scene, opts, rng);
            for _ in 0..16 {
                if right != left {
                    break;
                }
                right = counting_filter(scene, opts, rng);
            }
            if right == left {
                return Err(Error::Generation("could not draw two distinct filters".into()));
            }
            Ok(Program::CompareInteger { op, left, right })
        }
        Category::QueryAttribute => {
            if n == 0 {
                return Err(no_referent());
            }
            let mut pairs: Vec<(usize, AttrKind)> =
                (0..n).flat_map(|i| AttrKind::ALL.iter().map(move |&a| (i, a))).collect();
            pairs.shuffle(rng);
            for (target, attr) in pairs {
                if let Some(referent) = describe_unique(scene, target, Some(attr), opts.relations, rng) {
                    return Ok(Program::QueryAttribute { attr, referent });
                }
            }
            Err(no_referent())
        }
        Category::CompareAttribute => {
            if n < 2 {
                return Err(no_referent());
            }
            for _ in 0..32 {
                let picks: Vec<usize> = rand::seq::index::sample(rng, n, 2).into_vec();
                let attr = *AttrKind::ALL.choose(rng).unwrap();
                let left = describe_unique(scene, picks[0], Some(attr), opts.relations, rng);
                let right = describe_unique(scene, picks[1], Some(attr), opts.relations, rng);
                if let (Some(left), Some(right)) = (left, right) {
                    return Ok(Program::CompareAttribute { attr, left, right });
                }
            }
            Err(no_referent())
        }
    }
}

/// Samples one question of `category` about `scene`. The returned sample's
/// `id` is left for the caller to assign.
pub fn generate_question(scene: &Scene, category: Category, seed: u64, opts: &QuestionOptions) -> Result<QASample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let program = sample_program(scene, category, opts, &mut rng)?;
    let tokens = realize(&program, rng.gen_range(0..2));
    if tokens.len() > MAX_QUESTION_TOKENS {
        return Err(Error::Generation(format!("question of {} tokens", tokens.len())));
    }
    let answer = answer_oracle(scene, &program)?;
    Ok(QASample {
        id: String::new(),
        scene_id: scene.id.clone(),
        category,
        tokens,
        answer,
    })
}
