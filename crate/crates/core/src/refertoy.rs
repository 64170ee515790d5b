//! ReferToy: synthetic scenes of colored shapes with templated referring
//! expressions.
//!
//! Feature maps hold, for every 16x16 cell, the fraction of the cell covered
//! by objects with a given attribute. Channels: 4 colors, 3 shapes, 1
//! occupancy and 8 zero padding channels.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::GroundingTask;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ImageSize};
use crate::observation::{FeatureMap, MemoryProvider, FEATURE_STRIDE};

pub const TOY_CHANNELS: usize = 16;
pub const OCCUPANCY_CHANNEL: usize = 7;
pub const QUERY_DIM: usize = 32;
/// Offset of the relation-and-anchor block in the query vector.
const SECOND_BLOCK: usize = 16;
/// Vertices used to approximate a circle.
const CIRCLE_SEGMENTS: usize = 32;

const FILLER: [&str; 8] = ["the", "a", "an", "of", "to", "that", "is", "one"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    /// Surface words, filler included.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Strict separation: `a` lies entirely on the named side of `b`.
    pub fn holds(self, a: &BoundingBox, b: &BoundingBox) -> bool {
        match self {
            Relation::LeftOf => a.x1() <= b.x0(),
            Relation::RightOf => a.x0() >= b.x1(),
            Relation::Above => a.y1() <= b.y0(),
            Relation::Below => a.y0() >= b.y1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BoundingBox,
}

impl ToyObject {
    /// Outline as a convex polygon in pixel coordinates.
    pub fn polygon(&self) -> Vec<(f64, f64)> {
        let b = &self.bbox;
        match self.shape {
            Shape::Square => vec![(b.x0(), b.y0()), (b.x1(), b.y0()), (b.x1(), b.y1()), (b.x0(), b.y1())],
            Shape::Triangle => vec![(b.x0(), b.y1()), (b.x1(), b.y1()), ((b.x0() + b.x1()) / 2.0, b.y0())],
            Shape::Circle => {
                let (cx, cy) = b.center();
                let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
                (0..CIRCLE_SEGMENTS)
                    .map(|k| {
                        let t = std::f64::consts::TAU * k as f64 / CIRCLE_SEGMENTS as f64;
                        (cx + rx * t.cos(), cy + ry * t.sin())
                    })
                    .collect()
            }
        }
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.polygon())
    }
}

/// Parsed form of the two expression templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Expression {
    pub color: Color,
    pub shape: Shape,
    pub relation: Option<(Relation, Color, Shape)>,
}

impl Expression {
    pub fn tokens(&self) -> Vec<String> {
        let mut t = vec![self.color.name().to_string(), self.shape.name().to_string()];
        if let Some((r, c, s)) = self.relation {
            t.extend(r.words().iter().map(|w| w.to_string()));
            t.push(c.name().to_string());
            t.push(s.name().to_string());
        }
        t
    }

    fn matches_head(&self, o: &ToyObject) -> bool {
        o.color == self.color && o.shape == self.shape
    }

    /// Indices of every object the expression can refer to.
    pub fn referents(&self, objects: &[ToyObject]) -> Vec<usize> {
        (0..objects.len())
            .filter(|&i| {
                let o = &objects[i];
                if !self.matches_head(o) {
                    return false;
                }
                match self.relation {
                    None => true,
                    Some((r, c, s)) => objects
                        .iter()
                        .enumerate()
                        .any(|(j, b)| j != i && b.color == c && b.shape == s && r.holds(&o.bbox, &b.bbox)),
                }
            })
            .collect()
    }
}

/// Lowercases, strips non-alphanumeric characters and drops empty tokens.
pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .flat_map(|t| t.as_ref().split_whitespace())
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

enum Word {
    Color(Color),
    Shape(Shape),
    Relation(Relation),
}

fn lookup(word: &str) -> Option<Word> {
    if let Some(c) = Color::ALL.iter().find(|c| c.name() == word) {
        return Some(Word::Color(*c));
    }
    if let Some(s) = Shape::ALL.iter().find(|s| s.name() == word) {
        return Some(Word::Shape(*s));
    }
    match word {
        "left" => Some(Word::Relation(Relation::LeftOf)),
        "right" => Some(Word::Relation(Relation::RightOf)),
        "above" => Some(Word::Relation(Relation::Above)),
        "below" => Some(Word::Relation(Relation::Below)),
        _ => None,
    }
}

/// Content words of a token list; filler is dropped, unknown words rejected.
fn content_words<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<(String, Word)>> {
    let mut out = Vec::new();
    for t in normalize_tokens(tokens) {
        if FILLER.contains(&t.as_str()) {
            continue;
        }
        match lookup(&t) {
            Some(w) => out.push((t, w)),
            None => return Err(Error::UnknownToken(t)),
        }
    }
    Ok(out)
}

pub fn parse_expression<S: AsRef<str>>(tokens: &[S]) -> Result<Expression> {
    let words = content_words(tokens)?;
    let joined = || words.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(" ");
    match words.as_slice() {
        [(_, Word::Color(c)), (_, Word::Shape(s))] => Ok(Expression {
            color: *c,
            shape: *s,
            relation: None,
        }),
        [(_, Word::Color(c)), (_, Word::Shape(s)), (_, Word::Relation(r)), (_, Word::Color(c2)), (_, Word::Shape(s2))] => {
            Ok(Expression {
                color: *c,
                shape: *s,
                relation: Some((*r, *c2, *s2)),
            })
        }
        _ => Err(Error::MalformedExpression(joined())),
    }
}

/// Bag-of-slots query vector: attributes before the relation word go in the
/// first block, the relation and everything after it in the second.
pub fn encode_query<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<f64>> {
    let mut v = vec![0.0; QUERY_DIM];
    let mut base = 0;
    for (_, w) in content_words(tokens)? {
        match w {
            Word::Color(c) => v[base + c.index()] = 1.0,
            Word::Shape(s) => v[base + 4 + s.index()] = 1.0,
            Word::Relation(r) => {
                base = SECOND_BLOCK;
                v[base + r.index()] = 1.0;
                base += 4;
            }
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// One object, attribute query.
    Easy,
    /// Distractors, attribute query.
    Medium,
    /// Distractors including a same-attribute twin, relation query.
    Hard,
}

/// Generator settings. When deserialized, omitted fields take the defaults
/// of the chosen difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ToySpecFields")]
pub struct ToySpec {
    pub seed: u64,
    pub scenes: usize,
    pub difficulty: Difficulty,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Object side range in pixels.
    pub min_side: u32,
    pub max_side: u32,
    /// Rejection-sampling budget per scene.
    pub max_attempts: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToySpecFields {
    seed: u64,
    scenes: usize,
    difficulty: Difficulty,
    min_objects: Option<usize>,
    max_objects: Option<usize>,
    image_width: Option<u32>,
    image_height: Option<u32>,
    min_side: Option<u32>,
    max_side: Option<u32>,
    max_attempts: Option<usize>,
}

impl From<ToySpecFields> for ToySpec {
    fn from(f: ToySpecFields) -> Self {
        let d = ToySpec::new(f.difficulty, f.seed, f.scenes);
        Self {
            min_objects: f.min_objects.unwrap_or(d.min_objects),
            max_objects: f.max_objects.unwrap_or(d.max_objects),
            image_width: f.image_width.unwrap_or(d.image_width),
            image_height: f.image_height.unwrap_or(d.image_height),
            min_side: f.min_side.unwrap_or(d.min_side),
            max_side: f.max_side.unwrap_or(d.max_side),
            max_attempts: f.max_attempts.unwrap_or(d.max_attempts),
            ..d
        }
    }
}

impl ToySpec {
    pub fn new(difficulty: Difficulty, seed: u64, scenes: usize) -> Self {
        let (min_objects, max_objects, min_side, max_side) = match difficulty {
            Difficulty::Easy => (1, 1, 48, 112),
            Difficulty::Medium => (2, 4, 40, 80),
            Difficulty::Hard => (3, 4, 40, 72),
        };
        Self {
            seed,
            scenes,
            difficulty,
            min_objects,
            max_objects,
            image_width: 192,
            image_height: 192,
            min_side,
            max_side,
            max_attempts: 2000,
        }
    }

    pub fn image_size(&self) -> Result<ImageSize> {
        ImageSize::new(self.image_width, self.image_height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        self.image_size()?;
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 5 {
            return bad(format!(
                "object count range {}..={} must lie within 1..=5",
                self.min_objects, self.max_objects
            ));
        }
        match self.difficulty {
            Difficulty::Easy if self.max_objects != 1 => return bad("easy scenes hold exactly one object".into()),
            Difficulty::Hard if self.min_objects < 3 => {
                return bad("hard scenes need a target, its twin and an anchor".into())
            }
            _ => {}
        }
        if self.min_side < 8 || self.min_side > self.max_side {
            return bad(format!("side range {}..={} is invalid", self.min_side, self.max_side));
        }
        if self.max_side > self.image_width.min(self.image_height) {
            return bad("objects cannot be larger than the image".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferToyScene {
    pub task_id: String,
    pub image_size: ImageSize,
    pub objects: Vec<ToyObject>,
    pub target_index: usize,
    pub expression: Vec<String>,
}

impl ReferToyScene {
    pub fn target(&self) -> &ToyObject {
        &self.objects[self.target_index]
    }

    pub fn task(&self) -> GroundingTask {
        GroundingTask {
            task_id: self.task_id.clone(),
            image_size: self.image_size,
            ground_truth: self.target().bbox,
            query_tokens: self.expression.clone(),
            feature_key: self.task_id.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::TaskLoad {
                task_id: self.task_id.clone(),
                reason,
            })
        };
        if self.objects.is_empty() || self.objects.len() > 5 {
            return fail(format!("{} objects, expected 1 to 5", self.objects.len()));
        }
        if self.target_index >= self.objects.len() {
            return fail(format!("target index {} out of range", self.target_index));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if !a.bbox.is_inside(self.image_size) {
                return fail(format!("object {i} leaves the image"));
            }
            for b in &self.objects[i + 1..] {
                if crate::geometry::iou(&a.bbox, &b.bbox) > 0.1 {
                    return fail("objects overlap".into());
                }
            }
        }
        Ok(())
    }
}

fn random_box(rng: &mut ChaCha8Rng, spec: &ToySpec) -> BoundingBox {
    let w = rng.gen_range(spec.min_side..=spec.max_side);
    let h = rng.gen_range(spec.min_side..=spec.max_side);
    let x0 = rng.gen_range(0..=spec.image_width - w);
    let y0 = rng.gen_range(0..=spec.image_height - h);
    BoundingBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64).expect("sides are positive")
}

/// Places `n` pairwise-disjoint boxes, or gives up.
fn place_boxes(rng: &mut ChaCha8Rng, spec: &ToySpec, n: usize) -> Option<Vec<BoundingBox>> {
    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let placed = (0..100).map(|_| random_box(rng, spec)).find(|b| boxes.iter().all(|o| o.intersection_area(b) == 0.0))?;
        boxes.push(placed);
    }
    Some(boxes)
}

fn random_attrs(rng: &mut ChaCha8Rng) -> (Color, Shape) {
    (*Color::ALL.choose(rng).unwrap(), *Shape::ALL.choose(rng).unwrap())
}

fn try_scene(rng: &mut ChaCha8Rng, spec: &ToySpec) -> Option<(Vec<ToyObject>, usize, Expression)> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let boxes = place_boxes(rng, spec, n)?;
    let mut attrs: Vec<(Color, Shape)> = (0..n).map(|_| random_attrs(rng)).collect();
    let target = rng.gen_range(0..n);
    if spec.difficulty == Difficulty::Hard {
        let twin = (target + 1 + rng.gen_range(0..n - 1)) % n;
        attrs[twin] = attrs[target];
    }
    let objects: Vec<ToyObject> = boxes
        .into_iter()
        .zip(attrs)
        .map(|(bbox, (color, shape))| ToyObject { shape, color, bbox })
        .collect();
    let t = objects[target];
    let head = Expression {
        color: t.color,
        shape: t.shape,
        relation: None,
    };
    let expr = match spec.difficulty {
        Difficulty::Easy | Difficulty::Medium => head,
        Difficulty::Hard => {
            let mut options = Vec::new();
            for (j, anchor) in objects.iter().enumerate() {
                if j == target || (anchor.color, anchor.shape) == (t.color, t.shape) {
                    continue;
                }
                for r in Relation::ALL {
                    let e = Expression {
                        relation: Some((r, anchor.color, anchor.shape)),
                        ..head
                    };
                    if r.holds(&t.bbox, &anchor.bbox) && !options.contains(&e) {
                        options.push(e);
                    }
                }
            }
            options.retain(|e| e.referents(&objects) == [target]);
            *options.choose(rng)?
        }
    };
    (expr.referents(&objects) == [target]).then_some((objects, target, expr))
}

pub fn generate(spec: &ToySpec) -> Result<Vec<ReferToyScene>> {
    spec.validate()?;
    let image_size = spec.image_size()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tag = match spec.difficulty {
        Difficulty::Easy => "easy",
        Difficulty::Medium => "medium",
        Difficulty::Hard => "hard",
    };
    let mut scenes = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let (objects, target_index, expr) = (0..spec.max_attempts)
            .find_map(|_| try_scene(&mut rng, spec))
            .ok_or_else(|| Error::Generation {
                attempts: spec.max_attempts,
                reason: format!("scene {i}: no placement with a unique referent"),
            })?;
        scenes.push(ReferToyScene {
            task_id: format!("{tag}-s{}-{i:05}", spec.seed),
            image_size,
            objects,
            target_index,
            expression: expr.tokens(),
        });
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// rendering

pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    s.abs() / 2.0
}

/// Clips a convex polygon to the half-plane where `inside` holds.
fn clip_half(poly: &[(f64, f64)], inside: impl Fn((f64, f64)) -> f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let (dp, dq) = (inside(p), inside(q));
        if dp >= 0.0 {
            out.push(p);
        }
        if (dp >= 0.0) != (dq >= 0.0) {
            let t = dp / (dp - dq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

/// Area of a convex polygon inside an axis-aligned rectangle.
pub fn clipped_area(poly: &[(f64, f64)], x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let mut p = poly.to_vec();
    p = clip_half(&p, |(x, _)| x - x0);
    p = clip_half(&p, |(x, _)| x1 - x);
    p = clip_half(&p, |(_, y)| y - y0);
    p = clip_half(&p, |(_, y)| y1 - y);
    if p.len() < 3 {
        0.0
    } else {
        polygon_area(&p)
    }
}

pub fn render_feature_map(scene: &ReferToyScene) -> FeatureMap {
    let (gh, gw) = FeatureMap::grid_for(scene.image_size);
    let mut map = FeatureMap::zeros(gh, gw, TOY_CHANNELS);
    let s = FEATURE_STRIDE;
    let cell_area = s * s;
    for obj in &scene.objects {
        let poly = obj.polygon();
        let b = obj.bbox;
        let rows = (b.y0() / s).floor() as usize..((b.y1() / s).ceil() as usize).min(gh);
        let cols = (b.x0() / s).floor() as usize..((b.x1() / s).ceil() as usize).min(gw);
        for r in rows {
            for c in cols.clone() {
                let (cx, cy) = (c as f64 * s, r as f64 * s);
                let frac = clipped_area(&poly, cx, cy, cx + s, cy + s) / cell_area;
                if frac == 0.0 {
                    continue;
                }
                let cell = map.cell_mut(r, c);
                cell[obj.color.index()] += frac;
                cell[4 + obj.shape.index()] += frac;
                cell[OCCUPANCY_CHANNEL] += frac;
            }
        }
    }
    map
}

/// Renders every scene into an in-memory provider keyed by task id.
pub fn scene_provider(scenes: &[ReferToyScene]) -> Result<MemoryProvider> {
    let mut p = MemoryProvider::new();
    for s in scenes {
        p.insert(s.task_id.clone(), render_feature_map(s), encode_query(&s.expression)?);
    }
    Ok(p)
}

pub fn tasks(scenes: &[ReferToyScene]) -> Vec<Arc<GroundingTask>> {
    scenes.iter().map(|s| Arc::new(s.task())).collect()
}

// ---------------------------------------------------------------------------
// dataset records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Color>,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// One line of a dataset file. Records from real datasets leave the object
/// attributes empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub task_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectRecord>,
    pub target_index: usize,
    pub expression: String,
}

impl DatasetRecord {
    pub fn from_scene(scene: &ReferToyScene) -> Self {
        Self {
            task_id: scene.task_id.clone(),
            width: scene.image_size.width,
            height: scene.image_size.height,
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    shape: Some(o.shape),
                    color: Some(o.color),
                    x0: o.bbox.x0(),
                    y0: o.bbox.y0(),
                    x1: o.bbox.x1(),
                    y1: o.bbox.y1(),
                })
                .collect(),
            target_index: scene.target_index,
            expression: scene.expression.join(" "),
        }
    }

    fn boxes(&self) -> Result<Vec<BoundingBox>> {
        self.objects
            .iter()
            .map(|o| BoundingBox::new(o.x0, o.y0, o.x1, o.y1))
            .collect()
    }

    /// Rebuilds the scene; fails when an object lacks its attributes.
    pub fn to_scene(&self) -> Result<ReferToyScene> {
        let boxes = self.boxes()?;
        let objects = self
            .objects
            .iter()
            .zip(boxes)
            .map(|(o, bbox)| match (o.shape, o.color) {
                (Some(shape), Some(color)) => Ok(ToyObject { shape, color, bbox }),
                _ => Err(Error::TaskLoad {
                    task_id: self.task_id.clone(),
                    reason: "object without shape or color".into(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = ReferToyScene {
            task_id: self.task_id.clone(),
            image_size: ImageSize::new(self.width, self.height)?,
            objects,
            target_index: self.target_index,
            expression: self.expression.split_whitespace().map(str::to_string).collect(),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_task(&self) -> Result<GroundingTask> {
        let fail = |reason: String| Error::TaskLoad {
            task_id: self.task_id.clone(),
            reason,
        };
        let boxes = self.boxes().map_err(|e| fail(e.to_string()))?;
        let gt = *boxes
            .get(self.target_index)
            .ok_or_else(|| fail(format!("target index {} out of range", self.target_index)))?;
        let task = GroundingTask {
            task_id: self.task_id.clone(),
            image_size: ImageSize::new(self.width, self.height).map_err(|e| fail(e.to_string()))?,
            ground_truth: gt,
            query_tokens: normalize_tokens(&[&self.expression]),
            feature_key: self.task_id.clone(),
        };
        task.validate()?;
        Ok(task)
    }
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = std::io::BufWriter::new(fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&tmp, e))?;
    }
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
