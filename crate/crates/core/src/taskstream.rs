//! Synthetic four-task driving QA stream over token-grid scenes.
//!
//! Each scene is a small grid of cells, some holding an object described by
//! a class, an attribute and a coarse position relative to the ego vehicle.
//! Every task asks about one target object and answers from a fixed rule
//! table, so any answer can be re-derived from the scene and the question
//! text alone (see [`derive_answer`]).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};

/// Bumped whenever a template or rule below changes.
pub const RULES_VERSION: u32 = 1;
pub const DATASET_HEADER: &str = "#clvqa-dataset v1";
pub const MAX_ANSWER_TOKENS: usize = 12;
pub const MAX_OBJECTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Perception,
    Prediction,
    Planning,
    Behavior,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Perception,
        TaskKind::Prediction,
        TaskKind::Planning,
        TaskKind::Behavior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Perception => "perception",
            TaskKind::Prediction => "prediction",
            TaskKind::Planning => "planning",
            TaskKind::Behavior => "behavior",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    Trailer,
    Sign,
    Signal,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Pedestrian,
        ObjectClass::Trailer,
        ObjectClass::Sign,
        ObjectClass::Signal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Trailer => "trailer",
            ObjectClass::Sign => "sign",
            ObjectClass::Signal => "signal",
        }
    }

    fn is_vehicle(self) -> bool {
        matches!(self, ObjectClass::Car | ObjectClass::Truck | ObjectClass::Trailer)
    }

    /// Attributes an object of this class may carry.
    pub fn attributes(self) -> &'static [Attribute] {
        use Attribute::*;
        match self {
            ObjectClass::Car | ObjectClass::Truck | ObjectClass::Trailer => {
                &[Moving, Parked, Stationary, Braking]
            }
            ObjectClass::Pedestrian => &[Moving, Stationary],
            ObjectClass::Sign | ObjectClass::Signal => &[Stationary],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Moving,
    Parked,
    Stationary,
    Braking,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Moving,
        Attribute::Parked,
        Attribute::Stationary,
        Attribute::Braking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Moving => "moving",
            Attribute::Parked => "parked",
            Attribute::Stationary => "stationary",
            Attribute::Braking => "braking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionTag {
    Front,
    Back,
    Left,
    Right,
}

impl PositionTag {
    pub const ALL: [PositionTag; 4] = [
        PositionTag::Front,
        PositionTag::Back,
        PositionTag::Left,
        PositionTag::Right,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PositionTag::Front => "front",
            PositionTag::Back => "back",
            PositionTag::Left => "left",
            PositionTag::Right => "right",
        }
    }

    /// Edge columns are the sides; inner columns split into front (upper
    /// half of the grid) and back.
    pub fn of_cell(row: usize, col: usize, grid: usize) -> Self {
        if col == 0 {
            PositionTag::Left
        } else if col + 1 == grid {
            PositionTag::Right
        } else if row < grid / 2 {
            PositionTag::Front
        } else {
            PositionTag::Back
        }
    }
}

fn parse_named<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str, s: &str) -> Option<T> {
    all.iter().copied().find(|v| name(*v) == s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub attr: Attribute,
    pub pos: PositionTag,
}

impl SceneObject {
    pub fn token(&self) -> String {
        format!("{}_{}_{}", self.class.name(), self.attr.name(), self.pos.name())
    }

    pub fn parse_token(tok: &str) -> Result<Self> {
        let parts: Vec<&str> = tok.split('_').collect();
        let bad = || Error::contract(format!("malformed scene token {tok:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            class: parse_named(&ObjectClass::ALL, ObjectClass::name, parts[0]).ok_or_else(bad)?,
            attr: parse_named(&Attribute::ALL, Attribute::name, parts[1]).ok_or_else(bad)?,
            pos: parse_named(&PositionTag::ALL, PositionTag::name, parts[2]).ok_or_else(bad)?,
        })
    }
}

/// Grid of cells; `cells[r * grid + c]` holds the object in that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid: usize,
    pub cells: Vec<Option<SceneObject>>,
}

impl Scene {
    pub fn objects(&self) -> impl Iterator<Item = &SceneObject> {
        self.cells.iter().flatten()
    }

    /// Row-major serialization, one token per occupied cell.
    pub fn tokens(&self) -> Vec<String> {
        self.objects().map(SceneObject::token).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sample {
    pub id: String,
    pub task: TaskKind,
    pub scene: Vec<String>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: TaskKind,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub grid: usize,
    /// Fraction of behavior questions whose target is a parked trailer.
    pub parked_trailer_rate: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self::with_train_size(2000, 0)
    }
}

impl StreamConfig {
    /// Validation and test splits are one eighth of the training split.
    pub fn with_train_size(train_size: usize, seed: u64) -> Self {
        Self {
            train_size,
            val_size: (train_size / 8).max(1),
            test_size: (train_size / 8).max(1),
            grid: 4,
            parked_trailer_rate: 0.05,
            seed,
        }
    }
}

// Question templates. `{c}`, `{a}`, `{p}` are the target's class, attribute
// and position tag.
const PERCEPTION_Q: &str = "what is the status of the {c} to the {p} ?";
const PREDICTION_Q: &str = "what will the {c} to the {p} do next ?";
const PLANNING_Q: &str = "what should the ego vehicle do about the {c} to the {p} ?";
const BEHAVIOR_Q: &str = "what is the ego vehicle doing near the {a} {c} to the {p} ?";

fn template(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Perception => PERCEPTION_Q,
        TaskKind::Prediction => PREDICTION_Q,
        TaskKind::Planning => PLANNING_Q,
        TaskKind::Behavior => BEHAVIOR_Q,
    }
}

fn fill(template: &str, o: &SceneObject) -> Vec<String> {
    template
        .split_whitespace()
        .map(|w| match w {
            "{c}" => o.class.name().to_string(),
            "{a}" => o.attr.name().to_string(),
            "{p}" => o.pos.name().to_string(),
            other => other.to_string(),
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Answer rule table for one target object.
pub fn rule_answer(task: TaskKind, o: &SceneObject) -> Vec<String> {
    use Attribute::*;
    use ObjectClass::*;
    use PositionTag::*;
    let c = o.class.name();
    match task {
        TaskKind::Perception => words(&format!(
            "the {c} to the {} is {}",
            o.pos.name(),
            o.attr.name()
        )),
        TaskKind::Prediction => {
            let future = match (o.class, o.attr) {
                (_, Moving) => "keep moving",
                (_, Braking) => "come to a stop",
                (_, Parked) => "stay parked",
                (Pedestrian, Stationary) => "start crossing",
                (Sign | Signal, Stationary) => "stay in place",
                (_, Stationary) => "start moving",
            };
            words(&format!("the {c} will {future}"))
        }
        TaskKind::Planning => {
            let action = match (o.pos, o.class, o.attr) {
                (Back, _, _) => "no action is needed".to_string(),
                (Front, Pedestrian, _) => "stop and yield to the pedestrian".to_string(),
                (_, Pedestrian, Moving) => "slow down and watch the pedestrian".to_string(),
                (_, Pedestrian, _) => "keep lane and watch the pedestrian".to_string(),
                (Front, Sign, _) => "follow the sign ahead".to_string(),
                (Front, Signal, _) => "stop at the signal".to_string(),
                (_, Sign | Signal, _) => "no action is needed".to_string(),
                (Front, _, Moving) => format!("follow the {c} at a safe distance"),
                (Front, _, Braking) => "brake and keep a safe distance".to_string(),
                (Front, _, _) => format!("change lanes to pass the {c}"),
                (_, _, Moving | Braking) => "keep lane and avoid merging".to_string(),
                (_, _, _) => "no action is needed".to_string(),
            };
            words(&action)
        }
        TaskKind::Behavior => {
            let doing = match (o.pos, o.class, o.attr) {
                (Front, Pedestrian, _) => "stopping for the pedestrian".to_string(),
                (Front, Sign | Signal, _) => format!("stopping at the {c}"),
                (Front, _, Moving) => "going ahead".to_string(),
                (Front, _, Braking) => "slowing down".to_string(),
                (Front, _, Parked) => "changing to the left lane".to_string(),
                (Front, _, Stationary) => format!("waiting behind the {c}"),
                (Left | Right, cls, Moving | Braking) if cls.is_vehicle() => {
                    "keeping its lane".to_string()
                }
                _ => "going ahead".to_string(),
            };
            words(&format!("the ego vehicle is {doing}"))
        }
    }
}

/// Recomputes the answer of a sample from its scene tokens and question
/// text alone.
pub fn derive_answer(task: TaskKind, scene: &[String], question: &[String]) -> Result<Vec<String>> {
    let tmpl: Vec<&str> = template(task).split_whitespace().collect();
    if tmpl.len() != question.len() {
        return Err(Error::contract(format!(
            "question does not match the {task} template"
        )));
    }
    let (mut class, mut attr, mut pos) = (None, None, None);
    for (t, q) in tmpl.iter().zip(question) {
        match *t {
            "{c}" => class = parse_named(&ObjectClass::ALL, ObjectClass::name, q),
            "{a}" => attr = parse_named(&Attribute::ALL, Attribute::name, q),
            "{p}" => pos = parse_named(&PositionTag::ALL, PositionTag::name, q),
            w if w == q => {}
            _ => {
                return Err(Error::contract(format!(
                    "question does not match the {task} template"
                )))
            }
        }
    }
    let (class, pos) = class
        .zip(pos)
        .ok_or_else(|| Error::contract("question names no valid target"))?;
    let objects = scene
        .iter()
        .map(|t| SceneObject::parse_token(t))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = objects.iter().filter(|o| o.class == class && o.pos == pos);
    let target = hits
        .next()
        .ok_or_else(|| Error::contract("question target absent from scene"))?;
    if hits.next().is_some() {
        return Err(Error::contract("question target is ambiguous"));
    }
    if let Some(a) = attr {
        if a != target.attr {
            return Err(Error::contract("question attribute disagrees with scene"));
        }
    }
    Ok(rule_answer(task, target))
}

fn random_object(rng: &mut Rng, row: usize, col: usize, grid: usize) -> SceneObject {
    let class = *ObjectClass::ALL.choose(rng).expect("non-empty");
    let attr = *class.attributes().choose(rng).expect("non-empty");
    SceneObject {
        class,
        attr,
        pos: PositionTag::of_cell(row, col, grid),
    }
}

fn random_scene(rng: &mut Rng, grid: usize, min_objects: usize, max_objects: usize) -> Scene {
    let n = rng.gen_range(min_objects..=max_objects);
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);
    let mut scene = Scene {
        grid,
        cells: vec![None; grid * grid],
    };
    for &cell in &cells[..n] {
        scene.cells[cell] = Some(random_object(rng, cell / grid, cell % grid, grid));
    }
    scene
}

fn unique_targets(scene: &Scene) -> Vec<SceneObject> {
    let objs: Vec<SceneObject> = scene.objects().copied().collect();
    objs.iter()
        .filter(|o| {
            objs.iter()
                .filter(|p| p.class == o.class && p.pos == o.pos)
                .count()
                == 1
        })
        .copied()
        .collect()
}

fn is_parked_trailer(o: &SceneObject) -> bool {
    o.class == ObjectClass::Trailer && o.attr == Attribute::Parked
}

/// Draws one scene and target for `task`.
fn draw(task: TaskKind, cfg: &StreamConfig, rng: &mut Rng) -> (Scene, SceneObject) {
    let grid = cfg.grid;
    loop {
        if task == TaskKind::Behavior && rng.gen_bool(cfg.parked_trailer_rate) {
            let mut scene = random_scene(rng, grid, 0, MAX_OBJECTS - 1);
            let free: Vec<usize> = (0..grid * grid)
                .filter(|&c| scene.cells[c].is_none())
                .filter(|&c| {
                    let pos = PositionTag::of_cell(c / grid, c % grid, grid);
                    !scene
                        .objects()
                        .any(|o| o.class == ObjectClass::Trailer && o.pos == pos)
                })
                .collect();
            let Some(&cell) = free.choose(rng) else { continue };
            let target = SceneObject {
                class: ObjectClass::Trailer,
                attr: Attribute::Parked,
                pos: PositionTag::of_cell(cell / grid, cell % grid, grid),
            };
            scene.cells[cell] = Some(target);
            return (scene, target);
        }
        let scene = random_scene(rng, grid, 1, MAX_OBJECTS);
        let mut candidates = unique_targets(&scene);
        if task == TaskKind::Behavior {
            candidates.retain(|o| !is_parked_trailer(o));
        }
        if let Some(&target) = candidates.choose(rng) {
            return (scene, target);
        }
    }
}

fn generate_task(task: TaskKind, cfg: &StreamConfig) -> TaskDataset {
    let seed = crate::seed::derive_seed(cfg.seed, &format!("stream.{task}"));
    let mut rng = rng_for(cfg.seed, &format!("stream.{task}"));
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut make_split = |split: Split, size: usize, rng: &mut Rng| {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let (scene, target) = draw(task, cfg, rng);
            let scene_tokens = scene.tokens();
            // Splits are disjoint by scene.
            if !seen.insert(scene_tokens.clone()) {
                continue;
            }
            out.push(Sample {
                id: format!("{task}-{}-{:05}", split.name(), out.len()),
                task,
                scene: scene_tokens,
                question: fill(template(task), &target),
                answer: rule_answer(task, &target),
            });
        }
        out
    };
    let train = make_split(Split::Train, cfg.train_size, &mut rng);
    let val = make_split(Split::Val, cfg.val_size, &mut rng);
    let test = make_split(Split::Test, cfg.test_size, &mut rng);
    TaskDataset {
        task,
        train,
        val,
        test,
        seed,
    }
}

/// Generates the Perception → Prediction → Planning → Behavior stream.
pub fn generate_stream(cfg: &StreamConfig) -> Result<Vec<TaskDataset>> {
    if cfg.train_size < 100 {
        return Err(Error::contract(format!(
            "task stream needs at least 100 training samples per task, got {}",
            cfg.train_size
        )));
    }
    if cfg.val_size == 0 || cfg.test_size == 0 {
        return Err(Error::contract("validation and test splits must be non-empty"));
    }
    if cfg.grid < 3 || cfg.grid * cfg.grid < MAX_OBJECTS {
        return Err(Error::contract(format!("grid {} too small", cfg.grid)));
    }
    if !(0.0..=1.0).contains(&cfg.parked_trailer_rate) {
        return Err(Error::InvalidParameter(format!(
            "parked_trailer_rate {} outside [0, 1]",
            cfg.parked_trailer_rate
        )));
    }
    Ok(TaskKind::ALL
        .into_iter()
        .map(|t| generate_task(t, cfg))
        .collect())
}

pub fn split_path(dir: &Path, task: TaskKind, split: Split) -> PathBuf {
    dir.join(format!("{}.{}.tsv", task.name(), split.name()))
}

fn write_split(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = String::new();
    body.push_str(DATASET_HEADER);
    body.push('\n');
    for s in samples {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.id,
            s.task,
            s.scene.join(" "),
            s.question.join(" "),
            s.answer.join(" ")
        ));
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

const FIELDS: [&str; 5] = ["id", "task", "scene", "question", "answer"];

fn read_split(path: &Path, task: TaskKind) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != DATASET_HEADER {
                return Err(Error::parse(path, line_no, format!("expected header {DATASET_HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < FIELDS.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("missing field `{}`", FIELDS[fields.len()]),
            ));
        }
        if fields.len() > FIELDS.len() {
            return Err(Error::parse(path, line_no, "too many fields"));
        }
        let sample_task: TaskKind = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad field `task`: {:?}", fields[1])))?;
        if sample_task != task {
            return Err(Error::parse(path, line_no, format!("sample belongs to task {sample_task}, file to {task}")));
        }
        for (name, value) in FIELDS.iter().zip(&fields) {
            if value.trim().is_empty() && *name != "question" {
                return Err(Error::parse(path, line_no, format!("empty field `{name}`")));
            }
        }
        out.push(Sample {
            id: fields[0].to_string(),
            task,
            scene: words(fields[2]),
            question: words(fields[3]),
            answer: words(fields[4]),
        });
    }
    Ok(out)
}

/// Writes the three split files of a task into `dir`.
pub fn write_dataset(dataset: &TaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        write_split(&split_path(dir, dataset.task, split), dataset.split(split))?;
    }
    let meta = dir.join(format!("{}.meta", dataset.task));
    fs::write(&meta, format!("seed = {}\nrules_version = {RULES_VERSION}\n", dataset.seed))
        .map_err(|e| Error::io(&meta, e))
}

pub fn read_dataset(dir: &Path, task: TaskKind) -> Result<TaskDataset> {
    let meta = dir.join(format!("{task}.meta"));
    let mut seed = 0;
    if let Ok(text) = fs::read_to_string(&meta) {
        for (i, line) in text.lines().enumerate() {
            if let Some(v) = line.strip_prefix("seed = ") {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(&meta, i + 1, "bad seed"))?;
            }
        }
    }
    Ok(TaskDataset {
        task,
        train: read_split(&split_path(dir, task, Split::Train), task)?,
        val: read_split(&split_path(dir, task, Split::Val), task)?,
        test: read_split(&split_path(dir, task, Split::Test), task)?,
        seed,
    })
}

pub fn read_stream(dir: &Path) -> Result<Vec<TaskDataset>> {
    TaskKind::ALL
        .into_iter()
        .map(|t| read_dataset(dir, t))
        .collect()
}
