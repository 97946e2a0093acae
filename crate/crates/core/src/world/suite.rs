//! Task families, the instruction vocabulary and suite generation.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GOAL_RADIUS, RESET_JITTER};
use crate::error::{Error, Result};
use crate::rng::{SeedTree, StreamRng};

pub const NUM_TYPES: usize = 6;
pub const REGIONS_PER_AXIS: usize = 4;
pub const NUM_REGIONS: usize = REGIONS_PER_AXIS * REGIONS_PER_AXIS;
const MAX_ATTEMPTS: usize = 1000;
/// Minimum object spacing at reset, jitter included.
const MIN_OBJECT_GAP: f64 = 2.0 * GOAL_RADIUS + 2.0 * RESET_JITTER;
/// Minimum distance from any object to any goal centre at reset.
const MIN_GOAL_GAP: f64 = 2.0 * GOAL_RADIUS + RESET_JITTER;
/// Largest per-axis distance an object is carried, keeping scripted
/// episodes well inside the horizon.
const MAX_CARRY: f64 = 0.5;
pub const DEFAULT_HORIZON: usize = 120;
pub const LONG_HORIZON: usize = 240;

const TYPE_NAMES: [&str; NUM_TYPES] = ["bowl", "plate", "mug", "block", "can", "box"];
const VERBS: [&str; 6] = ["put", "pick", "place", "in", "at", "then"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Goal,
    Spatial,
    Object,
    Long,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Goal, Family::Spatial, Family::Object, Family::Long];

    pub fn name(self) -> &'static str {
        match self {
            Family::Goal => "goal",
            Family::Spatial => "spatial",
            Family::Object => "object",
            Family::Long => "long",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub type_id: usize,
    pub pos: [f64; 2],
}

/// One goal predicate: object `object` within the goal radius of `goal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub object: usize,
    pub region: usize,
    pub goal: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub family: Family,
    pub objects: Vec<ObjectSpec>,
    pub stages: Vec<Stage>,
    pub start: [f64; 2],
    pub goal_radius: f64,
    pub instruction: Vec<String>,
    /// Seed of the task's own demonstration episodes.
    pub seed: u64,
    pub horizon: usize,
}

impl TaskSpec {
    pub fn tokens(&self) -> Result<Vec<usize>> {
        self.instruction.iter().map(|w| Vocabulary::id(w)).collect()
    }
}

/// Fixed word list: verbs, object types, then region names.
pub struct Vocabulary;

impl Vocabulary {
    pub fn size() -> usize {
        VERBS.len() + NUM_TYPES + NUM_REGIONS
    }

    pub fn word(id: usize) -> String {
        if id < VERBS.len() {
            VERBS[id].to_string()
        } else if id < VERBS.len() + NUM_TYPES {
            TYPE_NAMES[id - VERBS.len()].to_string()
        } else {
            region_name(id - VERBS.len() - NUM_TYPES)
        }
    }

    pub fn id(word: &str) -> Result<usize> {
        (0..Self::size())
            .find(|&i| Self::word(i) == word)
            .ok_or_else(|| Error::contract(format!("word {word:?} outside the vocabulary")))
    }
}

fn region_name(r: usize) -> String {
    format!("region{}{}", r / REGIONS_PER_AXIS, r % REGIONS_PER_AXIS)
}

pub fn region_center(r: usize) -> [f64; 2] {
    let cell = 1.0 / REGIONS_PER_AXIS as f64;
    [
        (r % REGIONS_PER_AXIS) as f64 * cell + cell / 2.0,
        (r / REGIONS_PER_AXIS) as f64 * cell + cell / 2.0,
    ]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn linf(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

fn uniform_point(rng: &mut StreamRng, lo: f64, hi: f64) -> [f64; 2] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn spaced(points: &[[f64; 2]]) -> bool {
    points
        .iter()
        .enumerate()
        .all(|(i, &p)| points[..i].iter().all(|&q| dist(p, q) >= MIN_OBJECT_GAP))
}

fn clear_of_goals(points: &[[f64; 2]], goals: &[[f64; 2]]) -> bool {
    points.iter().all(|&p| goals.iter().all(|&g| dist(p, g) >= MIN_GOAL_GAP))
}

/// Up to `n` objects of random distinct types at well separated positions.
fn random_layout(rng: &mut StreamRng, n: usize, lo: f64, hi: f64) -> Option<Vec<ObjectSpec>> {
    let mut types: Vec<usize> = (0..NUM_TYPES).collect();
    types.shuffle(rng);
    for _ in 0..MAX_ATTEMPTS {
        let pts: Vec<[f64; 2]> = (0..n).map(|_| uniform_point(rng, lo, hi)).collect();
        if spaced(&pts) {
            return Some(pts.into_iter().zip(&types).map(|(pos, &type_id)| ObjectSpec { type_id, pos }).collect());
        }
    }
    None
}

fn stage(object: usize, region: usize) -> Stage {
    Stage {
        object,
        region,
        goal: region_center(region),
    }
}

/// Regions usable as a goal for `target` given the whole layout.
fn goal_regions(objects: &[ObjectSpec], target: usize) -> Vec<usize> {
    (0..NUM_REGIONS)
        .filter(|&r| {
            let c = region_center(r);
            linf(objects[target].pos, c) <= MAX_CARRY && objects.iter().all(|o| dist(o.pos, c) >= MIN_GOAL_GAP)
        })
        .collect()
}

fn type_word(t: usize) -> String {
    TYPE_NAMES[t].to_string()
}

fn make_task(family: Family, objects: Vec<ObjectSpec>, stages: Vec<Stage>, instruction: Vec<String>, rng: &mut StreamRng) -> TaskSpec {
    let horizon = if family == Family::Long { LONG_HORIZON } else { DEFAULT_HORIZON };
    TaskSpec {
        name: instruction.join("_"),
        family,
        objects,
        stages,
        start: uniform_point(rng, 0.35, 0.65),
        goal_radius: GOAL_RADIUS,
        instruction,
        seed: rng.random(),
        horizon,
    }
}

fn gen_err(family: Family, what: &str) -> Error {
    Error::Generation(format!("{} family: {what} after {MAX_ATTEMPTS} samples", family.name()))
}

/// Fixed layout, fixed target, one distinct goal region per task.
fn goal_family(rng: &mut StreamRng, n: usize) -> Result<Vec<TaskSpec>> {
    for _ in 0..MAX_ATTEMPTS {
        let Some(mut objects) = random_layout(rng, 3, 0.15, 0.85) else { continue };
        objects[0].pos = uniform_point(rng, 0.4, 0.6);
        if !spaced(&objects.iter().map(|o| o.pos).collect::<Vec<_>>()) {
            continue;
        }
        let mut regions = goal_regions(&objects, 0);
        if regions.len() < n {
            continue;
        }
        regions.shuffle(rng);
        let t = type_word(objects[0].type_id);
        return Ok(regions[..n]
            .iter()
            .map(|&r| {
                let ins = vec!["put".into(), t.clone(), "in".into(), region_name(r)];
                make_task(Family::Goal, objects.clone(), vec![stage(0, r)], ins, rng)
            })
            .collect());
    }
    Err(gen_err(Family::Goal, "no layout with enough goal regions"))
}

/// Two same-type objects on region centres; the instruction names the
/// region of the one to move. Goal region and type are shared.
fn spatial_family(rng: &mut StreamRng, n: usize) -> Result<Vec<TaskSpec>> {
    let t1 = rng.random_range(0..NUM_TYPES);
    let distractor = (t1 + rng.random_range(1..NUM_TYPES)) % NUM_TYPES;
    let goal = [5usize, 6, 9, 10][rng.random_range(0..4)];
    let gc = region_center(goal);
    let mut sources: Vec<usize> = (0..NUM_REGIONS)
        .filter(|&r| r != goal && linf(region_center(r), gc) <= MAX_CARRY)
        .collect();
    if sources.len() < n {
        return Err(gen_err(Family::Spatial, "too few source regions"));
    }
    sources.shuffle(rng);
    let mut tasks = Vec::with_capacity(n);
    for &src in &sources[..n] {
        let mut others: Vec<usize> = (0..NUM_REGIONS).filter(|&r| r != goal && r != src).collect();
        others.shuffle(rng);
        let objects = vec![
            ObjectSpec {
                type_id: t1,
                pos: region_center(src),
            },
            ObjectSpec {
                type_id: t1,
                pos: region_center(others[0]),
            },
            ObjectSpec {
                type_id: distractor,
                pos: region_center(others[1]),
            },
        ];
        let ins = vec![
            "pick".into(),
            type_word(t1),
            "at".into(),
            region_name(src),
            "place".into(),
            region_name(goal),
        ];
        tasks.push(make_task(Family::Spatial, objects.clone(), vec![stage(0, goal)], ins, rng));
    }
    Ok(tasks)
}

/// Fixed layout of every type; tasks pick a target type and one of two goals.
fn object_family(rng: &mut StreamRng, n: usize) -> Result<Vec<TaskSpec>> {
    for _ in 0..MAX_ATTEMPTS {
        let Some(objects) = random_layout(rng, NUM_TYPES, 0.15, 0.85) else { continue };
        let mut pairs = Vec::new();
        for target in 0..objects.len() {
            for r in goal_regions(&objects, target) {
                pairs.push((target, r));
            }
        }
        let mut goals: Vec<usize> = pairs.iter().map(|p| p.1).collect::<HashSet<_>>().into_iter().collect();
        goals.sort_unstable();
        goals.shuffle(rng);
        // two shared goals keep the family about object identity
        let Some(chosen) = goals
            .iter()
            .flat_map(|&a| goals.iter().map(move |&b| (a, b)))
            .find(|&(a, b)| a < b && pairs.iter().filter(|p| p.1 == a || p.1 == b).count() >= n)
        else {
            continue;
        };
        let mut usable: Vec<(usize, usize)> = pairs.into_iter().filter(|p| p.1 == chosen.0 || p.1 == chosen.1).collect();
        usable.shuffle(rng);
        return Ok(usable[..n]
            .iter()
            .map(|&(target, r)| {
                let ins = vec!["pick".into(), type_word(objects[target].type_id), "place".into(), region_name(r)];
                make_task(Family::Object, objects.clone(), vec![stage(target, r)], ins, rng)
            })
            .collect());
    }
    Err(gen_err(Family::Object, "no layout with enough target/goal pairs"))
}

/// Two sequential deliveries with a fresh layout per task.
fn long_task(rng: &mut StreamRng) -> Option<TaskSpec> {
    for _ in 0..MAX_ATTEMPTS {
        let objects = random_layout(rng, 3, 0.15, 0.85)?;
        let g1s = goal_regions(&objects, 0);
        let g2s = goal_regions(&objects, 1);
        if g1s.is_empty() || g2s.is_empty() {
            continue;
        }
        let g1 = g1s[rng.random_range(0..g1s.len())];
        let g2 = g2s[rng.random_range(0..g2s.len())];
        let (c1, c2) = (region_center(g1), region_center(g2));
        if g1 == g2 || linf(c1, objects[1].pos) > MAX_CARRY || !clear_of_goals(&[objects[0].pos, objects[1].pos], &[c1, c2]) {
            continue;
        }
        let ins: Vec<String> = vec![
            "put".into(),
            type_word(objects[0].type_id),
            "in".into(),
            region_name(g1),
            "then".into(),
            "put".into(),
            type_word(objects[1].type_id),
            "in".into(),
            region_name(g2),
        ];
        let stages = vec![stage(0, g1), stage(1, g2)];
        return Some(make_task(Family::Long, objects, stages, ins, rng));
    }
    None
}

fn long_family(rng: &mut StreamRng, n: usize) -> Result<Vec<TaskSpec>> {
    let mut tasks: Vec<TaskSpec> = Vec::with_capacity(n);
    for _ in 0..MAX_ATTEMPTS {
        if tasks.len() == n {
            break;
        }
        let t = long_task(rng).ok_or_else(|| gen_err(Family::Long, "no valid two-stage layout"))?;
        if tasks.iter().all(|o| o.instruction != t.instruction) {
            tasks.push(t);
        }
    }
    if tasks.len() < n {
        return Err(gen_err(Family::Long, "too few distinct instructions"));
    }
    Ok(tasks)
}

/// A lifelong suite of `num_tasks` tasks from one family, deterministic in `seed`.
pub fn generate_suite(seed: u64, family: Family, num_tasks: usize) -> Result<Vec<TaskSpec>> {
    if num_tasks == 0 {
        return Err(Error::contract("suite with zero tasks"));
    }
    let mut rng = SeedTree::new(seed).child("suite").stream(family.name());
    match family {
        Family::Goal => goal_family(&mut rng, num_tasks),
        Family::Spatial => spatial_family(&mut rng, num_tasks),
        Family::Object => object_family(&mut rng, num_tasks),
        Family::Long => long_family(&mut rng, num_tasks),
    }
}

/// Mixed-family pretraining tasks, each with its own layout, whose
/// instructions avoid every task in `exclude`.
pub fn generate_pretrain_suite(seed: u64, num_tasks: usize, exclude: &[TaskSpec]) -> Result<Vec<TaskSpec>> {
    if num_tasks == 0 {
        return Err(Error::contract("suite with zero tasks"));
    }
    let mut seen: HashSet<Vec<String>> = exclude.iter().map(|t| t.instruction.clone()).collect();
    let mut rng = SeedTree::new(seed).child("suite").stream("pretrain");
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut attempts = 0;
    while tasks.len() < num_tasks {
        attempts += 1;
        if attempts > MAX_ATTEMPTS * num_tasks {
            return Err(Error::Generation("pretraining suite: too few distinct instructions".into()));
        }
        let family = Family::ALL[tasks.len() % Family::ALL.len()];
        let candidate = match family {
            Family::Goal => goal_family(&mut rng, 1)?.remove(0),
            Family::Spatial => spatial_family(&mut rng, 1)?.remove(0),
            Family::Object => object_family(&mut rng, 1)?.remove(0),
            Family::Long => long_family(&mut rng, 1)?.remove(0),
        };
        if seen.insert(candidate.instruction.clone()) {
            tasks.push(candidate);
        }
    }
    Ok(tasks)
}

pub fn write_suite(path: &Path, tasks: &[TaskSpec]) -> Result<()> {
    let json = serde_json::to_string_pretty(tasks)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_suite(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tasks: Vec<TaskSpec> = serde_json::from_str(&text)?;
    for t in &tasks {
        t.tokens()?;
        if t.stages.iter().any(|s| s.object >= t.objects.len()) {
            return Err(Error::contract(format!("task {} names a missing object", t.name)));
        }
    }
    Ok(tasks)
}
