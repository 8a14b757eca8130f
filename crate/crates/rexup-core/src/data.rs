//! Synthetic scene/question corpus generation.
//!
//! Scenes are small worlds of attributed objects with directed labeled
//! relations. Questions come from templates across five families
//! (choose, logical, compare, verify, query) with answers computed from
//! scene ground truth. Region features deliberately encode names,
//! attributes, and boxes but never relation edges, so relation-dependent
//! questions are answerable only through the scene graph.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encode::RawRegion;
use crate::{Error, Result, Scalar};

pub const SCHEMA_VERSION: u32 = 1;

pub const NOUNS: [&str; 12] = [
    "person", "dog", "cat", "ball", "box", "cup", "hat", "shirt", "chair", "table", "phone",
    "book",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const MATERIALS: [&str; 3] = ["metal", "wood", "plastic"];
pub const SPATIAL_RELATIONS: [&str; 4] = ["left-of", "right-of", "above", "below"];
pub const SEMANTIC_RELATIONS: [&str; 3] = ["holding", "wearing", "near"];

/// Distance bound for injecting a `near` edge.
pub const NEAR_DISTANCE: Scalar = 0.45;

/// Every token the answer space can contain.
pub fn answer_tokens() -> Vec<String> {
    let mut out: Vec<String> = NOUNS.iter().map(|s| s.to_string()).collect();
    out.extend(COLORS.iter().map(|s| s.to_string()));
    out.extend(SIZES.iter().map(|s| s.to_string()));
    out.extend(MATERIALS.iter().map(|s| s.to_string()));
    out.extend(["yes", "no", "left", "right", "above", "below"].map(String::from));
    out
}

/// Ontology terms the scene-graph encoder embeds (names, attributes,
/// relation labels).
pub fn ontology_tokens() -> Vec<String> {
    let mut out: Vec<String> = NOUNS.iter().map(|s| s.to_string()).collect();
    out.extend(COLORS.iter().map(|s| s.to_string()));
    out.extend(SIZES.iter().map(|s| s.to_string()));
    out.extend(MATERIALS.iter().map(|s| s.to_string()));
    out.extend(SPATIAL_RELATIONS.iter().map(|s| s.to_string()));
    out.extend(SEMANTIC_RELATIONS.iter().map(|s| s.to_string()));
    out
}

/// One scene object: a unique id, a noun, `[color, size, material]`
/// attributes, and a normalized `[x1, y1, x2, y2]` box.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneObject {
    pub id: usize,
    pub name: String,
    pub attributes: Vec<String>,
    #[serde(rename = "box")]
    pub box_: [Scalar; 4],
}

impl SceneObject {
    pub fn center(&self) -> (Scalar, Scalar) {
        (
            (self.box_[0] + self.box_[2]) / 2.0,
            (self.box_[1] + self.box_[3]) / 2.0,
        )
    }

    pub fn color(&self) -> &str {
        &self.attributes[0]
    }

    pub fn size(&self) -> &str {
        &self.attributes[1]
    }

    pub fn material(&self) -> &str {
        &self.attributes[2]
    }
}

/// Directed labeled relation, serialized as a `[source, relation,
/// target]` triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, String, usize)", into = "(usize, String, usize)")]
pub struct Edge {
    pub source: usize,
    pub relation: String,
    pub target: usize,
}

impl From<(usize, String, usize)> for Edge {
    fn from((source, relation, target): (usize, String, usize)) -> Self {
        Edge {
            source,
            relation,
            target,
        }
    }
}

impl From<Edge> for (usize, String, usize) {
    fn from(e: Edge) -> Self {
        (e.source, e.relation, e.target)
    }
}

/// The five question families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Choose,
    Logical,
    Compare,
    Verify,
    Query,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Choose,
        QuestionType::Logical,
        QuestionType::Compare,
        QuestionType::Verify,
        QuestionType::Query,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            QuestionType::Choose => "choose",
            QuestionType::Logical => "logical",
            QuestionType::Compare => "compare",
            QuestionType::Verify => "verify",
            QuestionType::Query => "query",
        }
    }
}

/// One templated question with its ground-truth answer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QASample {
    pub tokens: Vec<String>,
    #[serde(rename = "type")]
    pub qtype: QuestionType,
    pub answer: String,
    pub requires_graph: bool,
}

impl QASample {
    /// Part of the relation-probe evaluation subset: relation-dependent
    /// open questions whose answer space has at least 5 candidates.
    pub fn is_graph_probe(&self) -> bool {
        self.requires_graph && self.qtype == QuestionType::Query
    }
}

/// A scene together with its ground-truth graph and questions.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
    pub edges: Vec<Edge>,
    pub questions: Vec<QASample>,
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Scene {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn find_by_name(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    /// Validate edge endpoints and the geometric consistency of spatial
    /// and `near` edges.
    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            let (Some(src), Some(tgt)) = (self.object(e.source), self.object(e.target)) else {
                return Err(Error::Graph(format!(
                    "edge {} -{}-> {} references a missing object",
                    e.source, e.relation, e.target
                )));
            };
            let (sx, sy) = src.center();
            let (tx, ty) = tgt.center();
            let ok = match e.relation.as_str() {
                "left-of" => sx < tx,
                "right-of" => sx > tx,
                "above" => sy < ty,
                "below" => sy > ty,
                "near" => ((sx - tx).powi(2) + (sy - ty).powi(2)).sqrt() < NEAR_DISTANCE,
                _ => true,
            };
            if !ok {
                return Err(Error::Graph(format!(
                    "edge {} -{}-> {} contradicts the geometry",
                    e.source, e.relation, e.target
                )));
            }
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, salt: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

fn pick<'a, T>(rng: &mut ChaCha20Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Generate one scene: `n_objects` distinctly named objects with
/// non-overlapping centers, at most one outgoing edge per object
/// (semantic edges win over spatial ones), deterministic in `seed`.
pub fn generate_scene(seed: u64, n_objects: usize) -> Result<Scene> {
    if n_objects == 0 || n_objects > NOUNS.len() {
        return Err(Error::Contract(format!(
            "n_objects must be in 1..={}, got {n_objects}",
            NOUNS.len()
        )));
    }
    let mut rng = scene_rng(seed, "scene");

    // distinct names
    let mut names: Vec<&str> = NOUNS.to_vec();
    for i in (1..names.len()).rev() {
        let j = rng.random_range(0..=i);
        names.swap(i, j);
    }
    names.truncate(n_objects);

    // boxes with separated centers
    let mut centers: Vec<(Scalar, Scalar)> = Vec::with_capacity(n_objects);
    while centers.len() < n_objects {
        let cx = 0.15 + 0.70 * rng.random::<f64>() as Scalar;
        let cy = 0.15 + 0.70 * rng.random::<f64>() as Scalar;
        let min_dist = centers
            .iter()
            .map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
            .fold(Scalar::INFINITY, Scalar::min);
        if min_dist > 0.16 {
            centers.push((cx, cy));
        }
    }

    let mut objects = Vec::with_capacity(n_objects);
    for (i, name) in names.iter().enumerate() {
        let (cx, cy) = centers[i];
        let w = 0.08 + 0.14 * rng.random::<f64>() as Scalar;
        let h = 0.08 + 0.14 * rng.random::<f64>() as Scalar;
        let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
        let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
        let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
        objects.push(SceneObject {
            id: i,
            name: name.to_string(),
            attributes: vec![
                pick(&mut rng, &COLORS).to_string(),
                pick(&mut rng, &SIZES).to_string(),
                pick(&mut rng, &MATERIALS).to_string(),
            ],
            box_: [x1, y1, x2, y2],
        });
    }

    // semantic edges first; each object gets at most one outgoing edge
    let mut edges: Vec<Edge> = Vec::new();
    let mut has_outgoing = vec![false; n_objects];
    let n_semantic = {
        let roll: f64 = rng.random();
        if roll < 0.10 {
            0
        } else if roll < 0.55 {
            1
        } else {
            2
        }
    };
    let n_semantic = n_semantic.min(n_objects.saturating_sub(1));
    for _ in 0..n_semantic {
        let free: Vec<usize> = (0..n_objects).filter(|&i| !has_outgoing[i]).collect();
        if free.len() < 2 {
            break;
        }
        let src = *pick(&mut rng, &free);
        let relation = *pick(&mut rng, &SEMANTIC_RELATIONS);
        let candidates: Vec<usize> = (0..n_objects)
            .filter(|&t| {
                t != src
                    && (relation != "near" || {
                        let (sx, sy) = objects[src].center();
                        let (tx, ty) = objects[t].center();
                        ((sx - tx).powi(2) + (sy - ty).powi(2)).sqrt() < NEAR_DISTANCE
                    })
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let tgt = *pick(&mut rng, &candidates);
        edges.push(Edge {
            source: src,
            relation: relation.to_string(),
            target: tgt,
        });
        has_outgoing[src] = true;
    }

    // spatial edges for the rest, dominant-axis relation from centers
    for src in 0..n_objects {
        if has_outgoing[src] || n_objects < 2 || rng.random::<f64>() > 0.8 {
            continue;
        }
        let mut tgt = rng.random_range(0..n_objects - 1);
        if tgt >= src {
            tgt += 1;
        }
        let (sx, sy) = objects[src].center();
        let (tx, ty) = objects[tgt].center();
        let (dx, dy) = (tx - sx, ty - sy);
        let relation = if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                "left-of"
            } else {
                "right-of"
            }
        } else if dy > 0.0 {
            "above"
        } else {
            "below"
        };
        edges.push(Edge {
            source: src,
            relation: relation.to_string(),
            target: tgt,
        });
        has_outgoing[src] = true;
    }

    let scene = Scene {
        scene_id: seed,
        objects,
        edges,
        questions: Vec::new(),
        schema_version: SCHEMA_VERSION,
    };
    scene.validate()?;
    Ok(scene)
}

/// Deterministic pseudo region features: a seeded-hash embedding of
/// `(name, attributes)` plus Gaussian noise. Relations are not encoded;
/// they live only in the graph.
pub fn derive_region_features(
    scene: &Scene,
    feature_width: usize,
    noise_scale: Scalar,
    seed: u64,
) -> Result<Vec<RawRegion>> {
    if feature_width < 8 {
        return Err(Error::Contract(format!(
            "feature width must be >= 8, got {feature_width}"
        )));
    }
    scene
        .objects
        .iter()
        .map(|o| {
            let mut feature = hash_embedding(&o.name, &o.attributes, feature_width);
            if noise_scale > 0.0 {
                let mut rng = scene_rng(
                    seed,
                    &format!("noise/{}/{}", scene.scene_id, o.id),
                );
                for v in feature.iter_mut() {
                    *v += gaussian(&mut rng) * noise_scale;
                }
            }
            let [x1, y1, x2, y2] = o.box_;
            Ok(RawRegion {
                feature,
                box_: [x1, y1, x2, y2, x2 - x1, y2 - y1],
            })
        })
        .collect()
}

/// Unit-variance embedding of an object's identity, stable across runs
/// and platforms.
pub fn hash_embedding(name: &str, attributes: &[String], width: usize) -> Vec<Scalar> {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    for a in attributes {
        hasher.update(b"|");
        hasher.update(a.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha20Rng::from_seed(key);
    (0..width).map(|_| gaussian(&mut rng)).collect()
}

fn gaussian(rng: &mut ChaCha20Rng) -> Scalar {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as Scalar
}

fn size_rank(size: &str) -> usize {
    SIZES.iter().position(|&s| s == size).unwrap_or(0)
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn other_color(rng: &mut ChaCha20Rng, not: &str) -> String {
    loop {
        let c = pick(rng, &COLORS);
        if *c != not {
            return c.to_string();
        }
    }
}

/// Instantiate the question templates a scene supports, balanced within
/// each family, taking at most `per_type_count` per family. Returns the
/// samples and the number of template instantiations skipped as
/// unsatisfiable.
pub fn generate_questions(
    scene: &Scene,
    per_type_count: usize,
    seed: u64,
) -> (Vec<QASample>, usize) {
    let mut rng = scene_rng(seed, &format!("questions/{}", scene.scene_id));
    let mut skipped = 0usize;
    let mut out = Vec::new();

    let holding: Vec<&Edge> = scene
        .edges
        .iter()
        .filter(|e| e.relation == "holding")
        .collect();
    let wearing: Vec<&Edge> = scene
        .edges
        .iter()
        .filter(|e| e.relation == "wearing")
        .collect();
    let near: Vec<&Edge> = scene.edges.iter().filter(|e| e.relation == "near").collect();
    let name_of = |id: usize| scene.object(id).expect("validated").name.clone();

    // -------- query --------
    let mut query: Vec<QASample> = Vec::new();
    for e in &holding {
        query.push(QASample {
            tokens: tokens(&format!("what is the {} holding", name_of(e.source))),
            qtype: QuestionType::Query,
            answer: name_of(e.target),
            requires_graph: true,
        });
        let target = scene.object(e.target).expect("validated");
        query.push(QASample {
            tokens: tokens(&format!(
                "what color is the thing the {} is holding",
                name_of(e.source)
            )),
            qtype: QuestionType::Query,
            answer: target.color().to_string(),
            requires_graph: true,
        });
    }
    for e in &wearing {
        query.push(QASample {
            tokens: tokens(&format!("what is the {} wearing", name_of(e.source))),
            qtype: QuestionType::Query,
            answer: name_of(e.target),
            requires_graph: true,
        });
    }
    for e in &near {
        query.push(QASample {
            tokens: tokens(&format!("what is the {} near", name_of(e.source))),
            qtype: QuestionType::Query,
            answer: name_of(e.target),
            requires_graph: true,
        });
    }
    for o in &scene.objects {
        query.push(QASample {
            tokens: tokens(&format!("what color is the {}", o.name)),
            qtype: QuestionType::Query,
            answer: o.color().to_string(),
            requires_graph: false,
        });
        query.push(QASample {
            tokens: tokens(&format!("what size is the {}", o.name)),
            qtype: QuestionType::Query,
            answer: o.size().to_string(),
            requires_graph: false,
        });
        query.push(QASample {
            tokens: tokens(&format!("what material is the {}", o.name)),
            qtype: QuestionType::Query,
            answer: o.material().to_string(),
            requires_graph: false,
        });
    }

    // -------- verify --------
    let mut verify: Vec<QASample> = Vec::new();
    let mut want_yes = scene.scene_id % 2 == 0;
    for o in &scene.objects {
        let (color, answer) = if want_yes {
            (o.color().to_string(), "yes")
        } else {
            (other_color(&mut rng, o.color()), "no")
        };
        verify.push(QASample {
            tokens: tokens(&format!("is the {} {color}", o.name)),
            qtype: QuestionType::Verify,
            answer: answer.into(),
            requires_graph: false,
        });
        want_yes = !want_yes;

        let (color, answer) = if want_yes {
            (o.color().to_string(), "yes")
        } else {
            (other_color(&mut rng, o.color()), "no")
        };
        verify.push(QASample {
            tokens: tokens(&format!("is there a {color} {}", o.name)),
            qtype: QuestionType::Verify,
            answer: answer.into(),
            requires_graph: false,
        });
        want_yes = !want_yes;
    }
    for (edges, rel) in [(&holding, "holding"), (&wearing, "wearing")] {
        for e in edges.iter() {
            let (tgt, answer) = if want_yes {
                (e.target, "yes")
            } else {
                let others: Vec<usize> = scene
                    .objects
                    .iter()
                    .map(|o| o.id)
                    .filter(|&id| id != e.source && id != e.target)
                    .collect();
                if others.is_empty() {
                    skipped += 1;
                    continue;
                }
                (*pick(&mut rng, &others), "no")
            };
            verify.push(QASample {
                tokens: tokens(&format!(
                    "is the {} {rel} the {}",
                    name_of(e.source),
                    name_of(tgt)
                )),
                qtype: QuestionType::Verify,
                answer: answer.into(),
                requires_graph: true,
            });
            want_yes = !want_yes;
        }
    }

    // -------- logical --------
    let mut logical: Vec<QASample> = Vec::new();
    let mut want_yes = scene.scene_id % 2 == 1;
    if scene.objects.len() >= 2 {
        for i in 0..scene.objects.len() {
            let o1 = &scene.objects[i];
            let o2 = &scene.objects[(i + 1) % scene.objects.len()];
            let conj = if i % 2 == 0 { "or" } else { "and" };
            let (c1, c2, answer) = match (conj, want_yes) {
                ("or", true) => (
                    o1.color().to_string(),
                    other_color(&mut rng, o2.color()),
                    "yes",
                ),
                ("or", false) => (
                    other_color(&mut rng, o1.color()),
                    other_color(&mut rng, o2.color()),
                    "no",
                ),
                (_, true) => (o1.color().to_string(), o2.color().to_string(), "yes"),
                (_, false) => (
                    other_color(&mut rng, o1.color()),
                    o2.color().to_string(),
                    "no",
                ),
            };
            logical.push(QASample {
                tokens: tokens(&format!(
                    "is there a {c1} {} {conj} a {c2} {}",
                    o1.name, o2.name
                )),
                qtype: QuestionType::Logical,
                answer: answer.into(),
                requires_graph: false,
            });
            want_yes = !want_yes;
        }
    } else {
        skipped += 1;
    }

    // -------- compare --------
    let mut compare: Vec<QASample> = Vec::new();
    let mut want_yes = scene.scene_id % 2 == 0;
    for i in 0..scene.objects.len() {
        for j in (i + 1)..scene.objects.len() {
            let (a, b) = (&scene.objects[i], &scene.objects[j]);
            let (ra, rb) = (size_rank(a.size()), size_rank(b.size()));
            if ra == rb {
                skipped += 1;
                continue;
            }
            let (big, small) = if ra > rb { (a, b) } else { (b, a) };
            let (n1, n2, word, answer) = if want_yes {
                if compare.len() % 2 == 0 {
                    (&big.name, &small.name, "larger", "yes")
                } else {
                    (&small.name, &big.name, "smaller", "yes")
                }
            } else if compare.len() % 2 == 0 {
                (&small.name, &big.name, "larger", "no")
            } else {
                (&big.name, &small.name, "smaller", "no")
            };
            compare.push(QASample {
                tokens: tokens(&format!("is the {n1} {word} than the {n2}")),
                qtype: QuestionType::Compare,
                answer: answer.into(),
                requires_graph: false,
            });
            want_yes = !want_yes;
        }
    }

    // -------- choose --------
    let mut choose: Vec<QASample> = Vec::new();
    for i in 0..scene.objects.len() {
        let o1 = &scene.objects[i];
        let o2 = &scene.objects[(i + 1) % scene.objects.len()];
        if o1.id == o2.id {
            continue;
        }
        if i % 2 == 0 {
            let (c1, c2) = (o1.center(), o2.center());
            if (c1.0 - c2.0).abs() > 1e-9 {
                choose.push(QASample {
                    tokens: tokens(&format!(
                        "is the {} left of or right of the {}",
                        o1.name, o2.name
                    )),
                    qtype: QuestionType::Choose,
                    answer: if c1.0 < c2.0 { "left" } else { "right" }.into(),
                    requires_graph: false,
                });
            } else {
                skipped += 1;
            }
        } else {
            let (c1, c2) = (o1.center(), o2.center());
            if (c1.1 - c2.1).abs() > 1e-9 {
                choose.push(QASample {
                    tokens: tokens(&format!(
                        "is the {} above or below the {}",
                        o1.name, o2.name
                    )),
                    qtype: QuestionType::Choose,
                    answer: if c1.1 < c2.1 { "above" } else { "below" }.into(),
                    requires_graph: false,
                });
            } else {
                skipped += 1;
            }
        }
        let real = o1.color().to_string();
        let decoy = other_color(&mut rng, &real);
        let (c1, c2) = if rng.random::<f64>() < 0.5 {
            (real.clone(), decoy)
        } else {
            (decoy, real.clone())
        };
        choose.push(QASample {
            tokens: tokens(&format!("is the {} {c1} or {c2}", o1.name)),
            qtype: QuestionType::Choose,
            answer: real,
            requires_graph: false,
        });
    }
    for e in &holding {
        let others: Vec<usize> = scene
            .objects
            .iter()
            .map(|o| o.id)
            .filter(|&id| id != e.source && id != e.target)
            .collect();
        if others.is_empty() {
            skipped += 1;
            continue;
        }
        let decoy = *pick(&mut rng, &others);
        let (t1, t2) = if rng.random::<f64>() < 0.5 {
            (e.target, decoy)
        } else {
            (decoy, e.target)
        };
        choose.push(QASample {
            tokens: tokens(&format!(
                "is the {} holding the {} or the {}",
                name_of(e.source),
                name_of(t1),
                name_of(t2)
            )),
            qtype: QuestionType::Choose,
            answer: name_of(e.target),
            requires_graph: true,
        });
    }

    for pool in [&mut query, &mut verify, &mut logical, &mut compare, &mut choose] {
        // deterministic shuffle, then truncate to the per-family budget
        for i in (1..pool.len()).rev() {
            let j = rng.random_range(0..=i);
            pool.swap(i, j);
        }
        pool.truncate(per_type_count);
        out.append(pool);
    }
    (out, skipped)
}

/// One named dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub scenes: Vec<Scene>,
}

impl DatasetSplit {
    pub fn question_count(&self) -> usize {
        self.scenes.iter().map(|s| s.questions.len()).sum()
    }

    /// Flat `(scene index, question index)` pairs.
    pub fn sample_ids(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.question_count());
        for (si, scene) in self.scenes.iter().enumerate() {
            for qi in 0..scene.questions.len() {
                out.push((si, qi));
            }
        }
        out
    }
}

/// Generation settings for a full corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub questions_per_type: usize,
    /// train/val/testdev/test fractions
    pub split_ratios: [f64; 4],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 17,
            scenes: 400,
            objects_min: 4,
            objects_max: 6,
            questions_per_type: 2,
            split_ratios: [0.7, 0.1, 0.1, 0.1],
        }
    }
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "val", "testdev", "test"];

/// Generate `cfg.scenes` scenes with questions and partition them into
/// the four splits, disjoint by scene id.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<DatasetSplit>> {
    if cfg.objects_min == 0 || cfg.objects_min > cfg.objects_max {
        return Err(Error::Contract("bad object count range".into()));
    }
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut rng = scene_rng(cfg.seed, "dataset");
    for i in 0..cfg.scenes {
        let scene_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
        let mut scene = generate_scene(scene_seed, n)?;
        let (questions, _skipped) = generate_questions(&scene, cfg.questions_per_type, cfg.seed);
        scene.questions = questions;
        scenes.push(scene);
    }
    let total = scenes.len();
    let mut bounds = [0usize; 4];
    let mut acc = 0.0;
    for (i, r) in cfg.split_ratios.iter().enumerate() {
        acc += r;
        bounds[i] = ((acc * total as f64).round() as usize).min(total);
    }
    bounds[3] = total;
    let mut splits = Vec::with_capacity(4);
    let mut start = 0;
    for (i, name) in SPLIT_NAMES.iter().enumerate() {
        let end = bounds[i];
        splits.push(DatasetSplit {
            name: name.to_string(),
            scenes: scenes[start..end].to_vec(),
        });
        start = end;
    }
    Ok(splits)
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    schema_version: u32,
    split: String,
    scenes: usize,
}

/// Write a split as JSONL: a header line, then one scene per line.
pub fn write_jsonl(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = JsonlHeader {
        schema_version: SCHEMA_VERSION,
        split: split.name.clone(),
        scenes: split.scenes.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for scene in &split.scenes {
        serde_json::to_writer(&mut w, scene)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL split, reporting malformed lines by 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<DatasetSplit> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing header line".into(),
        })??;
    let header: JsonlHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "schema version {} does not match expected {SCHEMA_VERSION}",
                header.schema_version
            ),
        });
    }
    let mut scenes = Vec::with_capacity(header.scenes);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if scene.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("scene schema version {}", scene.schema_version),
            });
        }
        scene.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        scenes.push(scene);
    }
    Ok(DatasetSplit {
        name: header.split,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene_bytes() {
        let a = generate_scene(42, 5).unwrap();
        let b = generate_scene(42, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn single_object_scene_is_valid() {
        let scene = generate_scene(7, 1).unwrap();
        assert_eq!(scene.objects.len(), 1);
        assert!(scene.edges.is_empty());
        scene.validate().unwrap();
    }

    #[test]
    fn spatial_edges_match_geometric_predicates() {
        // independent recomputation of the spatial predicates from boxes
        for seed in 0..200 {
            let scene = generate_scene(seed, 5).unwrap();
            for e in &scene.edges {
                let s = scene.object(e.source).unwrap().center();
                let t = scene.object(e.target).unwrap().center();
                match e.relation.as_str() {
                    "left-of" => assert!(s.0 < t.0, "seed {seed}"),
                    "right-of" => assert!(s.0 > t.0, "seed {seed}"),
                    "above" => assert!(s.1 < t.1, "seed {seed}"),
                    "below" => assert!(s.1 > t.1, "seed {seed}"),
                    "near" => {
                        let dist = ((s.0 - t.0).powi(2) + (s.1 - t.1).powi(2)).sqrt();
                        assert!(dist < NEAR_DISTANCE, "seed {seed}");
                    }
                    "holding" | "wearing" => {}
                    other => panic!("unexpected relation {other}"),
                }
            }
        }
    }

    #[test]
    fn features_deterministic_and_relation_free() {
        let scene = generate_scene(3, 4).unwrap();
        let a = derive_region_features(&scene, 16, 0.0, 9).unwrap();
        let b = derive_region_features(&scene, 16, 0.0, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.feature, y.feature);
        }
        // permuting edges cannot change features: they are a function of
        // (name, attributes, box) only
        let mut permuted = scene.clone();
        permuted.edges.reverse();
        let c = derive_region_features(&permuted, 16, 0.0, 9).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert_eq!(x.feature, y.feature);
        }
    }

    #[test]
    fn color_difference_moves_feature_beyond_noise_floor() {
        let attrs_a: Vec<String> = vec!["red".into(), "small".into(), "metal".into()];
        let attrs_b: Vec<String> = vec!["blue".into(), "small".into(), "metal".into()];
        let a = hash_embedding("dog", &attrs_a, 32);
        let b = hash_embedding("dog", &attrs_b, 32);
        let dot: Scalar = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: Scalar = a.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        let nb: Scalar = b.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        assert!(dot / (na * nb) < 0.99);
    }

    #[test]
    fn questions_cover_all_five_families() {
        let mut found = std::collections::HashSet::new();
        for seed in 0..40 {
            let scene = generate_scene(seed, 5).unwrap();
            let (questions, _) = generate_questions(&scene, 3, 1);
            for q in questions {
                found.insert(q.qtype);
            }
        }
        for t in QuestionType::ALL {
            assert!(found.contains(&t), "missing family {t:?}");
        }
    }

    #[test]
    fn verify_true_fact_is_yes() {
        // scenes with even ids start the verify toggle at `yes`
        let scene = generate_scene(4, 4).unwrap();
        let (questions, _) = generate_questions(&scene, 10, 1);
        let q = questions
            .iter()
            .find(|q| q.qtype == QuestionType::Verify && q.tokens[..2] == ["is", "the"])
            .expect("verify question");
        if q.answer == "yes" {
            let obj = scene.find_by_name(&q.tokens[2]).unwrap();
            assert_eq!(obj.color(), q.tokens[3]);
        } else {
            let obj = scene.find_by_name(&q.tokens[2]).unwrap();
            assert_ne!(obj.color(), q.tokens[3]);
        }
    }

    #[test]
    fn graph_probe_filter_matches_requires_graph_queries() {
        for seed in 0..30 {
            let scene = generate_scene(seed, 5).unwrap();
            let (questions, _) = generate_questions(&scene, 5, 1);
            for q in &questions {
                assert_eq!(
                    q.is_graph_probe(),
                    q.requires_graph && q.qtype == QuestionType::Query
                );
            }
        }
    }

    #[test]
    fn dataset_splits_disjoint_by_scene_id() {
        let cfg = GenConfig {
            scenes: 40,
            ..GenConfig::default()
        };
        let splits = generate_dataset(&cfg).unwrap();
        assert_eq!(splits.len(), 4);
        let mut seen = std::collections::HashSet::new();
        for split in &splits {
            for scene in &split.scenes {
                assert!(seen.insert(scene.scene_id), "duplicate scene id");
            }
        }
        assert_eq!(seen.len(), 40);
        assert_eq!(splits[0].scenes.len(), 28); // 70%
    }

    #[test]
    fn jsonl_round_trip_identity() {
        let cfg = GenConfig {
            scenes: 12,
            ..GenConfig::default()
        };
        let splits = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &splits[0]).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, splits[0]);
    }

    #[test]
    fn empty_split_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let split = DatasetSplit {
            name: "val".into(),
            scenes: vec![],
        };
        write_jsonl(&path, &split).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back = read_jsonl(&path).unwrap();
        assert!(back.scenes.is_empty());
        assert_eq!(back.name, "val");
    }

    #[test]
    fn corrupt_line_names_line_number() {
        let cfg = GenConfig {
            scenes: 8,
            ..GenConfig::default()
        };
        let splits = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &splits[0]).unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[6] = "{ this is not json".into();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_jsonl(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn schema_version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"schema_version\":99,\"split\":\"train\",\"scenes\":0}\n",
        )
        .unwrap();
        assert!(matches!(
            read_jsonl(&path).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }
}
