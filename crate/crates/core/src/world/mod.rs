//! Synthetic scene world: categories grouped into supercategories, attribute
//! assignments, feature vectors and template captions.

mod grammar;
mod io;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub use grammar::{parse_caption, Grammar, ParsedCaption, Piece, Template};
pub use io::{read_captions, read_scenes, write_captions, write_scenes, CaptionRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supercategory {
    pub name: String,
    pub categories: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub supercategories: Vec<Supercategory>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    /// Object counts; rendered as "a", "two", "three".
    pub counts: Vec<u8>,
    pub settings: Vec<String>,
    pub jitter_dim: usize,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let sc = |name: &str, cats: &[&str]| Supercategory {
            name: name.to_string(),
            categories: strings(cats),
        };
        Self {
            supercategories: vec![
                sc("animal", &["giraffe", "zebra", "elephant", "dog", "cat"]),
                sc("vehicle", &["car", "truck", "bicycle", "train", "boat"]),
                sc("food", &["pizza", "banana", "apple", "cake", "donut"]),
                sc("furniture", &["chair", "bed", "table", "lamp", "sofa"]),
                sc("sports", &["ball", "kite", "skateboard", "surfboard", "racket"]),
                sc("kitchenware", &["cup", "bowl", "bottle", "plate", "spoon"]),
            ],
            colors: strings(&["red", "blue", "green", "yellow", "black", "white", "brown", "orange"]),
            sizes: strings(&["small", "medium", "large"]),
            counts: vec![1, 2, 3],
            settings: strings(&["field", "street", "beach", "park", "room", "forest"]),
            jitter_dim: 8,
        }
    }
}

pub const COUNT_WORDS: [&str; 4] = ["zero", "a", "two", "three"];

pub fn count_word(count: u8) -> &'static str {
    COUNT_WORDS[count as usize]
}

pub fn plural(noun: &str) -> String {
    format!("{noun}s")
}

fn check_unique(field: &str, xs: &[String]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::config(field, "must be non-empty"));
    }
    let mut seen = HashSet::new();
    for x in xs {
        if x.is_empty() || x.contains(char::is_whitespace) || x.to_lowercase() != *x {
            return Err(Error::config(field, format!("{x:?} is not a single lowercase token")));
        }
        if !seen.insert(x) {
            return Err(Error::config(field, format!("duplicate value {x:?}")));
        }
    }
    Ok(())
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.supercategories.is_empty() {
            return Err(Error::config("supercategories", "must be non-empty"));
        }
        let names: Vec<String> = self.supercategories.iter().map(|s| s.name.clone()).collect();
        check_unique("supercategories", &names)?;
        for s in &self.supercategories {
            if s.categories.is_empty() {
                return Err(Error::config(
                    "supercategories.categories",
                    format!("supercategory {} has no categories", s.name),
                ));
            }
        }
        check_unique("categories", &self.categories())?;
        check_unique("colors", &self.colors)?;
        check_unique("sizes", &self.sizes)?;
        check_unique("settings", &self.settings)?;
        if self.counts.is_empty() {
            return Err(Error::config("counts", "must be non-empty"));
        }
        let mut seen = HashSet::new();
        for &c in &self.counts {
            if !(1..=3).contains(&c) || !seen.insert(c) {
                return Err(Error::config("counts", format!("counts must be distinct values in 1..=3, got {c}")));
            }
        }
        // Every surface term must be unambiguous for the caption parser.
        let mut terms: Vec<String> = Vec::new();
        for c in self.categories() {
            terms.push(plural(&c));
            terms.push(c);
        }
        terms.extend(self.colors.iter().cloned());
        terms.extend(self.sizes.iter().cloned());
        terms.extend(self.settings.iter().cloned());
        terms.extend(grammar::FUNCTION_WORDS.iter().map(|s| s.to_string()));
        terms.extend(["two", "three"].iter().map(|s| s.to_string()));
        let mut seen = HashSet::new();
        for t in &terms {
            if !seen.insert(t) {
                return Err(Error::config("schema", format!("term {t:?} used more than once")));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<String> {
        self.supercategories
            .iter()
            .flat_map(|s| s.categories.iter().cloned())
            .collect()
    }

    pub fn num_categories(&self) -> usize {
        self.supercategories.iter().map(|s| s.categories.len()).sum()
    }

    pub fn supercategory_of(&self, category: &str) -> Option<&str> {
        self.supercategories
            .iter()
            .find(|s| s.categories.iter().any(|c| c == category))
            .map(|s| s.name.as_str())
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.supercategories
            .iter()
            .flat_map(|s| s.categories.iter())
            .position(|c| c == category)
    }

    pub fn feature_dim(&self) -> usize {
        self.num_categories()
            + self.colors.len()
            + self.sizes.len()
            + self.counts.len()
            + self.settings.len()
            + self.jitter_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub color: String,
    pub size: String,
    pub count: u8,
    pub setting: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u32,
    pub category: String,
    pub supercategory: String,
    pub attributes: Attributes,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub scene_id: u32,
    pub captions: Vec<Vec<String>>,
}

/// Scenes with their captions and precomputed feature vectors.
#[derive(Clone, Debug)]
pub struct World {
    pub schema: AttributeSchema,
    pub scenes: Vec<Scene>,
    pub captions: Vec<CaptionSet>,
    features: Vec<Vec<f32>>,
    index: HashMap<u32, usize>,
}

impl World {
    pub fn new(schema: AttributeSchema, scenes: Vec<Scene>, captions: Vec<CaptionSet>) -> Result<Self> {
        schema.validate()?;
        if captions.len() != scenes.len() {
            return Err(Error::invalid(format!(
                "{} scenes but {} caption sets",
                scenes.len(),
                captions.len()
            )));
        }
        let features = scenes
            .iter()
            .map(|s| scene_to_features(s, &schema))
            .collect::<Result<Vec<_>>>()?;
        let index = scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        for (s, c) in scenes.iter().zip(&captions) {
            if s.id != c.scene_id {
                return Err(Error::invalid(format!(
                    "caption set for scene {} out of order (found {})",
                    s.id, c.scene_id
                )));
            }
        }
        Ok(Self {
            schema,
            scenes,
            captions,
            features,
            index,
        })
    }

    /// Generate scenes and captions from scratch.
    pub fn generate(schema: AttributeSchema, n_scenes: usize, split_fractions: [f64; 3], seed: u64) -> Result<Self> {
        let scenes = gen_world(&schema, n_scenes, split_fractions, seed)?;
        let grammar = Grammar::default();
        let root = Rng::new(seed).substream("captions");
        let captions = scenes
            .iter()
            .map(|s| gen_captions(s, &schema, &grammar, &mut root.substream_idx("scene", s.id as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(schema, scenes, captions)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Position of a scene id in [`World::scenes`].
    pub fn position(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn features(&self, pos: usize) -> &[f32] {
        &self.features[pos]
    }

    pub fn feature_dim(&self) -> usize {
        self.schema.feature_dim()
    }

    /// Positions of scenes in `split`, in id order.
    pub fn split_positions(&self, split: Split) -> Vec<usize> {
        (0..self.scenes.len())
            .filter(|&i| self.scenes[i].split == split)
            .collect()
    }
}

fn split_hash(seed: u64, id: u32) -> u64 {
    let mut r = Rng::new(seed).substream_idx("split", id as u64);
    r.next_u64()
}

/// Balanced scene generation.
///
/// Category labels are dealt round-robin (counts differ by at most one) and
/// shuffled; attributes are uniform. Splits come from ranking scene ids by a
/// seeded hash, so each id's split is a pure function of the id.
pub fn gen_world(schema: &AttributeSchema, n_scenes: usize, split_fractions: [f64; 3], seed: u64) -> Result<Vec<Scene>> {
    schema.validate()?;
    let n_cat = schema.num_categories();
    if n_scenes < 10 * n_cat {
        return Err(Error::invalid(format!(
            "n_scenes = {n_scenes} too small: need at least 10 x {n_cat} categories = {}",
            10 * n_cat
        )));
    }
    let total: f64 = split_fractions.iter().sum();
    if split_fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be in [0,1] and sum to 1, got {split_fractions:?}"
        )));
    }
    let root = Rng::new(seed).substream("world");
    let categories = schema.categories();
    let mut labels: Vec<usize> = (0..n_scenes).map(|i| i % n_cat).collect();
    root.substream("categories").shuffle(&mut labels);

    let mut ranked: Vec<u32> = (0..n_scenes as u32).collect();
    ranked.sort_by_key(|&id| (split_hash(seed, id), id));
    let n_train = (n_scenes as f64 * split_fractions[0]).round() as usize;
    let n_val = ((n_scenes as f64 * split_fractions[1]).round() as usize).min(n_scenes - n_train);
    let mut split_of = vec![Split::Test; n_scenes];
    for (rank, &id) in ranked.iter().enumerate() {
        split_of[id as usize] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut attr_rng = root.substream("attributes");
    let scenes = (0..n_scenes)
        .map(|i| {
            let category = categories[labels[i]].clone();
            let supercategory = schema.supercategory_of(&category).expect("known category").to_string();
            let attributes = Attributes {
                color: schema.colors[attr_rng.below(schema.colors.len())].clone(),
                size: schema.sizes[attr_rng.below(schema.sizes.len())].clone(),
                count: schema.counts[attr_rng.below(schema.counts.len())],
                setting: schema.settings[attr_rng.below(schema.settings.len())].clone(),
            };
            Scene {
                id: i as u32,
                category,
                supercategory,
                attributes,
                split: split_of[i],
            }
        })
        .collect();
    Ok(scenes)
}

fn one_hot_block(out: &mut Vec<f32>, values: &[String], value: &str, axis: &str) -> Result<()> {
    let idx = values
        .iter()
        .position(|v| v == value)
        .ok_or_else(|| Error::invalid(format!("unknown {axis} value {value:?}")))?;
    let start = out.len();
    out.resize(start + values.len(), 0.0);
    out[start + idx] = 1.0;
    Ok(())
}

/// One-hot blocks (category, color, size, count, setting) followed by a
/// per-scene jitter vector in [-0.1, 0.1] seeded by the scene id.
pub fn scene_to_features(scene: &Scene, schema: &AttributeSchema) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(schema.feature_dim());
    one_hot_block(&mut out, &schema.categories(), &scene.category, "category")?;
    if schema.supercategory_of(&scene.category) != Some(scene.supercategory.as_str()) {
        return Err(Error::invalid(format!(
            "scene {} has supercategory {:?} but category {:?} belongs elsewhere",
            scene.id, scene.supercategory, scene.category
        )));
    }
    let a = &scene.attributes;
    one_hot_block(&mut out, &schema.colors, &a.color, "color")?;
    one_hot_block(&mut out, &schema.sizes, &a.size, "size")?;
    let counts: Vec<String> = schema.counts.iter().map(|c| c.to_string()).collect();
    one_hot_block(&mut out, &counts, &a.count.to_string(), "count")?;
    one_hot_block(&mut out, &schema.settings, &a.setting, "setting")?;
    let mut jitter = Rng::new(scene.id as u64).substream("jitter");
    out.extend((0..schema.jitter_dim).map(|_| jitter.uniform_range(-0.1, 0.1)));
    Ok(out)
}

/// Five captions: the canonical template first, then four distinct others.
pub const CAPTIONS_PER_SCENE: usize = 5;

pub fn gen_captions(scene: &Scene, schema: &AttributeSchema, grammar: &Grammar, rng: &mut Rng) -> Result<CaptionSet> {
    const N: usize = CAPTIONS_PER_SCENE;
    if grammar.templates.len() < N {
        return Err(Error::invalid(format!(
            "grammar has {} templates, need {N} distinct ones",
            grammar.templates.len()
        )));
    }
    if schema.category_index(&scene.category).is_none() {
        return Err(Error::invalid(format!("unknown category {:?}", scene.category)));
    }
    let mut chosen = vec![0usize];
    let mut rest: Vec<usize> = (1..grammar.templates.len()).collect();
    rng.shuffle(&mut rest);
    chosen.extend(rest.into_iter().take(N - 1));
    let captions: Vec<Vec<String>> = chosen
        .iter()
        .map(|&t| grammar.templates[t].render(scene))
        .collect();
    let distinct: HashSet<&Vec<String>> = captions.iter().collect();
    if distinct.len() != N {
        return Err(Error::invalid(format!(
            "templates produced duplicate captions for scene {}",
            scene.id
        )));
    }
    Ok(CaptionSet {
        scene_id: scene.id,
        captions,
    })
}
