//! Referential-game episodes under the four distractor sampling policies.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::numerics::Rng;
use crate::world::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    /// Distractors drawn uniformly from the whole pool.
    Random,
    /// Distractors share the target's category.
    Category,
    /// Distractors share the target's supercategory.
    Supercategory,
    /// Distractors come from distinct categories other than the target's.
    #[serde(rename = "intercategory")]
    InterCategory,
}

impl Complexity {
    pub const ALL: [Complexity; 4] = [
        Complexity::Category,
        Complexity::Supercategory,
        Complexity::Random,
        Complexity::InterCategory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Complexity::Random => "random",
            Complexity::Category => "category",
            Complexity::Supercategory => "supercategory",
            Complexity::InterCategory => "intercategory",
        }
    }
}

impl std::fmt::Display for Complexity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Complexity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "random" => Ok(Complexity::Random),
            "category" => Ok(Complexity::Category),
            "supercategory" => Ok(Complexity::Supercategory),
            "intercategory" => Ok(Complexity::InterCategory),
            other => Err(Error::invalid(format!("unknown complexity {other:?}"))),
        }
    }
}

/// One game round. Scenes are positions into [`World::scenes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub target: usize,
    pub distractors: Vec<usize>,
    pub target_index: usize,
    pub complexity: Complexity,
}

impl Episode {
    /// Candidates in presentation order, target at `target_index`.
    pub fn candidates(&self) -> Vec<usize> {
        let mut c = self.distractors.clone();
        c.insert(self.target_index, self.target);
        c
    }
}

/// Scenes eligible as distractors, indexed by category and supercategory.
#[derive(Clone, Debug)]
pub struct ScenePool {
    positions: Vec<usize>,
    by_category: BTreeMap<String, Vec<usize>>,
    by_supercategory: HashMap<String, Vec<usize>>,
}

impl ScenePool {
    pub fn new(world: &World, positions: Vec<usize>) -> Self {
        let mut by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_supercategory: HashMap<String, Vec<usize>> = HashMap::new();
        for &p in &positions {
            let s = &world.scenes[p];
            by_category.entry(s.category.clone()).or_default().push(p);
            by_supercategory.entry(s.supercategory.clone()).or_default().push(p);
        }
        Self {
            positions,
            by_category,
            by_supercategory,
        }
    }

    pub fn all(world: &World) -> Self {
        Self::new(world, (0..world.len()).collect())
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

/// `d` distinct members of `group` other than `target`; if the group is too
/// small, every member once and then repeats.
fn sample_from_group(group: &[usize], target: usize, d: usize, rng: &mut Rng, what: &str) -> Result<Vec<usize>> {
    let others: Vec<usize> = group.iter().copied().filter(|&p| p != target).collect();
    if others.is_empty() {
        return Err(Error::invalid(format!("no {what} distractor available besides the target")));
    }
    if others.len() >= d {
        return Ok(rng.sample_indices(others.len(), d).into_iter().map(|i| others[i]).collect());
    }
    log::warn!(
        "{what} pool has {} scenes for {d} distractors; repeating distractors",
        others.len()
    );
    let mut out = others.clone();
    rng.shuffle(&mut out);
    while out.len() < d {
        out.push(others[rng.below(others.len())]);
    }
    Ok(out)
}

pub fn sample_distractors(
    world: &World,
    pool: &ScenePool,
    target: usize,
    complexity: Complexity,
    d: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::invalid("need at least one distractor"));
    }
    if pool.positions.is_empty() {
        return Err(Error::invalid("empty scene pool"));
    }
    let t = &world.scenes[target];
    match complexity {
        Complexity::Random => sample_from_group(&pool.positions, target, d, rng, "random"),
        Complexity::Category => {
            let group = pool.by_category.get(&t.category).map_or(&[][..], Vec::as_slice);
            sample_from_group(group, target, d, rng, "category")
        }
        Complexity::Supercategory => {
            let group = pool
                .by_supercategory
                .get(&t.supercategory)
                .map_or(&[][..], Vec::as_slice);
            sample_from_group(group, target, d, rng, "supercategory")
        }
        Complexity::InterCategory => {
            let n_cat = world.schema.num_categories();
            if d > n_cat - 1 {
                return Err(Error::invalid(format!(
                    "intercategory game with {d} distractors needs at least {} categories, schema has {n_cat}",
                    d + 1
                )));
            }
            let others: Vec<&Vec<usize>> = pool
                .by_category
                .iter()
                .filter(|(c, _)| **c != t.category)
                .map(|(_, v)| v)
                .collect();
            if others.len() < d {
                return Err(Error::invalid(format!(
                    "scene pool covers only {} other categories, need {d}",
                    others.len()
                )));
            }
            Ok(rng
                .sample_indices(others.len(), d)
                .into_iter()
                .map(|i| {
                    let members = others[i];
                    members[rng.below(members.len())]
                })
                .collect())
        }
    }
}

pub fn build_episode(
    world: &World,
    pool: &ScenePool,
    target: usize,
    complexity: Complexity,
    d: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let distractors = sample_distractors(world, pool, target, complexity, d, rng)?;
    let target_index = rng.below(d + 1);
    Ok(Episode {
        target,
        distractors,
        target_index,
        complexity,
    })
}

/// Debug record for `episodes.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub target_id: u32,
    pub distractor_ids: Vec<u32>,
    pub target_index: usize,
    pub complexity: Complexity,
}

pub fn write_episodes(path: &Path, world: &World, episodes: &[Episode]) -> Result<()> {
    let recs: Vec<EpisodeRecord> = episodes
        .iter()
        .map(|e| EpisodeRecord {
            target_id: world.scenes[e.target].id,
            distractor_ids: e.distractors.iter().map(|&p| world.scenes[p].id).collect(),
            target_index: e.target_index,
            complexity: e.complexity,
        })
        .collect();
    jsonl::write(path, &recs)
}
