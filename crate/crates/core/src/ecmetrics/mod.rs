//! Metrics over emergent-language corpora: vocabulary usage, entropy,
//! novelty, topographic similarity, disentanglement, (m)AMI and the
//! message-to-concept classifier.
//!
//! Messages are content-symbol sequences; EOS never enters a metric.
//! Entropies are in bits.

pub mod info;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::agents::EcRecord;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::world::{count_word, Split, World};

pub use info::{ami, entropy_bits, expected_mutual_information, mutual_information_bits};

/// A metric value with a flag for inputs where it is undefined and set to a
/// conventional value instead.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    pub fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    pub fn degenerate(value: f64) -> Self {
        Self {
            value,
            degenerate: true,
        }
    }
}

pub type Msg = Vec<usize>;

/// Fraction of the `v` symbols that occur at least once.
pub fn vocab_usage(messages: &[Msg], v: usize) -> f64 {
    if v == 0 {
        return 0.0;
    }
    let used: HashSet<usize> = messages.iter().flatten().copied().filter(|&s| s < v).collect();
    used.len() as f64 / v as f64
}

/// Entropy in bits of the empirical whole-message distribution.
pub fn message_entropy(messages: &[Msg]) -> Result<f64> {
    if messages.is_empty() {
        return Err(Error::invalid("entropy of an empty message set"));
    }
    Ok(entropy_bits(messages))
}

/// Fraction of test messages that never occur in `train`.
pub fn message_novelty(test: &[Msg], train: &[Msg]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("novelty of an empty test set"));
    }
    let seen: HashSet<&Msg> = train.iter().collect();
    Ok(test.iter().filter(|m| !seen.contains(m)).count() as f64 / test.len() as f64)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Spearman correlation between Euclidean feature distances and message edit
/// distances. All unordered pairs are used when there are at most
/// `max_pairs`; otherwise `max_pairs` pairs are sampled from `rng`.
pub fn topsim(features: &[&[f32]], messages: &[Msg], max_pairs: usize, rng: &mut Rng) -> Result<Scored> {
    let n = messages.len();
    if features.len() != n {
        return Err(Error::invalid(format!("{} feature rows for {n} messages", features.len())));
    }
    if n < 3 {
        return Err(Error::invalid("topographic similarity needs at least 3 items"));
    }
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total <= max_pairs {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        (0..max_pairs)
            .map(|_| {
                let i = rng.below(n);
                let mut j = rng.below(n - 1);
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let di: Vec<f64> = pairs.iter().map(|&(i, j)| euclidean(features[i], features[j])).collect();
    let dm: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| levenshtein(&messages[i], &messages[j]) as f64)
        .collect();
    Ok(match spearman(&di, &dm) {
        Some(r) => Scored::ok(r),
        None => Scored::degenerate(0.0),
    })
}

/// Mean over units with positive entropy of
/// `(MI(unit; a*) - MI(unit; b*)) / H(unit)`, `a*`, `b*` the two attributes
/// most informative about the unit.
fn disentanglement(units: &[Vec<usize>], attributes: &[Vec<usize>]) -> Result<f64> {
    if attributes.len() < 2 {
        return Err(Error::invalid("disentanglement needs at least 2 attribute axes"));
    }
    let mut sum = 0.0;
    let mut k = 0usize;
    for u in units {
        let h = entropy_bits(u);
        if h <= 1e-12 {
            continue;
        }
        let mut mis: Vec<f64> = attributes.iter().map(|a| mutual_information_bits(u, a)).collect();
        mis.sort_by(|a, b| b.total_cmp(a));
        sum += (mis[0] - mis[1]) / h;
        k += 1;
    }
    Ok(if k == 0 { 0.0 } else { sum / k as f64 })
}

fn check_axes(messages: &[Msg], attributes: &[Vec<usize>]) -> Result<()> {
    if let Some(a) = attributes.iter().find(|a| a.len() != messages.len()) {
        return Err(Error::invalid(format!("attribute axis has {} values for {} messages", a.len(), messages.len())));
    }
    Ok(())
}

/// Bag-of-symbols disentanglement; the unit is each symbol's count per
/// message. `attributes` holds one value vector per axis.
pub fn bosdis(messages: &[Msg], attributes: &[Vec<usize>], v: usize) -> Result<f64> {
    check_axes(messages, attributes)?;
    let units: Vec<Vec<usize>> = (0..v)
        .map(|s| messages.iter().map(|m| m.iter().filter(|&&x| x == s).count()).collect())
        .collect();
    disentanglement(&units, attributes)
}

/// Positional disentanglement; the unit is the symbol at each position.
pub fn posdis(messages: &[Msg], attributes: &[Vec<usize>]) -> Result<f64> {
    check_axes(messages, attributes)?;
    let len = messages.iter().map(Vec::len).max().unwrap_or(0);
    const ABSENT: usize = usize::MAX;
    let units: Vec<Vec<usize>> = (0..len)
        .map(|p| messages.iter().map(|m| m.get(p).copied().unwrap_or(ABSENT)).collect())
        .collect();
    disentanglement(&units, attributes)
}

/// Mean AMI between message identity and the presence indicator of each
/// concept occurring in at least `min_count` items and absent from at least
/// one.
pub fn mami(messages: &[Msg], concept_sets: &[Vec<String>], min_count: usize) -> Result<f64> {
    if messages.len() != concept_sets.len() {
        return Err(Error::invalid("messages and concept sets differ in length"));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for set in concept_sets {
        let uniq: BTreeSet<&str> = set.iter().map(String::as_str).collect();
        for c in uniq {
            *freq.entry(c).or_default() += 1;
        }
    }
    let n = messages.len();
    let valid: Vec<&str> = freq
        .into_iter()
        .filter(|&(_, k)| k >= min_count.max(1) && k < n)
        .map(|(c, _)| c)
        .collect();
    if valid.is_empty() {
        return Err(Error::invalid("no valid concepts for mAMI"));
    }
    let mut total = 0.0;
    for c in &valid {
        let indicator: Vec<bool> = concept_sets.iter().map(|s| s.iter().any(|x| x == c)).collect();
        total += ami(messages, &indicator)?.value;
    }
    Ok(total / valid.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub macro_f1: f64,
    /// Dominance ratios at 50, 70 and 90 percent.
    pub dominance: [f64; 3],
    pub train_messages: usize,
}

fn majority<'a>(counts: &HashMap<&'a str, usize>) -> (&'a str, usize) {
    counts
        .iter()
        .map(|(&c, &k)| (c, k))
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .expect("non-empty counts")
}

/// Maps each message to its majority training concept (ties to the
/// lexicographically smallest concept; unseen messages to the global
/// majority) and scores test pairs by macro F1 over all gold and predicted
/// concepts. Dominance ratios are over distinct training messages.
pub fn concept_classifier<M: Hash + Eq>(train: &[(M, String)], test: &[(M, String)]) -> Result<ClassifierReport> {
    if train.is_empty() {
        return Err(Error::invalid("concept classifier needs training pairs"));
    }
    let mut table: HashMap<&M, HashMap<&str, usize>> = HashMap::new();
    let mut global: HashMap<&str, usize> = HashMap::new();
    for (m, c) in train {
        *table.entry(m).or_default().entry(c.as_str()).or_default() += 1;
        *global.entry(c.as_str()).or_default() += 1;
    }
    let fallback = majority(&global).0;
    let predict: HashMap<&M, &str> = table.iter().map(|(m, cs)| (*m, majority(cs).0)).collect();

    let mut dominance = [0.0; 3];
    for cs in table.values() {
        let total: usize = cs.values().sum();
        let top = majority(cs).1 as f64 / total as f64;
        for (d, t) in dominance.iter_mut().zip([0.5, 0.7, 0.9]) {
            if top > t {
                *d += 1.0;
            }
        }
    }
    for d in &mut dominance {
        *d /= table.len() as f64;
    }

    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fneg: BTreeMap<&str, usize> = BTreeMap::new();
    for (m, gold) in test {
        let p = predict.get(m).copied().unwrap_or(fallback);
        if p == gold {
            *tp.entry(p).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fneg.entry(gold.as_str()).or_default() += 1;
        }
    }
    let labels: BTreeSet<&str> = tp.keys().chain(fp.keys()).chain(fneg.keys()).copied().collect();
    let macro_f1 = if labels.is_empty() {
        0.0
    } else {
        labels
            .iter()
            .map(|l| {
                let t = *tp.get(l).unwrap_or(&0) as f64;
                let denom = 2.0 * t + *fp.get(l).unwrap_or(&0) as f64 + *fneg.get(l).unwrap_or(&0) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * t / denom
                }
            })
            .sum::<f64>()
            / labels.len() as f64
    };
    Ok(ClassifierReport {
        macro_f1,
        dominance,
        train_messages: table.len(),
    })
}

/// Names of the attribute axes used for disentanglement, in the order of
/// [`LabeledMessages::axes`].
pub const AXES: [&str; 5] = ["category", "color", "size", "count", "setting"];

/// Messages aligned with their scenes' features and attributes.
#[derive(Clone, Debug)]
pub struct LabeledMessages {
    pub messages: Vec<Msg>,
    pub positions: Vec<usize>,
    pub splits: Vec<Split>,
    /// One value vector per entry of [`AXES`].
    pub axes: Vec<Vec<usize>>,
    pub categories: Vec<String>,
    pub supercategories: Vec<String>,
    pub concepts: Vec<Vec<String>>,
}

impl LabeledMessages {
    pub fn new(world: &World, records: &[EcRecord]) -> Result<Self> {
        let s = &world.schema;
        let idx = |xs: &[String], x: &str| xs.iter().position(|y| y == x);
        let mut out = Self {
            messages: Vec::with_capacity(records.len()),
            positions: Vec::with_capacity(records.len()),
            splits: Vec::with_capacity(records.len()),
            axes: vec![Vec::with_capacity(records.len()); AXES.len()],
            categories: Vec::new(),
            supercategories: Vec::new(),
            concepts: Vec::new(),
        };
        for r in records {
            let pos = world
                .position(r.scene_id)
                .ok_or_else(|| Error::invalid(format!("scene {} not in world", r.scene_id)))?;
            let sc = &world.scenes[pos];
            let a = &sc.attributes;
            let values = [
                s.category_index(&sc.category),
                idx(&s.colors, &a.color),
                idx(&s.sizes, &a.size),
                Some(a.count as usize),
                idx(&s.settings, &a.setting),
            ];
            for (axis, v) in out.axes.iter_mut().zip(values) {
                axis.push(v.ok_or_else(|| Error::invalid(format!("scene {} has attributes outside the schema", sc.id)))?);
            }
            out.messages.push(r.message.symbols.clone());
            out.positions.push(pos);
            out.splits.push(r.split);
            out.categories.push(sc.category.clone());
            out.supercategories.push(sc.supercategory.clone());
            out.concepts.push(vec![
                format!("category:{}", sc.category),
                format!("supercategory:{}", sc.supercategory),
                format!("color:{}", a.color),
                format!("size:{}", a.size),
                format!("count:{}", count_word(a.count)),
                format!("setting:{}", a.setting),
            ]);
        }
        Ok(out)
    }

    fn in_split(&self, split: Split) -> Vec<usize> {
        (0..self.messages.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct EcMetricsConfig {
    pub vocab_size: usize,
    pub topsim_pairs: usize,
    pub mami_min_count: usize,
    pub seed: u64,
}

/// Every EC metric for one corpus, as `(name, value)` in a fixed order.
/// Corpus-level metrics use all records; novelty compares test against
/// train messages; the classifier trains on train and scores test.
pub fn ec_metrics(world: &World, records: &[EcRecord], cfg: &EcMetricsConfig) -> Result<Vec<(String, f64)>> {
    let lm = LabeledMessages::new(world, records)?;
    if lm.messages.is_empty() {
        return Err(Error::invalid("empty EC corpus"));
    }
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut put = |k: &str, v: f64| out.push((k.to_string(), v));
    put("vu", vocab_usage(&lm.messages, cfg.vocab_size));
    put("entropy", message_entropy(&lm.messages)?);
    let train = lm.in_split(Split::Train);
    let test = lm.in_split(Split::Test);
    let pick = |ix: &[usize]| -> Vec<Msg> { ix.iter().map(|&i| lm.messages[i].clone()).collect() };
    let novelty = if test.is_empty() {
        f64::NAN
    } else {
        message_novelty(&pick(&test), &pick(&train))?
    };
    put("novelty", novelty);
    let feats: Vec<&[f32]> = lm.positions.iter().map(|&p| world.features(p)).collect();
    let mut rng = Rng::new(cfg.seed).substream("ecmetrics/topsim");
    put("topsim", topsim(&feats, &lm.messages, cfg.topsim_pairs, &mut rng)?.value);
    put("bosdis", bosdis(&lm.messages, &lm.axes, cfg.vocab_size)?);
    put("posdis", posdis(&lm.messages, &lm.axes)?);
    put("ami", ami(&lm.messages, &lm.categories)?.value);
    put("mami", mami(&lm.messages, &lm.concepts, cfg.mami_min_count)?);
    let pairs = |ix: &[usize], labels: &[String]| -> Vec<(Msg, String)> {
        ix.iter().map(|&i| (lm.messages[i].clone(), labels[i].clone())).collect()
    };
    if !train.is_empty() {
        let by_cat = concept_classifier(&pairs(&train, &lm.categories), &pairs(&test, &lm.categories))?;
        let by_super = concept_classifier(&pairs(&train, &lm.supercategories), &pairs(&test, &lm.supercategories))?;
        put("concept_f1", by_cat.macro_f1);
        put("dominance_50", by_super.dominance[0]);
        put("dominance_70", by_super.dominance[1]);
        put("dominance_90", by_super.dominance[2]);
    }
    Ok(out)
}
