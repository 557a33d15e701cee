//! Translation metrics: BLEU, a METEOR variant without synonymy, ROUGE-L,
//! Jaro, type-token ratio, n-gram novelty, the attribute grounding score,
//! and correlation tables across runs.
//!
//! Per-pair metrics other than BLEU take the maximum over references; BLEU
//! clips n-gram counts against all references jointly.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::ecmetrics::{pearson, spearman, Scored};
use crate::error::{Error, Result};
use crate::world::Scene;

pub type Tokens = [String];

const BLEU_ORDER: usize = 4;
const BLEU_FLOOR: f64 = 0.1;

fn ngram_counts(tokens: &Tokens, n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of BLEU for one or more segments.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn segment(candidate: &Tokens, references: &[Vec<String>]) -> Self {
        let mut s = Self {
            cand_len: candidate.len(),
            ..Self::default()
        };
        // closest reference length, ties to the shorter
        s.ref_len = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
            .unwrap_or(0);
        for n in 1..=BLEU_ORDER {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
            s.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for i in 0..BLEU_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU in [0, 100]. Zero match counts are floored at 0.1; orders with no
    /// candidate n-grams are left out of the geometric mean; no unigram match
    /// at all scores 0.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for i in 0..BLEU_ORDER {
            if self.totals[i] == 0 {
                continue;
            }
            let m = if self.matches[i] == 0 {
                BLEU_FLOOR
            } else {
                self.matches[i] as f64
            };
            log_sum += (m / self.totals[i] as f64).ln();
            orders += 1;
        }
        let bp = (1.0 - self.ref_len as f64 / self.cand_len as f64).min(0.0).exp();
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

pub fn bleu(candidate: &Tokens, references: &[Vec<String>]) -> f64 {
    BleuStats::segment(candidate, references).score()
}

/// Corpus BLEU from summed statistics.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in pairs {
        total.add(&BleuStats::segment(c, r));
    }
    total.score()
}

pub fn max_over_refs(metric: impl Fn(&Tokens, &Tokens) -> f64, candidate: &Tokens, references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| metric(candidate, r))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0)
}

fn stems(w: &str) -> Vec<&str> {
    let mut out = vec![w];
    for suf in ["s", "es", "ing", "ed"] {
        if let Some(s) = w.strip_suffix(suf) {
            if s.len() >= 2 {
                out.push(s);
            }
        }
    }
    out
}

fn stem_match(a: &str, b: &str) -> bool {
    let sb = stems(b);
    stems(a).iter().any(|x| sb.contains(x))
}

/// Single-reference METEOR: exact matches first, then stem matches, each
/// candidate token aligned to the first free reference token.
pub fn meteor_single(candidate: &Tokens, reference: &Tokens) -> f64 {
    let mut align: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut used = vec![false; reference.len()];
    for pass in 0..2 {
        for (i, c) in candidate.iter().enumerate() {
            if align[i].is_some() {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !used[j] && if pass == 0 { reference[j] == *c } else { stem_match(c, &reference[j]) }
            });
            if let Some(j) = hit {
                align[i] = Some(j);
                used[j] = true;
            }
        }
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    let (mf, p, r) = (m as f64, m as f64 / candidate.len() as f64, m as f64 / reference.len() as f64);
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / mf).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_lite(candidate: &Tokens, references: &[Vec<String>]) -> f64 {
    max_over_refs(meteor_single, candidate, references)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_single(candidate: &Tokens, reference: &Tokens) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l(candidate: &Tokens, references: &[Vec<String>]) -> f64 {
    max_over_refs(rouge_l_single, candidate, references)
}

/// Jaro similarity of two strings.
pub fn jaro(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);
    let mut b_used = vec![false; b.len()];
    let mut a_match = Vec::new();
    for (i, &c) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        if let Some(j) = (lo..hi).find(|&j| !b_used[j] && b[j] == c) {
            b_used[j] = true;
            a_match.push(c);
        }
    }
    let m = a_match.len();
    if m == 0 {
        return 0.0;
    }
    let b_match: Vec<char> = b.iter().zip(&b_used).filter(|(_, &u)| u).map(|(&c, _)| c).collect();
    let half_t = a_match.iter().zip(&b_match).filter(|(x, y)| x != y).count() as f64 / 2.0;
    let mf = m as f64;
    (mf / a.len() as f64 + mf / b.len() as f64 + (mf - half_t) / mf) / 3.0
}

pub fn jaro_tokens(candidate: &Tokens, reference: &Tokens) -> f64 {
    jaro(&candidate.join(" "), &reference.join(" "))
}

/// Unique tokens over total tokens across all translations.
pub fn ttr(translations: &[Vec<String>]) -> Result<f64> {
    let total: usize = translations.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::invalid("type-token ratio of an empty corpus"));
    }
    let types: HashSet<&String> = translations.iter().flatten().collect();
    Ok(types.len() as f64 / total as f64)
}

/// Fraction of translation n-grams (with multiplicity) that never occur in
/// the training corpus.
pub fn novelty_ngrams(translations: &[Vec<String>], train: &[Vec<String>], n: usize) -> Result<Scored> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let seen: HashSet<&[String]> = train.iter().flat_map(|s| s.windows(n)).collect();
    let mut total = 0usize;
    let mut novel = 0usize;
    for t in translations {
        for g in t.windows(n) {
            total += 1;
            if !seen.contains(g) {
                novel += 1;
            }
        }
    }
    if total == 0 {
        return Ok(Scored::degenerate(0.0));
    }
    Ok(Scored::ok(novel as f64 / total as f64))
}

/// Category and attribute words a faithful caption of `scene` would carry.
pub fn gold_terms(scene: &Scene) -> Vec<String> {
    vec![
        scene.category.clone(),
        scene.attributes.color.clone(),
        scene.attributes.size.clone(),
        scene.attributes.setting.clone(),
    ]
}

/// Share of `gold` terms present in the candidate; a plural `s` on a
/// candidate token also counts.
pub fn grounding_score(candidate: &Tokens, gold: &[String]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let hit = gold
        .iter()
        .filter(|g| {
            candidate
                .iter()
                .any(|c| c == *g || c.strip_suffix('s').is_some_and(|s| s == g.as_str()))
        })
        .count();
    hit as f64 / gold.len() as f64
}

/// One scored translation.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub gold: Vec<String>,
}

/// Corpus-level metric summary in a fixed order: corpus BLEU, mean per-pair
/// METEOR / ROUGE-L / Jaro / grounding, TTR and n-gram novelty against
/// `train`.
pub fn mt_metrics(pairs: &[EvalPair], train: &[Vec<String>], novelty_n: usize) -> Result<Vec<(String, f64)>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no translations to score"));
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        return Err(Error::invalid(format!("translation {:?} has no references", p.candidate)));
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&EvalPair) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let bl: Vec<(Vec<String>, Vec<Vec<String>>)> =
        pairs.iter().map(|p| (p.candidate.clone(), p.references.clone())).collect();
    let cands: Vec<Vec<String>> = pairs.iter().map(|p| p.candidate.clone()).collect();
    Ok(vec![
        ("bleu".into(), corpus_bleu(&bl)),
        ("meteor".into(), mean(&|p| meteor_lite(&p.candidate, &p.references))),
        ("rouge_l".into(), mean(&|p| rouge_l(&p.candidate, &p.references))),
        ("jaro".into(), mean(&|p| max_over_refs(jaro_tokens, &p.candidate, &p.references))),
        ("grounding".into(), mean(&|p| grounding_score(&p.candidate, &p.gold))),
        ("ttr".into(), ttr(&cands).unwrap_or(0.0)),
        ("novelty".into(), novelty_ngrams(&cands, train, novelty_n)?.value),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub names: Vec<String>,
    pub pearson: Vec<Vec<f64>>,
    pub spearman: Vec<Vec<f64>>,
    /// Columns with zero variance; their rows and columns are NaN.
    pub flagged: Vec<String>,
}

pub fn correlation_report(columns: &[(String, Vec<f64>)]) -> Result<CorrelationReport> {
    let rows = columns.first().map_or(0, |c| c.1.len());
    if rows < 3 {
        return Err(Error::invalid(format!("correlations need at least 3 observations, got {rows}")));
    }
    if let Some(c) = columns.iter().find(|c| c.1.len() != rows) {
        return Err(Error::invalid(format!("column {} has {} values, expected {rows}", c.0, c.1.len())));
    }
    let k = columns.len();
    let flat = |f: &dyn Fn(&[f64], &[f64]) -> Option<f64>| -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| f(&columns[i].1, &columns[j].1).unwrap_or(f64::NAN))
                    .collect()
            })
            .collect()
    };
    let flagged = columns
        .iter()
        .filter(|(_, v)| pearson(v, v).is_none())
        .map(|(n, _)| n.clone())
        .collect();
    Ok(CorrelationReport {
        names: columns.iter().map(|c| c.0.clone()).collect(),
        pearson: flat(&pearson),
        spearman: flat(&spearman),
        flagged,
    })
}

impl CorrelationReport {
    /// Square CSV of one matrix: a header row of metric names, then one row
    /// per metric led by its name.
    pub fn square_csv(&self, spearman: bool) -> String {
        let m = if spearman { &self.spearman } else { &self.pearson };
        let mut s = format!("metric,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(m) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        s
    }
}
