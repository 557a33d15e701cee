//! Unsupervised translation between the emergent language and English:
//! denoising pre-training on English, shared denoising on both languages,
//! then iterative back-translation, with greedy decoding throughout.

mod model;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Language, Vocab, EOS, MASK};
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::jsonl;
use crate::numerics::checkpoint::restore_into;
use crate::world::Split;
use crate::numerics::functional::softmax_cross_entropy;
use crate::numerics::{load_checkpoint, save_checkpoint, AdamConfig, AdamState, CheckpointHeader, ParamStore, Rng};

pub use model::{allowed_mask, ModelConfig};
use model::{greedy, Fwd, Ids};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Chance that a token takes part in the local shuffle.
    pub shuffle_p: f64,
    pub dropout_p: f64,
    /// Chance that a surviving token is replaced by `<mask>`.
    pub blank_p: f64,
    /// No token moves more than this many positions.
    pub window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            shuffle_p: 0.1,
            dropout_p: 0.1,
            blank_p: 0.1,
            window: 3,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            shuffle_p: 0.0,
            dropout_p: 0.0,
            blank_p: 0.0,
            window: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("unmt.noise.shuffle_p", self.shuffle_p),
            ("unmt.noise.dropout_p", self.dropout_p),
            ("unmt.noise.blank_p", self.blank_p),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(f, format!("{v} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Drop, blank, then locally shuffle. Never returns an empty sequence.
pub fn add_noise(tokens: &[usize], cfg: &NoiseConfig, rng: &mut Rng) -> Vec<usize> {
    let mut kept: Vec<usize> = tokens.iter().copied().filter(|_| !rng.bernoulli(cfg.dropout_p)).collect();
    if kept.is_empty() {
        kept.extend(tokens.first().copied());
    }
    for t in kept.iter_mut() {
        if rng.bernoulli(cfg.blank_p) {
            *t = MASK;
        }
    }
    // key i + u with u in [0, k+1) bounds every displacement by k
    let k = cfg.window as f64 + 1.0;
    let mut keyed: Vec<(f64, usize, usize)> = kept
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let u = if rng.bernoulli(cfg.shuffle_p) { rng.uniform_f64() * k } else { 0.0 };
            (i as f64 + u, i, t)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|x| x.2).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnmtConfig {
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    /// Passes over the English training captions in phase 1.
    pub pretrain_epochs: usize,
    /// Passes over the EC training corpus in phase 2, each EC batch paired
    /// with one English batch.
    pub finetune_epochs: usize,
    /// Back-translation iterations in phase 3.
    pub bt_iterations: usize,
    /// Denoising batches per language after each back-translation step.
    pub denoise_per_bt: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub dropout: f32,
    pub grad_clip: f32,
    pub max_decode_len: usize,
    /// Held-out sentences used for the exact-match monitors.
    pub monitor_size: usize,
    /// Round-trip monitor period during phase 3.
    pub monitor_every: usize,
    pub seed: u64,
}

impl Default for UnmtConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            noise: NoiseConfig::default(),
            pretrain_epochs: 2,
            finetune_epochs: 2,
            bt_iterations: 300,
            denoise_per_bt: 1,
            batch_size: 32,
            lr: 1e-3,
            dropout: 0.1,
            grad_clip: 1.0,
            max_decode_len: 16,
            monitor_size: 200,
            monitor_every: 100,
            seed: 0,
        }
    }
}

impl UnmtConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.noise.validate()?;
        for (f, v) in [
            ("unmt.pretrain_epochs", self.pretrain_epochs),
            ("unmt.finetune_epochs", self.finetune_epochs),
            ("unmt.bt_iterations", self.bt_iterations),
            ("unmt.batch_size", self.batch_size),
            ("unmt.max_decode_len", self.max_decode_len),
            ("unmt.monitor_every", self.monitor_every),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("unmt.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("unmt.dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
    Backtranslate,
}

impl Phase {
    /// Phase that must have completed last before this one may run.
    fn prerequisite(self) -> Option<Phase> {
        match self {
            Phase::Pretrain => None,
            Phase::Finetune => Some(Phase::Pretrain),
            Phase::Backtranslate => Some(Phase::Finetune),
        }
    }
}

/// Completed phase. `fingerprint` hashes the previous stamp's fingerprint,
/// the phase and `config`, so the chain can be re-derived from the stamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStamp {
    pub phase: Phase,
    /// Fingerprint of the UnmtConfig the phase ran with.
    pub config: String,
    pub fingerprint: String,
}

fn chain_fingerprint(prev: &str, phase: Phase, config: &str) -> Result<String> {
    fingerprint(&(prev, phase, config))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "ec-en")]
    EcToEn,
    #[serde(rename = "en-ec")]
    EnToEc,
}

impl Direction {
    pub fn source(self) -> Language {
        match self {
            Direction::EcToEn => Language::Ec,
            Direction::EnToEc => Language::En,
        }
    }

    pub fn target(self) -> Language {
        self.source().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::EcToEn => "ec-en",
            Direction::EnToEc => "en-ec",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    ids: Ids,
    phases: Vec<PhaseStamp>,
}

impl Seq2SeqParams {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).substream("unmt/init");
        let ids = Ids::build(&mut store, &config, vocab.len(), &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            ids,
            phases: Vec::new(),
        })
    }

    pub fn phases(&self) -> &[PhaseStamp] {
        &self.phases
    }

    /// Embedding rows for `lang`'s tokens, flattened.
    pub fn embedding_rows(&self, lang: Language) -> Vec<f32> {
        let t = self.store.get(self.ids.tok());
        self.vocab.range(lang).flat_map(|r| t.row_slice(r).to_vec()).collect()
    }

    /// Fails unless the completed phases form an intact fingerprint chain
    /// ending in `phase`'s prerequisite.
    pub fn require_ready_for(&self, phase: Phase) -> Result<()> {
        let mut prev = String::new();
        for s in &self.phases {
            if chain_fingerprint(&prev, s.phase, &s.config)? != s.fingerprint {
                return Err(Error::State(format!(
                    "phase fingerprint for {:?} does not match its predecessor chain",
                    s.phase
                )));
            }
            prev.clone_from(&s.fingerprint);
        }
        let last = self.phases.last().map(|s| s.phase);
        let ok = match phase {
            // back-translation may resume from an earlier back-translation run
            Phase::Backtranslate => matches!(last, Some(Phase::Finetune | Phase::Backtranslate)),
            _ => last == phase.prerequisite(),
        };
        if !ok {
            let chain: Vec<String> = self
                .phases
                .iter()
                .map(|s| format!("{:?}@{}", s.phase, s.fingerprint))
                .collect();
            return Err(Error::State(format!(
                "{phase:?} needs parameters whose last completed phase is {:?}, found {last:?} (fingerprint chain: [{}])",
                phase.prerequisite(),
                chain.join(" -> ")
            )));
        }
        Ok(())
    }

    fn stamp(&mut self, phase: Phase, cfg: &UnmtConfig) -> Result<()> {
        let prev = self.phases.last().map(|s| s.fingerprint.clone()).unwrap_or_default();
        let config = fingerprint(cfg)?;
        self.phases.push(PhaseStamp {
            phase,
            fingerprint: chain_fingerprint(&prev, phase, &config)?,
            config,
        });
        Ok(())
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut h = CheckpointHeader::new("translator", &fingerprint(&self.config)?, seed);
        h.meta.insert("model".into(), serde_json::to_string(&self.config)?);
        h.meta.insert("vocab".into(), self.vocab.to_json()?);
        h.meta.insert("phases".into(), serde_json::to_string(&self.phases)?);
        save_checkpoint(path, &h, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, store) = load_checkpoint(path)?;
        if h.kind != "translator" {
            return Err(Error::State(format!("{} holds a {:?} checkpoint, expected translator", path.display(), h.kind)));
        }
        let meta = |k: &str| {
            h.meta
                .get(k)
                .ok_or_else(|| Error::State(format!("translator checkpoint lacks {k:?}")))
        };
        let config: ModelConfig = serde_json::from_str(meta("model")?)?;
        let vocab = Vocab::from_json(meta("vocab")?)?;
        let phases: Vec<PhaseStamp> = serde_json::from_str(meta("phases")?)?;
        let mut p = Self::new(config, vocab, 0)?;
        restore_into(&mut p.store, &store)?;
        p.phases = phases;
        Ok(p)
    }

    fn check_source(&self, tokens: &[usize], lang: Language) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty source sequence"));
        }
        let r = self.vocab.range(lang);
        if let Some(&bad) = tokens.iter().find(|t| !r.contains(t)) {
            let name = if bad < self.vocab.len() { self.vocab.token(bad).to_string() } else { format!("#{bad}") };
            return Err(Error::invalid(format!("token {name} is not a {} token", lang.as_str())));
        }
        Ok(())
    }
}

/// Token-level cross entropy of reconstructing `tgt` (without EOS) from `src`.
fn batch_loss<'a>(
    p: &'a Seq2SeqParams,
    src: &[Vec<usize>],
    src_lang: Language,
    tgt: &[Vec<usize>],
    tgt_lang: Language,
    drop_p: f32,
    rng: Option<&'a mut Rng>,
) -> Result<(Fwd<'a>, crate::numerics::Var)> {
    let mut f = Fwd::new(&p.store, &p.ids, &p.config, drop_p, rng);
    let enc = f.encode(src, src_lang)?;
    let dec_in: Vec<Vec<usize>> = tgt
        .iter()
        .map(|t| std::iter::once(tgt_lang.tag()).chain(t.iter().copied()).collect())
        .collect();
    let (hidden, t) = f.decode(&enc, &dec_in, tgt_lang)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, seq) in tgt.iter().enumerate() {
        for (i, &tok) in seq.iter().chain(std::iter::once(&EOS)).enumerate() {
            rows.push(s * t + i);
            targets.push(tok);
        }
    }
    let mask = allowed_mask(&p.vocab, tgt_lang);
    let z = f.logits(hidden, &rows, &mask);
    let loss = softmax_cross_entropy(&mut f.tape, z, &targets)?;
    Ok((f, loss))
}

/// Mean per-token loss of a batch without dropout or updates.
pub fn eval_loss(p: &Seq2SeqParams, src: &[Vec<usize>], src_lang: Language, tgt: &[Vec<usize>], tgt_lang: Language) -> Result<f64> {
    let (f, loss) = batch_loss(p, src, src_lang, tgt, tgt_lang, 0.0, None)?;
    Ok(f.tape.value(loss).item() as f64)
}

struct Trainer {
    adam: AdamState,
    clip: f32,
    drop_p: f32,
}

impl Trainer {
    fn new(p: &Seq2SeqParams, cfg: &UnmtConfig) -> Self {
        Self {
            adam: AdamState::new(&p.store, AdamConfig::with_lr(cfg.lr)),
            clip: cfg.grad_clip,
            drop_p: cfg.dropout,
        }
    }

    fn step(
        &mut self,
        p: &mut Seq2SeqParams,
        src: &[Vec<usize>],
        src_lang: Language,
        tgt: &[Vec<usize>],
        tgt_lang: Language,
        rng: &mut Rng,
    ) -> Result<f64> {
        let (loss, mut grads) = {
            let (f, loss) = batch_loss(p, src, src_lang, tgt, tgt_lang, self.drop_p, Some(rng))?;
            let l = f.tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Numerical {
                    op: "translator loss".into(),
                    detail: format!("diverged to {l}"),
                });
            }
            (l, f.tape.backward(loss)?)
        };
        if self.clip > 0.0 {
            grads.clip_global_norm(self.clip);
        }
        self.adam.step(&mut p.store, &grads)?;
        Ok(loss as f64)
    }
}

/// Training and held-out sentences of one language, as ids without EOS.
#[derive(Clone, Debug, Default)]
pub struct Monolingual {
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

impl Monolingual {
    /// Train and validation splits of a corpus.
    pub fn from_corpus(c: &Corpus) -> Self {
        Self {
            train: c.split_ids(Split::Train),
            val: c.split_ids(Split::Val),
        }
    }

    fn check(&self, lang: Language, vocab: &Vocab) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::invalid(format!("{} training corpus is empty", lang.as_str())));
        }
        let r = vocab.range(lang);
        for s in self.train.iter().chain(&self.val) {
            if s.is_empty() || s.iter().any(|t| !r.contains(t)) {
                return Err(Error::invalid(format!("{} corpus holds a sentence outside its vocabulary block", lang.as_str())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Mean training loss per epoch (phases 1-2) or per monitor window (phase 3).
    pub losses: Vec<f64>,
    /// Held-out exact-match rates at the end of the phase, keyed by monitor name.
    pub exact_match: BTreeMap<String, f64>,
    /// Phase 3 only: (iteration, round-trip rate) after each monitor window.
    pub round_trip_history: Vec<(usize, f64)>,
    pub skipped_batches: usize,
}

fn monitor_set(v: &[Vec<usize>], n: usize) -> &[Vec<usize>] {
    &v[..n.min(v.len())]
}

/// Rate at which greedy `lang -> lang` decoding of clean input reproduces it.
pub fn reconstruction_rate(p: &Seq2SeqParams, sents: &[Vec<usize>], lang: Language, max_len: usize) -> Result<f64> {
    if sents.is_empty() {
        return Ok(0.0);
    }
    let out = translate_batch_raw(p, sents, lang, lang, max_len)?;
    Ok(out.iter().zip(sents).filter(|(a, b)| a == b).count() as f64 / sents.len() as f64)
}

fn denoise_step(
    p: &mut Seq2SeqParams,
    tr: &mut Trainer,
    batch: &[Vec<usize>],
    lang: Language,
    noise: &NoiseConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let noisy: Vec<Vec<usize>> = batch.iter().map(|s| add_noise(s, noise, rng)).collect();
    tr.step(p, &noisy, lang, batch, lang, rng)
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn gather(v: &[Vec<usize>], idx: &[usize]) -> Vec<Vec<usize>> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn root_rng(cfg: &UnmtConfig, phase: &str) -> Rng {
    Rng::new(cfg.seed).substream("unmt").substream(phase)
}

/// Phase 1: denoising autoencoding on English.
pub fn pretrain(p: &mut Seq2SeqParams, en: &Monolingual, cfg: &UnmtConfig) -> Result<PhaseReport> {
    cfg.validate()?;
    p.require_ready_for(Phase::Pretrain)?;
    en.check(Language::En, &p.vocab)?;
    let root = root_rng(cfg, "pretrain");
    let mut tr = Trainer::new(p, cfg);
    let mut report = PhaseReport::default();
    for e in 0..cfg.pretrain_epochs {
        let mut rng = root.substream_idx("epoch", e as u64);
        let mut sum = 0.0;
        let batches = shuffled_batches(en.train.len(), cfg.batch_size, &mut rng);
        for b in &batches {
            sum += denoise_step(p, &mut tr, &gather(&en.train, b), Language::En, &cfg.noise, &mut rng)?;
        }
        report.losses.push(sum / batches.len() as f64);
        log::info!("pretrain epoch {e}: loss {:.4}", sum / batches.len() as f64);
    }
    let val = monitor_set(&en.val, cfg.monitor_size);
    report
        .exact_match
        .insert("en_reconstruction".into(), reconstruction_rate(p, val, Language::En, cfg.max_decode_len)?);
    p.stamp(Phase::Pretrain, cfg)?;
    Ok(report)
}

/// Phase 2: denoising on both languages, alternating one EC and one English batch.
pub fn finetune_shared(p: &mut Seq2SeqParams, en: &Monolingual, ec: &Monolingual, cfg: &UnmtConfig) -> Result<PhaseReport> {
    cfg.validate()?;
    p.require_ready_for(Phase::Finetune)?;
    en.check(Language::En, &p.vocab)?;
    ec.check(Language::Ec, &p.vocab)?;
    let root = root_rng(cfg, "finetune");
    let mut tr = Trainer::new(p, cfg);
    let mut report = PhaseReport::default();
    for e in 0..cfg.finetune_epochs {
        let mut rng = root.substream_idx("epoch", e as u64);
        let ec_batches = shuffled_batches(ec.train.len(), cfg.batch_size, &mut rng);
        let en_batches = shuffled_batches(en.train.len(), cfg.batch_size, &mut rng);
        let mut sum = 0.0;
        for (i, b) in ec_batches.iter().enumerate() {
            sum += denoise_step(p, &mut tr, &gather(&ec.train, b), Language::Ec, &cfg.noise, &mut rng)?;
            let eb = &en_batches[i % en_batches.len()];
            sum += denoise_step(p, &mut tr, &gather(&en.train, eb), Language::En, &cfg.noise, &mut rng)?;
        }
        let mean = sum / (2 * ec_batches.len()) as f64;
        report.losses.push(mean);
        log::info!("finetune epoch {e}: loss {mean:.4}");
    }
    let n = cfg.monitor_size;
    let m = cfg.max_decode_len;
    report
        .exact_match
        .insert("ec_reconstruction".into(), reconstruction_rate(p, monitor_set(&ec.val, n), Language::Ec, m)?);
    report
        .exact_match
        .insert("en_reconstruction".into(), reconstruction_rate(p, monitor_set(&en.val, n), Language::En, m)?);
    report
        .exact_match
        .insert("round_trip".into(), round_trip_rate(p, monitor_set(&ec.val, n), m)?);
    p.stamp(Phase::Finetune, cfg)?;
    Ok(report)
}

fn sample_batch(v: &[Vec<usize>], n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..n).map(|_| v[rng.below(v.len())].clone()).collect()
}

/// One back-translation update: decode real `tgt` sentences into the other
/// language, then train synthetic -> real. Empty decodes are dropped.
fn bt_step(
    p: &mut Seq2SeqParams,
    tr: &mut Trainer,
    real: &[Vec<usize>],
    lang: Language,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let synth = translate_batch_raw(p, real, lang, lang.other(), max_len)?;
    let (src, tgt): (Vec<Vec<usize>>, Vec<Vec<usize>>) = synth
        .into_iter()
        .zip(real.iter().cloned())
        .filter(|(s, _)| !s.is_empty())
        .unzip();
    if src.is_empty() {
        log::warn!("back-translation into {} produced only empty sentences; batch skipped", lang.other().as_str());
        return Ok(None);
    }
    tr.step(p, &src, lang.other(), &tgt, lang, rng).map(Some)
}

/// Phase 3: iterative back-translation in both directions interleaved with
/// denoising batches.
pub fn backtranslate_train(p: &mut Seq2SeqParams, en: &Monolingual, ec: &Monolingual, cfg: &UnmtConfig) -> Result<PhaseReport> {
    cfg.validate()?;
    p.require_ready_for(Phase::Backtranslate)?;
    en.check(Language::En, &p.vocab)?;
    ec.check(Language::Ec, &p.vocab)?;
    let mut rng = root_rng(cfg, "backtranslate");
    let mut tr = Trainer::new(p, cfg);
    let mut report = PhaseReport::default();
    let monitor = monitor_set(&ec.val, cfg.monitor_size);
    let (mut sum, mut count) = (0.0, 0usize);
    for it in 0..cfg.bt_iterations {
        let ec_b = sample_batch(&ec.train, cfg.batch_size, &mut rng);
        let en_b = sample_batch(&en.train, cfg.batch_size, &mut rng);
        for (batch, lang) in [(&ec_b, Language::Ec), (&en_b, Language::En)] {
            match bt_step(p, &mut tr, batch, lang, cfg.max_decode_len, &mut rng)? {
                Some(l) => {
                    sum += l;
                    count += 1;
                }
                None => report.skipped_batches += 1,
            }
        }
        for _ in 0..cfg.denoise_per_bt {
            let b = sample_batch(&ec.train, cfg.batch_size, &mut rng);
            sum += denoise_step(p, &mut tr, &b, Language::Ec, &cfg.noise, &mut rng)?;
            let b = sample_batch(&en.train, cfg.batch_size, &mut rng);
            sum += denoise_step(p, &mut tr, &b, Language::En, &cfg.noise, &mut rng)?;
            count += 2;
        }
        if (it + 1) % cfg.monitor_every == 0 || it + 1 == cfg.bt_iterations {
            let rt = round_trip_rate(p, monitor, cfg.max_decode_len)?;
            let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
            log::info!("backtranslate iteration {}: loss {mean:.4}, round trip {rt:.3}", it + 1);
            report.losses.push(mean);
            report.round_trip_history.push((it + 1, rt));
            (sum, count) = (0.0, 0);
        }
    }
    let n = cfg.monitor_size;
    let m = cfg.max_decode_len;
    report
        .exact_match
        .insert("ec_reconstruction".into(), reconstruction_rate(p, monitor_set(&ec.val, n), Language::Ec, m)?);
    report
        .exact_match
        .insert("en_reconstruction".into(), reconstruction_rate(p, monitor_set(&en.val, n), Language::En, m)?);
    report.exact_match.insert(
        "round_trip".into(),
        report.round_trip_history.last().map_or(0.0, |x| x.1),
    );
    p.stamp(Phase::Backtranslate, cfg)?;
    Ok(report)
}

const DECODE_CHUNK: usize = 64;

fn translate_batch_raw(p: &Seq2SeqParams, src: &[Vec<usize>], from: Language, to: Language, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let chunks: Vec<Vec<Vec<usize>>> = src
        .par_chunks(DECODE_CHUNK)
        .map(|c| greedy(&p.store, &p.ids, &p.config, &p.vocab, c, from, to, max_len))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Greedy translation of a batch, validated against the source language.
pub fn translate_batch(p: &Seq2SeqParams, src: &[Vec<usize>], direction: Direction, max_len: usize) -> Result<Vec<Vec<usize>>> {
    for s in src {
        p.check_source(s, direction.source())?;
    }
    translate_batch_raw(p, src, direction.source(), direction.target(), max_len)
}

pub fn translate(p: &Seq2SeqParams, tokens: &[usize], direction: Direction, max_len: usize) -> Result<Vec<usize>> {
    Ok(translate_batch(p, &[tokens.to_vec()], direction, max_len)?.remove(0))
}

/// EC -> EN -> EC. An empty English intermediate reconstructs to nothing.
pub fn round_trip_batch(p: &Seq2SeqParams, msgs: &[Vec<usize>], max_len: usize) -> Result<Vec<(Vec<usize>, bool)>> {
    let en = translate_batch(p, msgs, Direction::EcToEn, max_len)?;
    let keep: Vec<usize> = (0..en.len()).filter(|&i| !en[i].is_empty()).collect();
    let back = translate_batch_raw(p, &gather(&en, &keep), Language::En, Language::Ec, max_len)?;
    let mut out: Vec<(Vec<usize>, bool)> = vec![(Vec::new(), false); msgs.len()];
    for (i, b) in keep.into_iter().zip(back) {
        let matched = b == msgs[i];
        out[i] = (b, matched);
    }
    Ok(out)
}

pub fn round_trip(p: &Seq2SeqParams, message: &[usize], max_len: usize) -> Result<(Vec<usize>, bool)> {
    Ok(round_trip_batch(p, &[message.to_vec()], max_len)?.remove(0))
}

pub fn round_trip_rate(p: &Seq2SeqParams, msgs: &[Vec<usize>], max_len: usize) -> Result<f64> {
    if msgs.is_empty() {
        return Ok(0.0);
    }
    let r = round_trip_batch(p, msgs, max_len)?;
    Ok(r.iter().filter(|x| x.1).count() as f64 / msgs.len() as f64)
}

/// One line of translations.jsonl.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub scene_id: u32,
    pub direction: Direction,
    pub source_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
}

/// Translate `(scene_id, ids)` sources and pair them with their outputs.
pub fn translate_records(
    p: &Seq2SeqParams,
    sources: &[(u32, Vec<usize>)],
    direction: Direction,
    max_len: usize,
) -> Result<Vec<TranslationRecord>> {
    let src: Vec<Vec<usize>> = sources.iter().map(|s| s.1.clone()).collect();
    let out = translate_batch(p, &src, direction, max_len)?;
    Ok(sources
        .iter()
        .zip(out)
        .map(|((id, s), o)| TranslationRecord {
            scene_id: *id,
            direction,
            source_tokens: p.vocab.decode(s),
            output_tokens: p.vocab.decode(&o),
        })
        .collect())
}

pub fn write_translations(path: &Path, records: &[TranslationRecord]) -> Result<()> {
    jsonl::write(path, records)
}

pub fn read_translations(path: &Path) -> Result<Vec<TranslationRecord>> {
    jsonl::read(path)
}
