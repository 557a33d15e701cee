//! Pipeline stages. Each stage reads its inputs from the output tree and
//! writes its outputs back, so any stage can be rerun on its own.

use std::collections::BTreeMap;
use std::path::Path;

use eclab_core::agents::{
    self, evaluate_game, random_baseline_agents, read_ec_corpus, record_corpus, train_game, write_ec_corpus, AgentArch,
    AgentParams, EcRecord, EpochStats, TrainStatus,
};
use eclab_core::corpus::{build_joint_vocab, caption_corpus, Corpus, Vocab};
use eclab_core::ecmetrics::{ec_metrics, EcMetricsConfig};
use eclab_core::error::{Error, Result};
use eclab_core::mtmetrics::{self, gold_terms, mt_metrics, EvalPair};
use eclab_core::refgame::Complexity;
use eclab_core::unmt::{
    self, backtranslate_train, finetune_shared, pretrain, read_translations, round_trip_rate, translate_records,
    write_translations, Direction, Monolingual, PhaseReport, Seq2SeqParams, TranslationRecord,
};
use eclab_core::world::{self, Split, World};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::layout::{timed, write_atomic, write_text, DirLock, Layout, RunKey, RunLabel};

/// An opened output tree: the effective config, its paths and the lock.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    _lock: DirLock,
}

impl Ctx {
    /// Locks the output directory and pins the config. A tree created under
    /// a different config is refused. The pinned copy records `output_dir`
    /// as "." so that trees are comparable across locations.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.output_dir);
        let lock = DirLock::acquire(&layout)?;
        let text = ExperimentConfig {
            output_dir: ".".into(),
            ..cfg.clone()
        }
        .to_toml()?;
        match std::fs::read_to_string(layout.config()) {
            Ok(existing) if existing != text => {
                return Err(Error::State(format!(
                    "{} was created with a different config; pick another output_dir",
                    layout.root.display()
                )))
            }
            Ok(_) => {}
            Err(_) => write_text(&layout.config(), &text)?,
        }
        Ok(Self {
            cfg,
            layout,
            _lock: lock,
        })
    }

    /// Configured runs in (seed, label) order, optionally narrowed.
    pub fn runs(&self, label: Option<RunLabel>, seed: Option<u64>) -> Result<Vec<RunKey>> {
        self.select(self.cfg.labels(), label, seed)
    }

    pub fn translated_runs(&self, label: Option<RunLabel>, seed: Option<u64>) -> Result<Vec<RunKey>> {
        self.select(self.cfg.translated_labels(), label, seed)
    }

    fn select(&self, labels: Vec<RunLabel>, label: Option<RunLabel>, seed: Option<u64>) -> Result<Vec<RunKey>> {
        if let Some(l) = label {
            if !labels.contains(&l) {
                return Err(Error::invalid(format!("run {l} is not configured")));
            }
        }
        if let Some(s) = seed {
            if !self.cfg.game.seeds.contains(&s) {
                return Err(Error::invalid(format!("seed {s} is not configured")));
            }
        }
        let mut out = Vec::new();
        for &s in &self.cfg.game.seeds {
            for &l in &labels {
                if label.map_or(true, |x| x == l) && seed.map_or(true, |x| x == s) {
                    out.push(RunKey { label: l, seed: s });
                }
            }
        }
        Ok(out)
    }

    pub fn seeds(&self, seed: Option<u64>) -> Result<Vec<u64>> {
        Ok(self.runs(None, seed)?.into_iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().into_iter().collect())
    }

    pub fn arch(&self, world: &World) -> AgentArch {
        AgentArch {
            channel: self.cfg.game.channel,
            ..AgentArch::new(world.feature_dim())
        }
    }
}

/// Missing upstream artifact: a stage was skipped.
fn need(path: &Path, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::State(format!("{} is missing; run `eclab {command}` first", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |tmp| {
        let mut w = csv::Writer::from_path(tmp).map_err(|e| csv_err(tmp, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| csv_err(tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(tmp, e))
    })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("{other:?}"),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub scenes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn world_gen(ctx: &Ctx) -> Result<WorldSummary> {
    timed(&ctx.layout, "world gen", "", || {
        let w = &ctx.cfg.world;
        let world = World::generate(w.schema.clone(), w.n_scenes, w.split, w.seed)?;
        write_atomic(&ctx.layout.scenes(), |p| world::write_scenes(p, &world.scenes))?;
        write_atomic(&ctx.layout.captions(), |p| world::write_captions(p, &world.captions))?;
        Ok(summary(&world))
    })
}

fn summary(world: &World) -> WorldSummary {
    WorldSummary {
        scenes: world.len(),
        train: world.split_positions(Split::Train).len(),
        val: world.split_positions(Split::Val).len(),
        test: world.split_positions(Split::Test).len(),
    }
}

/// The world as persisted. A missing file is an input error.
pub fn load_world(ctx: &Ctx) -> Result<World> {
    let scenes = world::read_scenes(&ctx.layout.scenes())?;
    let captions = world::read_captions(&ctx.layout.captions())?;
    World::new(ctx.cfg.world.schema.clone(), scenes, captions)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    pub status: TrainStatus,
    pub initial_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Trains (or, for the baseline, just initializes) the agents of each run.
/// Runs with a saved checkpoint are skipped unless `force`.
pub fn game_train(ctx: &Ctx, runs: &[RunKey], force: bool) -> Result<()> {
    let world = load_world(ctx)?;
    let arch = ctx.arch(&world);
    for &run in runs {
        let path = ctx.layout.agents(run);
        if path.exists() && !force {
            log::info!("{run}: agents already saved, skipping");
            continue;
        }
        timed(&ctx.layout, "game train", &run.to_string(), || {
            let params = match run.label {
                RunLabel::Untrained => random_baseline_agents(arch, run.seed)?,
                RunLabel::Trained(c) => {
                    let out = train_game(&world, arch, &ctx.cfg.train_config(c, run.seed))?;
                    let rec = TrainRecord {
                        status: out.status,
                        initial_loss: out.initial_loss,
                        best_epoch: out.best_epoch,
                        history: out.history,
                    };
                    write_json(&ctx.layout.train_history(run), &rec)?;
                    out.params
                }
            };
            write_atomic(&path, |p| params.save(p, run.seed))
        })?;
    }
    Ok(())
}

fn load_agents(ctx: &Ctx, run: RunKey) -> Result<AgentParams> {
    let path = ctx.layout.agents(run);
    need(&path, "game train")?;
    AgentParams::load(&path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameEvalRow {
    pub agents: String,
    pub seed: u64,
    pub complexity: String,
    pub candidates: usize,
    pub accuracy: f64,
}

/// Accuracy on the fixed test targets. Trained agents play their own
/// complexity; untrained agents play every configured complexity. The
/// distractor stream depends on the world seed only, so every run sees the
/// same episodes for a given complexity.
pub fn game_eval(ctx: &Ctx, runs: &[RunKey]) -> Result<Vec<GameEvalRow>> {
    let world = load_world(ctx)?;
    let games: Vec<Complexity> = if ctx.cfg.game.complexities.is_empty() {
        Complexity::ALL.to_vec()
    } else {
        ctx.cfg.game.complexities.clone()
    };
    let mut rows = Vec::new();
    timed(&ctx.layout, "game eval", "", || {
        for &run in runs {
            let params = load_agents(ctx, run)?;
            let played = match run.label {
                RunLabel::Trained(c) => vec![c],
                RunLabel::Untrained => games.clone(),
            };
            for c in played {
                for &k in &ctx.cfg.game.eval_candidates {
                    rows.push(GameEvalRow {
                        agents: run.label.to_string(),
                        seed: run.seed,
                        complexity: c.to_string(),
                        candidates: k,
                        accuracy: evaluate_game(&params, &world, c, k, ctx.cfg.world.seed)?,
                    });
                }
            }
        }
        write_csv(&ctx.layout.game_eval(), &rows)
    })?;
    Ok(rows)
}

/// Records every scene's message per run and writes the joint vocabulary.
pub fn corpus_export(ctx: &Ctx, runs: &[RunKey]) -> Result<()> {
    let world = load_world(ctx)?;
    let mut ec_tokens: Vec<Vec<String>> = Vec::new();
    timed(&ctx.layout, "corpus export", "", || {
        for &run in runs {
            let params = load_agents(ctx, run)?;
            let records = record_corpus(&params, &world, &Split::ALL)?;
            ec_tokens.extend(records.iter().map(|r| r.message.tokens()));
            write_atomic(&ctx.layout.ec_corpus(run), |p| write_ec_corpus(p, &records))?;
        }
        let en: Vec<Vec<String>> = world.captions.iter().flat_map(|c| c.captions.clone()).collect();
        let vocab = build_joint_vocab(&en, &ec_tokens, ctx.cfg.game.channel.vocab_size, 1)?;
        write_atomic(&ctx.layout.vocab(), |p| vocab.save(p))
    })
}

fn load_vocab(ctx: &Ctx) -> Result<Vocab> {
    need(&ctx.layout.vocab(), "corpus export")?;
    Vocab::load(&ctx.layout.vocab())
}

fn load_ec(ctx: &Ctx, run: RunKey) -> Result<Vec<EcRecord>> {
    let path = ctx.layout.ec_corpus(run);
    need(&path, "corpus export")?;
    read_ec_corpus(&path, &ctx.cfg.game.channel)
}

fn ec_ids(records: &[EcRecord], vocab: &Vocab) -> Corpus {
    agents::ec_corpus(records, vocab)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
    Backtranslate,
    All,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct UnmtRunReport {
    pub finetune: Option<PhaseReport>,
    pub backtranslate: Option<PhaseReport>,
}

/// Phase 1 for one seed: denoising on English only, shared by every run of
/// that seed.
pub fn unmt_pretrain(ctx: &Ctx, seed: u64, force: bool) -> Result<()> {
    let path = ctx.layout.pretrained(seed);
    if path.exists() && !force {
        log::info!("seed {seed}: pretrained translator exists, skipping");
        return Ok(());
    }
    let world = load_world(ctx)?;
    let vocab = load_vocab(ctx)?;
    let cfg = ctx.cfg.unmt_config(seed);
    timed(&ctx.layout, "unmt pretrain", &format!("seed{seed}"), || {
        let en = Monolingual::from_corpus(&caption_corpus(&world, &vocab)?);
        let mut p = Seq2SeqParams::new(cfg.model.clone(), vocab, seed)?;
        let report = pretrain(&mut p, &en, &cfg)?;
        write_json(&ctx.layout.pretrain_report(seed), &report)?;
        write_atomic(&path, |f| p.save(f, seed))
    })
}

fn monolinguals(ctx: &Ctx, run: RunKey, world: &World, vocab: &Vocab) -> Result<(Monolingual, Monolingual)> {
    let en = Monolingual::from_corpus(&caption_corpus(world, vocab)?);
    let ec = Monolingual::from_corpus(&ec_ids(&load_ec(ctx, run)?, vocab));
    Ok((en, ec))
}

fn load_translator(path: &Path, command: &str) -> Result<Seq2SeqParams> {
    need(path, command)?;
    Seq2SeqParams::load(path)
}

/// Phase 2 for one run, starting from its seed's phase-1 checkpoint.
pub fn unmt_finetune(ctx: &Ctx, run: RunKey, force: bool) -> Result<()> {
    let path = ctx.layout.finetuned(run);
    if path.exists() && !force {
        log::info!("{run}: finetuned translator exists, skipping");
        return Ok(());
    }
    let start = ctx.layout.pretrained(run.seed);
    if !start.exists() {
        return Err(Error::State(format!(
            "{run}: phase 2 continues the phase-1 checkpoint {}, which does not exist; run `eclab unmt train --phase pretrain` first",
            start.display()
        )));
    }
    let mut p = Seq2SeqParams::load(&start)?;
    let world = load_world(ctx)?;
    let (en, ec) = monolinguals(ctx, run, &world, &p.vocab)?;
    let cfg = ctx.cfg.unmt_config(run.seed);
    timed(&ctx.layout, "unmt finetune", &run.to_string(), || {
        let report = finetune_shared(&mut p, &en, &ec, &cfg)?;
        write_json(
            &ctx.layout.unmt_report(run),
            &UnmtRunReport {
                finetune: Some(report),
                backtranslate: None,
            },
        )?;
        write_atomic(&path, |f| p.save(f, run.seed))
    })
}

/// Phase 3 for one run, starting from its phase-2 checkpoint.
pub fn unmt_backtranslate(ctx: &Ctx, run: RunKey, force: bool) -> Result<()> {
    let path = ctx.layout.translator(run);
    if path.exists() && !force {
        log::info!("{run}: translator exists, skipping");
        return Ok(());
    }
    let start = ctx.layout.finetuned(run);
    if !start.exists() {
        return Err(Error::State(format!(
            "{run}: phase 3 continues the phase-2 checkpoint {}, which does not exist; run `eclab unmt train --phase finetune` first",
            start.display()
        )));
    }
    let mut p = Seq2SeqParams::load(&start)?;
    let world = load_world(ctx)?;
    let (en, ec) = monolinguals(ctx, run, &world, &p.vocab)?;
    let cfg = ctx.cfg.unmt_config(run.seed);
    timed(&ctx.layout, "unmt backtranslate", &run.to_string(), || {
        let report = backtranslate_train(&mut p, &en, &ec, &cfg)?;
        let mut full: UnmtRunReport = read_json(&ctx.layout.unmt_report(run)).unwrap_or_default();
        full.backtranslate = Some(report);
        write_json(&ctx.layout.unmt_report(run), &full)?;
        write_atomic(&path, |f| p.save(f, run.seed))
    })
}

pub fn unmt_train(ctx: &Ctx, runs: &[RunKey], phase: PhaseArg, force: bool) -> Result<()> {
    let seeds: std::collections::BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
    if matches!(phase, PhaseArg::Pretrain | PhaseArg::All) {
        for &s in &seeds {
            unmt_pretrain(ctx, s, force)?;
        }
    }
    if matches!(phase, PhaseArg::Finetune | PhaseArg::All) {
        for &r in runs {
            unmt_finetune(ctx, r, force)?;
        }
    }
    if matches!(phase, PhaseArg::Backtranslate | PhaseArg::All) {
        for &r in runs {
            unmt_backtranslate(ctx, r, force)?;
        }
    }
    Ok(())
}

/// Test-split sources of one run: EC messages and one caption per scene.
struct TestSources {
    ec: Vec<(u32, Vec<usize>)>,
    en: Vec<(u32, Vec<usize>)>,
}

fn test_sources(ctx: &Ctx, run: RunKey, world: &World, vocab: &Vocab) -> Result<TestSources> {
    let ec = ec_ids(&load_ec(ctx, run)?, vocab)
        .split(Split::Test)
        .map(|r| (r.scene_id, r.ids.clone()))
        .collect();
    let k = ctx.cfg.report.en_source_caption;
    let en = world
        .split_positions(Split::Test)
        .into_iter()
        .map(|p| Ok((world.scenes[p].id, vocab.encode(&world.captions[p].captions[k])?)))
        .collect::<Result<_>>()?;
    Ok(TestSources { ec, en })
}

/// Greedy translations of the test split in both directions.
pub fn unmt_translate(ctx: &Ctx, runs: &[RunKey]) -> Result<()> {
    let world = load_world(ctx)?;
    for &run in runs {
        let p = load_translator(&ctx.layout.translator(run), "unmt train")?;
        p.require_ready_for(unmt::Phase::Backtranslate)?;
        timed(&ctx.layout, "unmt translate", &run.to_string(), || {
            let src = test_sources(ctx, run, &world, &p.vocab)?;
            let max_len = ctx.cfg.unmt.max_decode_len;
            let mut records = translate_records(&p, &src.ec, Direction::EcToEn, max_len)?;
            records.extend(translate_records(&p, &src.en, Direction::EnToEc, max_len)?);
            write_atomic(&ctx.layout.translations(run), |f| write_translations(f, &records))
        })?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTripRow {
    pub complexity: String,
    pub seed: u64,
    /// Translator state: `untrained`, `finetune` (after phase 2) or
    /// `backtranslate` (after phase 3).
    pub stage: String,
    pub exact_match: f64,
}

/// EC -> EN -> EC exact-match rates on the test messages for the untrained,
/// phase-2 and phase-3 translators of each run.
pub fn unmt_roundtrip(ctx: &Ctx, runs: &[RunKey]) -> Result<Vec<RoundTripRow>> {
    let world = load_world(ctx)?;
    let mut rows = Vec::new();
    timed(&ctx.layout, "unmt roundtrip", "", || {
        for &run in runs {
            let done = load_translator(&ctx.layout.translator(run), "unmt train")?;
            let mid = load_translator(&ctx.layout.finetuned(run), "unmt train")?;
            let fresh = Seq2SeqParams::new(done.config.clone(), done.vocab.clone(), run.seed)?;
            let msgs: Vec<Vec<usize>> = test_sources(ctx, run, &world, &done.vocab)?.ec.into_iter().map(|x| x.1).collect();
            for (stage, p) in [("untrained", &fresh), ("finetune", &mid), ("backtranslate", &done)] {
                rows.push(RoundTripRow {
                    complexity: run.label.to_string(),
                    seed: run.seed,
                    stage: stage.to_string(),
                    exact_match: round_trip_rate(p, &msgs, ctx.cfg.unmt.max_decode_len)?,
                });
            }
        }
        write_csv(&ctx.layout.roundtrip(), &rows)
    })?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcMetricRow {
    pub metric: String,
    pub value: f64,
    pub complexity: String,
    pub seed: u64,
}

pub fn eval_ec(ctx: &Ctx, runs: &[RunKey]) -> Result<Vec<EcMetricRow>> {
    let world = load_world(ctx)?;
    let mut rows = Vec::new();
    timed(&ctx.layout, "eval ec", "", || {
        for &run in runs {
            let records = load_ec(ctx, run)?;
            let mcfg = EcMetricsConfig {
                vocab_size: ctx.cfg.game.channel.vocab_size,
                topsim_pairs: ctx.cfg.report.topsim_pairs,
                mami_min_count: ctx.cfg.report.mami_min_count,
                seed: run.seed,
            };
            for (metric, value) in ec_metrics(&world, &records, &mcfg)? {
                rows.push(EcMetricRow {
                    metric,
                    value,
                    complexity: run.label.to_string(),
                    seed: run.seed,
                });
            }
        }
        write_csv(&ctx.layout.ec_metrics(), &rows)
    })?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtMetricRow {
    pub metric: String,
    pub value: f64,
    pub complexity: String,
    pub seed: u64,
    pub direction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRow {
    pub complexity: String,
    pub seed: u64,
    pub scene_id: u32,
    pub metric: String,
    pub value: f64,
}

/// Per-sentence EC -> EN scores kept for the sentence-level correlations.
pub const SENTENCE_METRICS: [&str; 4] = ["bleu", "meteor", "rouge_l", "grounding"];

fn strip_eos(tokens: &[String]) -> Vec<String> {
    tokens.iter().filter(|t| t.as_str() != "<eos>").cloned().collect()
}

/// Scores the saved translations. EC -> EN compares against the scene's
/// captions; EN -> EC compares against the scene's EC message with EOS
/// removed and reports no grounding score.
pub fn eval_mt(ctx: &Ctx, runs: &[RunKey]) -> Result<Vec<MtMetricRow>> {
    let world = load_world(ctx)?;
    let en_train: Vec<Vec<String>> = world
        .split_positions(Split::Train)
        .into_iter()
        .flat_map(|p| world.captions[p].captions.clone())
        .collect();
    let mut rows = Vec::new();
    let mut sentences = Vec::new();
    timed(&ctx.layout, "eval mt", "", || {
        for &run in runs {
            let path = ctx.layout.translations(run);
            need(&path, "unmt translate")?;
            let records: Vec<TranslationRecord> = read_translations(&path)?;
            let ec = load_ec(ctx, run)?;
            let ec_by_scene: BTreeMap<u32, Vec<String>> =
                ec.iter().map(|r| (r.scene_id, strip_eos(&r.message.tokens()))).collect();
            let ec_train: Vec<Vec<String>> = ec
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| strip_eos(&r.message.tokens()))
                .collect();
            for direction in [Direction::EcToEn, Direction::EnToEc] {
                let mut pairs = Vec::new();
                for r in records.iter().filter(|r| r.direction == direction) {
                    let pos = world
                        .position(r.scene_id)
                        .ok_or_else(|| Error::invalid(format!("{}: unknown scene {}", path.display(), r.scene_id)))?;
                    pairs.push(match direction {
                        Direction::EcToEn => EvalPair {
                            candidate: r.output_tokens.clone(),
                            references: world.captions[pos].captions.clone(),
                            gold: gold_terms(&world.scenes[pos]),
                        },
                        Direction::EnToEc => EvalPair {
                            candidate: strip_eos(&r.output_tokens),
                            references: vec![ec_by_scene
                                .get(&r.scene_id)
                                .cloned()
                                .ok_or_else(|| Error::invalid(format!("scene {} has no EC message", r.scene_id)))?],
                            gold: Vec::new(),
                        },
                    });
                }
                if pairs.is_empty() {
                    return Err(Error::invalid(format!("{} holds no {} translations", path.display(), direction.as_str())));
                }
                let train = if direction == Direction::EcToEn { &en_train } else { &ec_train };
                for (metric, value) in mt_metrics(&pairs, train, ctx.cfg.report.novelty_n)? {
                    if direction == Direction::EnToEc && metric == "grounding" {
                        continue;
                    }
                    rows.push(MtMetricRow {
                        metric,
                        value,
                        complexity: run.label.to_string(),
                        seed: run.seed,
                        direction: direction.as_str().to_string(),
                    });
                }
                if direction == Direction::EcToEn {
                    let ids = records.iter().filter(|r| r.direction == direction).map(|r| r.scene_id);
                    for (p, id) in pairs.iter().zip(ids) {
                        let scores = [
                            mtmetrics::bleu(&p.candidate, &p.references),
                            mtmetrics::meteor_lite(&p.candidate, &p.references),
                            mtmetrics::rouge_l(&p.candidate, &p.references),
                            mtmetrics::grounding_score(&p.candidate, &p.gold),
                        ];
                        for (m, v) in SENTENCE_METRICS.iter().zip(scores) {
                            sentences.push(SentenceRow {
                                complexity: run.label.to_string(),
                                seed: run.seed,
                                scene_id: id,
                                metric: m.to_string(),
                                value: v,
                            });
                        }
                    }
                }
            }
        }
        write_csv(&ctx.layout.mt_metrics(), &rows)?;
        write_csv(&ctx.layout.sentence_scores(), &sentences)
    })?;
    Ok(rows)
}
