//! Sender and Receiver over a discrete channel, infoNCE training and EC
//! corpus recording.
//!
//! Both agents embed scenes with one shared MLP encoder. The sender unrolls a
//! GRU for `L` steps, emitting one straight-through Gumbel sample per step;
//! the receiver reads the one-hot symbols with its own GRU and scores each
//! candidate by a dot product in a shared space.

mod gru;

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{self, Corpus, Language, Vocab};
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::jsonl;
use crate::numerics::{
    functional::cross_entropy_value, gumbel_st_sample, load_checkpoint, save_checkpoint, softmax_cross_entropy,
    AdamConfig, AdamState, Axis, CheckpointHeader, ParamId, ParamStore, Rng, Tape, Tensor, Var,
};
use crate::refgame::{build_episode, Complexity, Episode, ScenePool};
use crate::world::{Split, World};

pub use gru::GruCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub vocab_size: usize,
    pub message_length: usize,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            message_length: 6,
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("channel.vocab_size", "must be at least 2"));
        }
        if self.message_length < 1 {
            return Err(Error::config("channel.message_length", "must be at least 1"));
        }
        Ok(())
    }
}

/// `L` content symbols; the EOS marker is implicit and always last.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Message {
    pub symbols: Vec<usize>,
}

impl Message {
    pub const EOS: &'static str = "<eos>";

    pub fn new(symbols: Vec<usize>, channel: &ChannelSpec) -> Result<Self> {
        if symbols.len() != channel.message_length {
            return Err(Error::invalid(format!(
                "message has {} symbols, channel length is {}",
                symbols.len(),
                channel.message_length
            )));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s >= channel.vocab_size) {
            return Err(Error::invalid(format!("symbol {s} outside vocabulary of {}", channel.vocab_size)));
        }
        Ok(Self { symbols })
    }

    /// Length including the trailing EOS.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut t: Vec<String> = self.symbols.iter().map(|&s| corpus::ec_symbol(s)).collect();
        t.push(Self::EOS.to_string());
        t
    }

    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let (last, body) = tokens
            .split_last()
            .ok_or_else(|| Error::invalid("empty message"))?;
        if last != Self::EOS {
            return Err(Error::invalid("message must end with <eos>"));
        }
        let symbols = body
            .iter()
            .map(|t| {
                t.strip_prefix('s')
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::invalid(format!("bad EC symbol {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if symbols.is_empty() {
            return Err(Error::invalid("message has no content symbols"));
        }
        Ok(Self { symbols })
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

impl Serialize for Message {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Message::from_tokens(&tokens).map_err(serde::de::Error::custom)
    }
}

/// Layer sizes. The defaults follow the reference architecture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentArch {
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub channel: ChannelSpec,
}

impl AgentArch {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            encoder_hidden: 64,
            embedding: 50,
            hidden: 20,
            channel: ChannelSpec::default(),
        }
    }
}

/// Shared scene encoder: `feature_dim -> hidden (relu) -> embedding`, the
/// embedding layer-normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct SenderIds {
    encoder: EncoderIds,
    h0_w: ParamId,
    h0_b: ParamId,
    sos: ParamId,
    gru: GruCell,
    out_w: ParamId,
    out_b: ParamId,
    sym_emb: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ReceiverIds {
    encoder: EncoderIds,
    sym_emb: ParamId,
    gru: GruCell,
    msg_proj: ParamId,
    cand_proj: ParamId,
    inv_temp: ParamId,
}

#[derive(Clone, Debug)]
pub struct AgentParams {
    pub arch: AgentArch,
    pub store: ParamStore,
    sender: SenderIds,
    receiver: ReceiverIds,
}

/// Sender sampling mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { temperature: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenderOutput {
    pub message: Message,
    /// Per-position symbol distributions (train mode only).
    pub soft: Option<Vec<Vec<f32>>>,
}

impl AgentParams {
    pub fn new(arch: AgentArch, seed: u64) -> Result<Self> {
        arch.channel.validate()?;
        if arch.feature_dim == 0 || arch.encoder_hidden == 0 || arch.embedding == 0 || arch.hidden == 0 {
            return Err(Error::config("agents", "layer sizes must be positive"));
        }
        let mut rng = Rng::new(seed).substream("agents/init");
        let mut s = ParamStore::new();
        let (f, eh, e, h, v) = (
            arch.feature_dim,
            arch.encoder_hidden,
            arch.embedding,
            arch.hidden,
            arch.channel.vocab_size,
        );
        let encoder = EncoderIds {
            w1: s.add_xavier("encoder.w1", f, eh, &mut rng),
            b1: s.add_const("encoder.b1", &[1, eh], 0.0),
            w2: s.add_xavier("encoder.w2", eh, e, &mut rng),
            b2: s.add_const("encoder.b2", &[1, e], 0.0),
        };
        let sender = SenderIds {
            encoder,
            h0_w: s.add_normal("sender.h0_w", &[e, h], 0.5, &mut rng),
            h0_b: s.add_const("sender.h0_b", &[1, h], 0.0),
            sos: s.add_normal("sender.sos", &[1, e], 0.1, &mut rng),
            gru: GruCell::new(&mut s, "sender.gru", e, h, &mut rng),
            out_w: s.add_xavier("sender.out_w", h, v, &mut rng),
            out_b: s.add_const("sender.out_b", &[1, v], 0.0),
            sym_emb: s.add_normal("sender.sym_emb", &[v, e], 1.0, &mut rng),
        };
        // High recurrent gain: untrained senders then map nearby scenes to
        // unrelated symbol sequences instead of one shared message.
        for w in s.get_mut(sender.gru.w_hh).data_mut() {
            *w *= 8.0;
        }
        let receiver = ReceiverIds {
            encoder,
            sym_emb: s.add_normal("receiver.sym_emb", &[v, e], 0.1, &mut rng),
            gru: GruCell::new(&mut s, "receiver.gru", e, h, &mut rng),
            msg_proj: s.add_xavier("receiver.msg_proj", h, e, &mut rng),
            cand_proj: s.add_xavier("receiver.cand_proj", e, e, &mut rng),
            inv_temp: s.add_const("receiver.inv_temp", &[1, 1], 1.0),
        };
        Ok(Self {
            arch,
            store: s,
            sender,
            receiver,
        })
    }

    pub fn channel(&self) -> &ChannelSpec {
        &self.arch.channel
    }

    pub fn sender_encoder(&self) -> EncoderIds {
        self.sender.encoder
    }

    pub fn receiver_encoder(&self) -> EncoderIds {
        self.receiver.encoder
    }

    fn check_features(&self, rows: usize, data_len: usize) -> Result<()> {
        if data_len != rows * self.arch.feature_dim {
            return Err(Error::Shape {
                context: "scene features",
                expected: vec![rows, self.arch.feature_dim],
                actual: vec![data_len],
            });
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape, feats: Var) -> Var {
        let e = self.sender.encoder;
        let (w1, b1) = (tape.param(&self.store, e.w1), tape.param(&self.store, e.b1));
        let (w2, b2) = (tape.param(&self.store, e.w2), tape.param(&self.store, e.b2));
        let h = tape.matmul(feats, w1);
        let h = tape.add(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2);
        let o = tape.add(o, b2);
        tape.layer_norm(o, 1e-5)
    }

    /// Unrolls the sender on embedded targets `[B, E]`; returns one one-hot
    /// `[B, V]` per position and the per-position logits.
    fn sender_graph(
        &self,
        tape: &mut Tape,
        emb: Var,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let s = &self.sender;
        let b = tape.value(emb).rows();
        let (h0_w, h0_b) = (tape.param(&self.store, s.h0_w), tape.param(&self.store, s.h0_b));
        let h = tape.matmul(emb, h0_w);
        let h = tape.add(h, h0_b);
        let mut h = tape.tanh(h);
        let sos = tape.param(&self.store, s.sos);
        let mut x = tape.embedding(sos, &vec![0; b]);
        let (out_w, out_b) = (tape.param(&self.store, s.out_w), tape.param(&self.store, s.out_b));
        let sym_emb = tape.param(&self.store, s.sym_emb);
        let mut onehots = Vec::with_capacity(self.arch.channel.message_length);
        let mut logits_all = Vec::with_capacity(self.arch.channel.message_length);
        for _ in 0..self.arch.channel.message_length {
            h = s.gru.step(tape, &self.store, x, h);
            let logits = tape.matmul(h, out_w);
            let logits = tape.add(logits, out_b);
            let sym = match mode {
                Mode::Eval => gumbel_st_sample(tape, logits, 1.0, None)?,
                Mode::Train { temperature } => gumbel_st_sample(tape, logits, temperature, rng.as_deref_mut())?,
            };
            x = tape.matmul(sym, sym_emb);
            onehots.push(sym);
            logits_all.push(logits);
        }
        Ok((onehots, logits_all))
    }

    /// Receiver message embedding `[B, E]` from one-hot symbols.
    fn receiver_message(&self, tape: &mut Tape, onehots: &[Var]) -> Var {
        let r = &self.receiver;
        let b = tape.value(onehots[0]).rows();
        let sym_emb = tape.param(&self.store, r.sym_emb);
        let mut h = tape.constant(Tensor::zeros(&[b, self.arch.hidden]));
        for &oh in onehots {
            let x = tape.matmul(oh, sym_emb);
            h = r.gru.step(tape, &self.store, x, h);
        }
        let proj = tape.param(&self.store, r.msg_proj);
        tape.matmul(h, proj)
    }

    fn candidate_space(&self, tape: &mut Tape, emb: Var) -> Var {
        let proj = tape.param(&self.store, self.receiver.cand_proj);
        tape.matmul(emb, proj)
    }

    /// Logits `[B, K]` from message vectors `[B, E]` and slot-major candidate
    /// vectors `[K*B, E]`.
    fn episode_logits(&self, tape: &mut Tape, msg: Var, cands: Var, k: usize) -> Var {
        let b = tape.value(msg).rows();
        let cols: Vec<Var> = (0..k)
            .map(|slot| {
                let c = tape.slice(cands, Axis::Rows, slot * b, b);
                let p = tape.mul(c, msg);
                tape.sum_rows(p)
            })
            .collect();
        let logits = tape.concat(&cols, Axis::Cols);
        let it = tape.param(&self.store, self.receiver.inv_temp);
        tape.mul(logits, it)
    }

    /// Builds the full game graph for a batch of episodes with equal
    /// candidate counts; returns the `[B, K]` logits.
    fn game_graph(
        &self,
        tape: &mut Tape,
        world: &World,
        episodes: &[Episode],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let b = episodes.len();
        let k = episodes[0].distractors.len() + 1;
        let f = self.arch.feature_dim;
        let mut data = Vec::with_capacity((b + k * b) * f);
        for e in episodes {
            data.extend_from_slice(world.features(e.target));
        }
        let cands: Vec<Vec<usize>> = episodes.iter().map(Episode::candidates).collect();
        for slot in 0..k {
            for c in &cands {
                data.extend_from_slice(world.features(c[slot]));
            }
        }
        self.check_features(b + k * b, data.len())?;
        let feats = tape.constant(Tensor::matrix(b + k * b, f, data));
        let emb = self.encode(tape, feats);
        let target_emb = tape.slice(emb, Axis::Rows, 0, b);
        let cand_emb = tape.slice(emb, Axis::Rows, b, k * b);
        let (onehots, _) = self.sender_graph(tape, target_emb, mode, rng)?;
        let msg = self.receiver_message(tape, &onehots);
        let cand = self.candidate_space(tape, cand_emb);
        Ok(self.episode_logits(tape, msg, cand, k))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut h = CheckpointHeader::new("agents", &fingerprint(&self.arch)?, seed);
        h.meta.insert("arch".into(), serde_json::to_string(&self.arch)?);
        save_checkpoint(path, &h, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, store) = load_checkpoint(path)?;
        if h.kind != "agents" {
            return Err(Error::State(format!("{} holds a {:?} checkpoint, expected agents", path.display(), h.kind)));
        }
        let arch: AgentArch = serde_json::from_str(
            h.meta
                .get("arch")
                .ok_or_else(|| Error::State("agents checkpoint lacks its architecture".into()))?,
        )?;
        let mut p = Self::new(arch, 0)?;
        crate::numerics::checkpoint::restore_into(&mut p.store, &store)?;
        Ok(p)
    }
}

fn message_from_onehots(tape: &Tape, onehots: &[Var], row: usize) -> Message {
    Message {
        symbols: onehots
            .iter()
            .map(|&v| crate::numerics::tensor::argmax(tape.value(v).row_slice(row)))
            .collect(),
    }
}

/// Sender message for one scene.
pub fn sender_forward(params: &AgentParams, features: &[f32], mode: Mode, rng: Option<&mut Rng>) -> Result<SenderOutput> {
    params.check_features(1, features.len())?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(features.to_vec()));
    let emb = params.encode(&mut tape, x);
    let (onehots, logits) = params.sender_graph(&mut tape, emb, mode, rng)?;
    let message = message_from_onehots(&tape, &onehots, 0);
    let soft = match mode {
        Mode::Eval => None,
        Mode::Train { .. } => Some(
            logits
                .iter()
                .map(|&l| {
                    let mut row = tape.value(l).row_slice(0).to_vec();
                    crate::numerics::tape::softmax_in_place(&mut row);
                    row
                })
                .collect(),
        ),
    };
    Ok(SenderOutput { message, soft })
}

/// Eval-mode messages for many scenes, batched and fanned out over threads.
pub fn sender_messages(params: &AgentParams, features: &[&[f32]]) -> Result<Vec<Message>> {
    let chunks: Vec<Result<Vec<Message>>> = features
        .par_chunks(256)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * params.arch.feature_dim);
            for f in chunk {
                data.extend_from_slice(f);
            }
            params.check_features(chunk.len(), data.len())?;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(chunk.len(), params.arch.feature_dim, data));
            let emb = params.encode(&mut tape, x);
            let (onehots, _) = params.sender_graph(&mut tape, emb, Mode::Eval, None)?;
            Ok((0..chunk.len()).map(|r| message_from_onehots(&tape, &onehots, r)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(features.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Receiver logits over `candidate_features` for `message`.
pub fn receiver_score(params: &AgentParams, message: &Message, candidate_features: &[&[f32]]) -> Result<Vec<f32>> {
    if candidate_features.len() < 2 {
        return Err(Error::invalid(format!(
            "receiver needs at least 2 candidates, got {}",
            candidate_features.len()
        )));
    }
    let ch = params.channel();
    Message::new(message.symbols.clone(), ch)?;
    let mut tape = Tape::new();
    let onehots: Vec<Var> = message
        .symbols
        .iter()
        .map(|&s| tape.constant(Tensor::one_hot(ch.vocab_size, s).reshape(&[1, ch.vocab_size]).expect("one-hot row")))
        .collect();
    let msg = params.receiver_message(&mut tape, &onehots);
    let mut data = Vec::new();
    for f in candidate_features {
        data.extend_from_slice(f);
    }
    params.check_features(candidate_features.len(), data.len())?;
    let feats = tape.constant(Tensor::matrix(candidate_features.len(), params.arch.feature_dim, data));
    let emb = params.encode(&mut tape, feats);
    let cand = params.candidate_space(&mut tape, emb);
    // [K, E] x [E, 1]
    let scores = tape.matmul_t(cand, msg, false, true);
    let it = tape.param(&params.store, params.receiver.inv_temp);
    let scores = tape.mul(scores, it);
    Ok(tape.value(scores).data().to_vec())
}

pub fn random_baseline_agents(arch: AgentArch, seed: u64) -> Result<AgentParams> {
    AgentParams::new(arch, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub complexity: Complexity,
    pub distractors: usize,
    pub temperature_start: f32,
    pub temperature_end: f32,
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-3,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            complexity: Complexity::Random,
            distractors: 9,
            temperature_start: 1.0,
            temperature_end: 0.5,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |ok: bool, f: &str| if ok { Ok(()) } else { Err(Error::config(format!("game.{f}"), "must be positive")) };
        pos(self.batch_size > 0, "batch_size")?;
        pos(self.lr > 0.0, "lr")?;
        pos(self.max_epochs > 0, "max_epochs")?;
        pos(self.patience >= 1, "patience")?;
        pos(self.distractors > 0, "distractors")?;
        pos(self.temperature_start > 0.0 && self.temperature_end > 0.0, "temperature")?;
        pos(self.grad_clip > 0.0, "grad_clip")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub temperature: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Ok,
    /// Validation accuracy never rose 5 points above chance.
    NearChance,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AgentParams,
    pub history: Vec<EpochStats>,
    pub initial_loss: f64,
    pub best_epoch: usize,
    pub status: TrainStatus,
}

fn episodes_for(
    world: &World,
    pool: &ScenePool,
    targets: &[usize],
    complexity: Complexity,
    d: usize,
    rng: &mut Rng,
) -> Result<Vec<Episode>> {
    targets
        .iter()
        .map(|&t| build_episode(world, pool, t, complexity, d, rng))
        .collect()
}

/// Mean loss and accuracy in eval mode.
fn score_episodes(params: &AgentParams, world: &World, episodes: &[Episode]) -> Result<(f64, f64)> {
    let parts: Vec<Result<(f64, usize)>> = episodes
        .par_chunks(256)
        .map(|chunk| {
            let mut tape = Tape::new();
            let logits = params.game_graph(&mut tape, world, chunk, Mode::Eval, None)?;
            let lv = tape.value(logits);
            let mut loss = 0.0;
            let mut correct = 0;
            for (i, e) in chunk.iter().enumerate() {
                let row = lv.row_slice(i);
                loss += cross_entropy_value(row, e.target_index)? as f64;
                if crate::numerics::tensor::argmax(row) == e.target_index {
                    correct += 1;
                }
            }
            Ok((loss, correct))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    let n = episodes.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains sender and receiver jointly; returns the best-validation parameters.
pub fn train_game(world: &World, arch: AgentArch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train = world.split_positions(Split::Train);
    let val = world.split_positions(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("world needs non-empty train and val splits"));
    }
    let root = Rng::new(config.seed).substream("game").substream(config.complexity.as_str());
    let mut params = AgentParams::new(arch, config.seed)?;
    let mut adam = AdamState::new(&params.store, AdamConfig::with_lr(config.lr));
    let train_pool = ScenePool::new(world, train.clone());
    let eval_pool = ScenePool::all(world);
    let val_episodes = episodes_for(
        world,
        &eval_pool,
        &val,
        config.complexity,
        config.distractors,
        &mut root.substream("val"),
    )?;

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (config.max_epochs * steps_per_epoch).max(2);
    let tau = |step: usize| {
        let frac = (step as f32 / (total_steps - 1) as f32).min(1.0);
        config.temperature_start + (config.temperature_end - config.temperature_start) * frac
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut best_acc: f64 = 0.0;
    let mut since_best = 0;
    let mut initial_loss = f64::NAN;
    let mut step = 0;
    for epoch in 0..config.max_epochs {
        let mut rng = root.substream_idx("epoch", epoch as u64);
        let mut order = train.clone();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut temperature = tau(step);
        for batch in order.chunks(config.batch_size) {
            temperature = tau(step);
            let episodes = episodes_for(world, &train_pool, batch, config.complexity, config.distractors, &mut rng)?;
            let targets: Vec<usize> = episodes.iter().map(|e| e.target_index).collect();
            let mut tape = Tape::new();
            let logits = params.game_graph(&mut tape, world, &episodes, Mode::Train { temperature }, Some(&mut rng))?;
            let loss = softmax_cross_entropy(&mut tape, logits, &targets)?;
            let lv = tape.value(loss).item() as f64;
            if step == 0 {
                initial_loss = lv;
            }
            loss_sum += lv * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            grads.clip_global_norm(config.grad_clip);
            adam.step(&mut params.store, &grads)?;
            step += 1;
        }
        let (val_loss, val_acc) = score_episodes(&params, world, &val_episodes)?;
        log::info!(
            "game {} epoch {epoch}: train loss {:.4}, val loss {val_loss:.4}, val acc {val_acc:.3}",
            config.complexity,
            loss_sum / train.len() as f64
        );
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_acc,
            temperature,
        });
        best_acc = best_acc.max(val_acc);
        if best.as_ref().map_or(true, |(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, params.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    params.store = store;
    let chance = 1.0 / (config.distractors + 1) as f64;
    let status = if best_acc > chance + 0.05 {
        TrainStatus::Ok
    } else {
        log::warn!(
            "{} game: validation accuracy {best_acc:.3} never exceeded chance {chance:.3} + 0.05",
            config.complexity
        );
        TrainStatus::NearChance
    };
    Ok(TrainOutcome {
        params,
        history,
        initial_loss,
        best_epoch,
        status,
    })
}

/// Passes over the test targets per evaluation, each with fresh distractors.
pub const EVAL_ROUNDS: usize = 10;

/// Episodes over the fixed test-target list with `n_candidates` candidates,
/// [`EVAL_ROUNDS`] per target.
pub fn eval_episodes(world: &World, complexity: Complexity, n_candidates: usize, seed: u64) -> Result<Vec<Episode>> {
    if n_candidates < 2 {
        return Err(Error::invalid("need at least 2 candidates"));
    }
    let targets = world.split_positions(Split::Test);
    if targets.is_empty() {
        return Err(Error::invalid("world has an empty test split"));
    }
    let mut rng = Rng::new(seed)
        .substream("eval")
        .substream(complexity.as_str())
        .substream_idx("candidates", n_candidates as u64);
    let pool = ScenePool::all(world);
    let mut out = Vec::with_capacity(targets.len() * EVAL_ROUNDS);
    for _ in 0..EVAL_ROUNDS {
        out.extend(episodes_for(world, &pool, &targets, complexity, n_candidates - 1, &mut rng)?);
    }
    Ok(out)
}

/// Fraction of episodes whose predicted index equals the target index.
pub fn accuracy(episodes: &[Episode], predictions: &[usize]) -> f64 {
    assert_eq!(episodes.len(), predictions.len());
    let correct = episodes.iter().zip(predictions).filter(|(e, &p)| e.target_index == p).count();
    correct as f64 / episodes.len().max(1) as f64
}

pub fn predict(params: &AgentParams, world: &World, episodes: &[Episode]) -> Result<Vec<usize>> {
    let parts: Vec<Result<Vec<usize>>> = episodes
        .par_chunks(256)
        .map(|chunk| {
            let mut tape = Tape::new();
            let logits = params.game_graph(&mut tape, world, chunk, Mode::Eval, None)?;
            Ok(tape.value(logits).argmax_rows())
        })
        .collect();
    let mut out = Vec::with_capacity(episodes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate_game(
    params: &AgentParams,
    world: &World,
    complexity: Complexity,
    n_candidates: usize,
    seed: u64,
) -> Result<f64> {
    let episodes = eval_episodes(world, complexity, n_candidates, seed)?;
    Ok(accuracy(&episodes, &predict(params, world, &episodes)?))
}

/// One line of `ec_corpus.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcRecord {
    pub scene_id: u32,
    pub split: Split,
    pub message: Message,
}

/// Eval-mode message for every scene in `splits`, in world order.
pub fn record_corpus(params: &AgentParams, world: &World, splits: &[Split]) -> Result<Vec<EcRecord>> {
    let positions: Vec<usize> = (0..world.len())
        .filter(|&p| splits.contains(&world.scenes[p].split))
        .collect();
    let feats: Vec<&[f32]> = positions.iter().map(|&p| world.features(p)).collect();
    let messages = sender_messages(params, &feats)?;
    Ok(positions
        .iter()
        .zip(messages)
        .map(|(&p, message)| EcRecord {
            scene_id: world.scenes[p].id,
            split: world.scenes[p].split,
            message,
        })
        .collect())
}

pub fn write_ec_corpus(path: &Path, records: &[EcRecord]) -> Result<()> {
    jsonl::write(path, records)
}

pub fn read_ec_corpus(path: &Path, channel: &ChannelSpec) -> Result<Vec<EcRecord>> {
    let recs: Vec<EcRecord> = jsonl::read(path)?;
    for (i, r) in recs.iter().enumerate() {
        Message::new(r.message.symbols.clone(), channel).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(recs)
}

/// EC records as a token-id corpus over the joint vocabulary.
pub fn ec_corpus(records: &[EcRecord], vocab: &Vocab) -> Corpus {
    Corpus {
        language: Language::Ec,
        records: records
            .iter()
            .map(|r| corpus::Record {
                scene_id: r.scene_id,
                split: r.split,
                ids: r.message.symbols.iter().map(|&s| vocab.ec_id(s)).collect(),
            })
            .collect(),
    }
}
