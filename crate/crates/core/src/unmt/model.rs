//! Encoder-decoder transformer over the joint vocabulary.
//!
//! A batch of `B` sequences padded to `T` is packed into one `B*T x d`
//! matrix; attention is computed per sequence by the tape's fused op.

use serde::{Deserialize, Serialize};

use crate::corpus::{Language, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::functional::{dropout, linear};
use crate::numerics::tensor::argmax;
use crate::numerics::{AttentionSpec, ParamId, ParamStore, Rng, Tape, Tensor, Var};

const NEG: f32 = -1e9;
const LN_EPS: f32 = 1e-5;

/// Transformer sizes. Defaults are desk scale; the reference setup used
/// 6 layers, 8 heads, model dim 1024 and feed-forward 4096.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 128,
            ff_dim: 256,
            max_positions: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("unmt.model.layers", self.layers)?;
        pos("unmt.model.heads", self.heads)?;
        pos("unmt.model.dim", self.dim)?;
        pos("unmt.model.ff_dim", self.ff_dim)?;
        if self.max_positions < 2 {
            return Err(Error::config("unmt.model.max_positions", "must be at least 2"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "unmt.model.heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Attn {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct Ff {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    n1: Norm,
    attn: Attn,
    n2: Norm,
    ff: Ff,
}

#[derive(Clone, Debug)]
struct DecLayer {
    n1: Norm,
    self_attn: Attn,
    n2: Norm,
    cross: Attn,
    n3: Norm,
    ff: Ff,
}

#[derive(Clone, Debug)]
pub(crate) struct Ids {
    tok: ParamId,
    pos: ParamId,
    lang: ParamId,
    out_bias: ParamId,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Norm {
    Norm {
        g: store.add_const(&format!("{name}.g"), &[1, d], 1.0),
        b: store.add_const(&format!("{name}.b"), &[1, d], 0.0),
    }
}

fn attn(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Attn {
    let mut w = |s: &str| store.add_xavier(&format!("{name}.{s}"), d, d, rng);
    let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
    let mut b = |s: &str| store.add_const(&format!("{name}.{s}"), &[1, d], 0.0);
    Attn {
        wq,
        bq: b("bq"),
        wk,
        bk: b("bk"),
        wv,
        bv: b("bv"),
        wo,
        bo: b("bo"),
    }
}

fn ff(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut Rng) -> Ff {
    Ff {
        w1: store.add_xavier(&format!("{name}.w1"), d, f, rng),
        b1: store.add_const(&format!("{name}.b1"), &[1, f], 0.0),
        w2: store.add_xavier(&format!("{name}.w2"), f, d, rng),
        b2: store.add_const(&format!("{name}.b2"), &[1, d], 0.0),
    }
}

impl Ids {
    pub(crate) fn build(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut Rng) -> Ids {
        let d = cfg.dim;
        let tok = store.add_normal("tok_emb", &[vocab_size, d], 0.02, rng);
        let pos = store.add_normal("pos_emb", &[cfg.max_positions, d], 0.1, rng);
        let lang = store.add_normal("lang_emb", &[2, d], 0.1, rng);
        let out_bias = store.add_const("out_bias", &[1, vocab_size], 0.0);
        let enc = (0..cfg.layers)
            .map(|l| EncLayer {
                n1: norm(store, &format!("enc{l}.n1"), d),
                attn: attn(store, &format!("enc{l}.attn"), d, rng),
                n2: norm(store, &format!("enc{l}.n2"), d),
                ff: ff(store, &format!("enc{l}.ff"), d, cfg.ff_dim, rng),
            })
            .collect();
        let enc_norm = norm(store, "enc.norm", d);
        let dec = (0..cfg.layers)
            .map(|l| DecLayer {
                n1: norm(store, &format!("dec{l}.n1"), d),
                self_attn: attn(store, &format!("dec{l}.self"), d, rng),
                n2: norm(store, &format!("dec{l}.n2"), d),
                cross: attn(store, &format!("dec{l}.cross"), d, rng),
                n3: norm(store, &format!("dec{l}.n3"), d),
                ff: ff(store, &format!("dec{l}.ff"), d, cfg.ff_dim, rng),
            })
            .collect();
        let dec_norm = norm(store, "dec.norm", d);
        Ids {
            tok,
            pos,
            lang,
            out_bias,
            enc,
            enc_norm,
            dec,
            dec_norm,
        }
    }

    pub(crate) fn tok(&self) -> ParamId {
        self.tok
    }
}

fn lang_index(lang: Language) -> usize {
    match lang {
        Language::Ec => 0,
        Language::En => 1,
    }
}

/// Ids the decoder may emit when writing `lang`: EOS plus that language's block.
pub fn allowed_mask(vocab: &Vocab, lang: Language) -> Vec<f32> {
    let r = vocab.range(lang);
    (0..vocab.len())
        .map(|i| if i == EOS || r.contains(&i) { 0.0 } else { NEG })
        .collect()
}

pub(crate) struct Fwd<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    ids: &'a Ids,
    cfg: &'a ModelConfig,
    drop_p: f32,
    rng: Option<&'a mut Rng>,
}

/// Encoder output for a packed batch.
pub(crate) struct Encoded {
    pub out: Var,
    pub t: usize,
    pub lens: Vec<usize>,
}

impl<'a> Fwd<'a> {
    pub(crate) fn new(store: &'a ParamStore, ids: &'a Ids, cfg: &'a ModelConfig, drop_p: f32, rng: Option<&'a mut Rng>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            ids,
            cfg,
            drop_p,
            rng,
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    fn drop(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.drop_p > 0.0 => dropout(&mut self.tape, x, self.drop_p, rng),
            _ => x,
        }
    }

    fn norm(&mut self, x: Var, n: &Norm) -> Var {
        let (g, b) = (self.p(n.g), self.p(n.b));
        let y = self.tape.layer_norm(x, LN_EPS);
        let y = self.tape.mul(y, g);
        self.tape.add(y, b)
    }

    fn lin(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.p(w), self.p(b));
        linear(&mut self.tape, x, w, b)
    }

    fn attention(&mut self, xq: Var, xkv: Var, a: &Attn, spec: &AttentionSpec) -> Var {
        let q = self.lin(xq, a.wq, a.bq);
        let k = self.lin(xkv, a.wk, a.bk);
        let v = self.lin(xkv, a.wv, a.bv);
        let o = self.tape.attention(q, k, v, spec.clone());
        self.lin(o, a.wo, a.bo)
    }

    fn feed_forward(&mut self, x: Var, f: &Ff) -> Var {
        let h = self.lin(x, f.w1, f.b1);
        let h = self.tape.relu(h);
        let h = self.drop(h);
        self.lin(h, f.w2, f.b2)
    }

    fn residual(&mut self, x: Var, y: Var) -> Var {
        let y = self.drop(y);
        self.tape.add(x, y)
    }

    /// Token + position + language embeddings of `seqs` padded to `t`.
    fn embed(&mut self, seqs: &[Vec<usize>], t: usize, lang: Language) -> Var {
        let mut ids = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            ids.extend(s.iter().copied());
            ids.extend(std::iter::repeat(PAD).take(t - s.len()));
        }
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t).collect();
        let (tok, pos, lang_t) = (self.p(self.ids.tok), self.p(self.ids.pos), self.p(self.ids.lang));
        let e = self.tape.embedding(tok, &ids);
        let e = self.tape.scale(e, (self.cfg.dim as f32).sqrt());
        let pe = self.tape.embedding(pos, &positions);
        let le = self.tape.embedding(lang_t, &[lang_index(lang)]);
        let x = self.tape.add(e, pe);
        let x = self.tape.add(x, le);
        self.drop(x)
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t > self.cfg.max_positions {
            return Err(Error::invalid(format!(
                "sequence of length {t} exceeds the {} learned positions",
                self.cfg.max_positions
            )));
        }
        Ok(())
    }

    pub(crate) fn encode(&mut self, src: &[Vec<usize>], lang: Language) -> Result<Encoded> {
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let t = lens.iter().copied().max().unwrap_or(0);
        if t == 0 || lens.contains(&0) {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        self.check_len(t)?;
        let spec = AttentionSpec {
            heads: self.cfg.heads,
            batch: src.len(),
            q_len: t,
            k_len: t,
            k_lens: lens.clone(),
            causal: false,
        };
        let mut x = self.embed(src, t, lang);
        let ids = self.ids;
        for l in &ids.enc {
            let h = self.norm(x, &l.n1);
            let a = self.attention(h, h, &l.attn, &spec);
            x = self.residual(x, a);
            let h = self.norm(x, &l.n2);
            let f = self.feed_forward(h, &l.ff);
            x = self.residual(x, f);
        }
        let out = self.norm(x, &ids.enc_norm);
        Ok(Encoded { out, t, lens })
    }

    /// Decoder states for inputs `dec_in` (each starting with the target tag),
    /// all padded to the longest.
    pub(crate) fn decode(&mut self, enc: &Encoded, dec_in: &[Vec<usize>], lang: Language) -> Result<(Var, usize)> {
        let lens: Vec<usize> = dec_in.iter().map(Vec::len).collect();
        let t = lens.iter().copied().max().unwrap_or(0);
        self.check_len(t)?;
        let b = dec_in.len();
        let self_spec = AttentionSpec {
            heads: self.cfg.heads,
            batch: b,
            q_len: t,
            k_len: t,
            k_lens: lens.clone(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            k_len: enc.t,
            k_lens: enc.lens.clone(),
            causal: false,
            ..self_spec.clone()
        };
        let mut x = self.embed(dec_in, t, lang);
        let ids = self.ids;
        for l in &ids.dec {
            let h = self.norm(x, &l.n1);
            let a = self.attention(h, h, &l.self_attn, &self_spec);
            x = self.residual(x, a);
            let h = self.norm(x, &l.n2);
            let c = self.attention(h, enc.out, &l.cross, &cross_spec);
            x = self.residual(x, c);
            let h = self.norm(x, &l.n3);
            let f = self.feed_forward(h, &l.ff);
            x = self.residual(x, f);
        }
        Ok((self.norm(x, &ids.dec_norm), t))
    }

    /// Tied-projection logits of the selected rows with the language mask applied.
    pub(crate) fn logits(&mut self, hidden: Var, rows: &[usize], mask: &[f32]) -> Var {
        let h = self.tape.embedding(hidden, rows);
        let (tok, bias) = (self.p(self.ids.tok), self.p(self.ids.out_bias));
        let z = self.tape.matmul_t(h, tok, false, true);
        let z = self.tape.add(z, bias);
        let m = self.tape.constant(Tensor::row(mask.to_vec()));
        self.tape.add(z, m)
    }
}

/// Greedy decoding of a batch; outputs exclude EOS and stop at `max_len`.
pub(crate) fn greedy(
    store: &ParamStore,
    ids: &Ids,
    cfg: &ModelConfig,
    vocab: &Vocab,
    src: &[Vec<usize>],
    src_lang: Language,
    tgt_lang: Language,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = max_len.min(cfg.max_positions - 1);
    let mut f = Fwd::new(store, ids, cfg, 0.0, None);
    let enc = f.encode(src, src_lang)?;
    let enc_value = f.tape.value(enc.out).clone();
    let mask = allowed_mask(vocab, tgt_lang);
    let b = src.len();
    let mut prefixes: Vec<Vec<usize>> = vec![vec![tgt_lang.tag()]; b];
    let mut done = vec![false; b];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
    for step in 0..max_len {
        let mut g = Fwd::new(store, ids, cfg, 0.0, None);
        let enc_step = Encoded {
            out: g.tape.constant(enc_value.clone()),
            t: enc.t,
            lens: enc.lens.clone(),
        };
        let (hidden, t) = g.decode(&enc_step, &prefixes, tgt_lang)?;
        let rows: Vec<usize> = (0..b).map(|s| s * t + step).collect();
        let z = g.logits(hidden, &rows, &mask);
        let zv = g.tape.value(z);
        for s in 0..b {
            let next = argmax(zv.row_slice(s));
            if !done[s] {
                if next == EOS {
                    done[s] = true;
                } else {
                    out[s].push(next);
                }
            }
            prefixes[s].push(next);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}
