//! Tokenization, the joint EC/English vocabulary and corpus persistence.
//!
//! Reserved ids are fixed: `0 <pad>`, `1 <eos>`, `2 <mask>`, `3 <ec>`,
//! `4 <en>`. EC symbols `s0..s{V-1}` follow, then English tokens ordered by
//! descending frequency with ties broken lexicographically.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::world::{Split, World};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
pub const LANG_EC: usize = 3;
pub const LANG_EN: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<eos>", "<mask>", "<ec>", "<en>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Ec,
    En,
}

impl Language {
    pub fn tag(self) -> usize {
        match self {
            Language::Ec => LANG_EC,
            Language::En => LANG_EN,
        }
    }

    pub fn other(self) -> Language {
        match self {
            Language::Ec => Language::En,
            Language::En => Language::Ec,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Ec => "ec",
            Language::En => "en",
        }
    }
}

pub fn ec_symbol(i: usize) -> String {
    format!("s{i}")
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize_en(text: &str) -> Result<Vec<String>> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !(c.is_ascii() && c.is_control() && !c.is_whitespace()))
        .flat_map(char::to_lowercase)
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::invalid(format!("no tokens in {text:?}")));
    }
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    ec_symbols: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    ec_symbols: usize,
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, ec_symbols: usize) -> Result<Self> {
        if tokens.len() < NUM_RESERVED + ec_symbols {
            return Err(Error::invalid("vocabulary shorter than its reserved and EC blocks"));
        }
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::invalid(format!("id {i} must be {r}, found {}", tokens[i])));
            }
        }
        for i in 0..ec_symbols {
            if tokens[NUM_RESERVED + i] != ec_symbol(i) {
                return Err(Error::invalid(format!("id {} must be {}", NUM_RESERVED + i, ec_symbol(i))));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            ec_symbols,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn num_ec_symbols(&self) -> usize {
        self.ec_symbols
    }

    pub fn ec_range(&self) -> std::ops::Range<usize> {
        NUM_RESERVED..NUM_RESERVED + self.ec_symbols
    }

    pub fn en_range(&self) -> std::ops::Range<usize> {
        NUM_RESERVED + self.ec_symbols..self.tokens.len()
    }

    /// Content ids belonging to `lang`.
    pub fn range(&self, lang: Language) -> std::ops::Range<usize> {
        match lang {
            Language::Ec => self.ec_range(),
            Language::En => self.en_range(),
        }
    }

    pub fn ec_id(&self, symbol: usize) -> usize {
        assert!(symbol < self.ec_symbols, "EC symbol {symbol} out of range");
        NUM_RESERVED + symbol
    }

    pub fn language_of(&self, id: usize) -> Option<Language> {
        if self.ec_range().contains(&id) {
            Some(Language::Ec)
        } else if self.en_range().contains(&id) {
            Some(Language::En)
        } else {
            None
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::invalid(format!("token {t:?} not in vocabulary"))))
            .collect()
    }

    /// Token strings for `ids`, stopping at the first EOS and skipping other
    /// reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= NUM_RESERVED && i < self.tokens.len())
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let f = VocabFile {
            ec_symbols: self.ec_symbols,
            tokens: self.tokens.clone(),
        };
        Ok(serde_json::to_string_pretty(&f)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text)?;
        Self::from_tokens(f.tokens, f.ec_symbols)
    }
}

/// Every caption of every scene as an English corpus, in scene order.
pub fn caption_corpus(world: &World, vocab: &Vocab) -> Result<Corpus> {
    let mut c = Corpus::new(Language::En);
    for (scene, set) in world.scenes.iter().zip(&world.captions) {
        for cap in &set.captions {
            c.records.push(Record {
                scene_id: scene.id,
                split: scene.split,
                ids: vocab.encode(cap)?,
            });
        }
    }
    Ok(c)
}

/// Joint vocabulary over tokenized English and EC sequences.
pub fn build_joint_vocab(
    en_corpus: &[Vec<String>],
    ec_corpus: &[Vec<String>],
    ec_symbols: usize,
    min_freq: usize,
) -> Result<Vocab> {
    if en_corpus.is_empty() || ec_corpus.is_empty() {
        return Err(Error::invalid("both corpora must be non-empty"));
    }
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..ec_symbols).map(ec_symbol));
    for seq in ec_corpus {
        for t in seq {
            if t != "<eos>" && !tokens[NUM_RESERVED..].contains(t) {
                return Err(Error::invalid(format!("{t:?} is not an EC symbol")));
            }
        }
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for seq in en_corpus {
        for t in seq {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut en: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
    en.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (t, _) in en {
        if RESERVED_TOKENS.contains(&t) {
            continue;
        }
        tokens.push(t.to_string());
    }
    Vocab::from_tokens(tokens, ec_symbols)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub scene_id: u32,
    pub split: Split,
    pub ids: Vec<usize>,
}

/// Monolingual corpus of content-id sequences (no tags, no EOS).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub language: Language,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    lang: Language,
    scene_id: u32,
    split: Split,
    ids: Vec<usize>,
}

impl Corpus {
    pub fn new(language: Language) -> Self {
        Self {
            language,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_ids(&self, split: Split) -> Vec<Vec<usize>> {
        self.split(split).map(|r| r.ids.clone()).collect()
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let range = vocab.range(self.language);
        for (i, r) in self.records.iter().enumerate() {
            if let Some(&bad) = r.ids.iter().find(|id| !range.contains(id)) {
                return Err(Error::invalid(format!(
                    "record {i}: id {bad} is not a {} token",
                    self.language.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            let line = CorpusLine {
                lang: self.language,
                scene_id: r.scene_id,
                split: r.split,
                ids: r.ids.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn import(path: &Path, language: Language, vocab: &Vocab) -> Result<Self> {
        let lines: Vec<CorpusLine> = jsonl::read(path)?;
        let range = vocab.range(language);
        let mut records = Vec::with_capacity(lines.len());
        for (i, l) in lines.into_iter().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            if l.lang != language {
                return Err(parse_err(format!("expected language {}, found {}", language.as_str(), l.lang.as_str())));
            }
            if let Some(&bad) = l.ids.iter().find(|id| !range.contains(id)) {
                return Err(parse_err(format!("unknown token id {bad}")));
            }
            records.push(Record {
                scene_id: l.scene_id,
                split: l.split,
                ids: l.ids,
            });
        }
        Ok(Self { language, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{AttributeSchema, World};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize_en("A yellow Giraffe.").unwrap(), toks("a yellow giraffe"));
        assert_eq!(tokenize_en("  two, red   cats!! ").unwrap(), toks("two red cats"));
        assert!(tokenize_en("...").is_err());
        assert!(tokenize_en("").is_err());
        let t = tokenize_en("Three BIG dogs; in a park").unwrap();
        assert_eq!(tokenize_en(&t.join(" ")).unwrap(), t);
    }

    #[test]
    fn vocab_layout() {
        let en = vec![toks("a b b c"), toks("c c d")];
        let ec = vec![toks("s1 s2 <eos>")];
        let v = build_joint_vocab(&en, &ec, 64, 1).unwrap();
        assert_eq!(v.len(), 5 + 64 + 4);
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.id("s63"), Some(NUM_RESERVED + 63));
        // c:3, b:2, a:1, d:1
        assert_eq!(&v.tokens()[69..], &toks("c b a d")[..]);
        let v2 = build_joint_vocab(&en, &ec, 64, 2).unwrap();
        assert_eq!(&v2.tokens()[69..], &toks("c b")[..]);
        assert!(build_joint_vocab(&[], &ec, 64, 1).is_err());
        assert!(build_joint_vocab(&en, &[toks("hello")], 64, 1).is_err());
    }

    #[test]
    fn vocab_file_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let en = vec![toks("a yellow giraffe"), toks("two red cats")];
        let ec = vec![toks("s0")];
        let a = build_joint_vocab(&en, &ec, 64, 1).unwrap();
        let b = build_joint_vocab(&en, &ec, 64, 1).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let p = dir.path().join("vocab.json");
        a.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), a);
    }

    #[test]
    fn caption_vocabulary_matches_grammar() {
        let w = World::generate(AttributeSchema::default(), 3000, [0.8, 0.1, 0.1], 4).unwrap();
        let en: Vec<Vec<String>> = w
            .captions
            .iter()
            .flat_map(|c| c.captions.iter().map(|t| tokenize_en(&t.join(" ")).unwrap()))
            .collect();
        let v = build_joint_vocab(&en, &[toks("s0")], 64, 1).unwrap();
        let got: std::collections::BTreeSet<&str> = v.en_range().map(|i| v.token(i)).collect();
        let mut expected: std::collections::BTreeSet<String> = toks(
            "a the standing in there is are that photo of near on two three",
        )
        .into_iter()
        .collect();
        for c in w.schema.categories() {
            expected.insert(format!("{c}s"));
            expected.insert(c);
        }
        expected.extend(w.schema.colors.iter().cloned());
        expected.extend(w.schema.sizes.iter().cloned());
        expected.extend(w.schema.settings.iter().cloned());
        let expected: std::collections::BTreeSet<&str> = expected.iter().map(String::as_str).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let en = vec![toks("a cat")];
        let v = build_joint_vocab(&en, &[toks("s0")], 64, 1).unwrap();
        let p = dir.path().join("c.jsonl");

        let empty = Corpus::new(Language::Ec);
        empty.export(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        assert_eq!(Corpus::import(&p, Language::Ec, &v).unwrap(), empty);

        let c = Corpus {
            language: Language::Ec,
            records: vec![
                Record { scene_id: 9, split: Split::Test, ids: vec![5, 6, 68] },
                Record { scene_id: 2, split: Split::Train, ids: vec![7] },
            ],
        };
        c.export(&p).unwrap();
        assert_eq!(Corpus::import(&p, Language::Ec, &v).unwrap(), c);
        assert!(Corpus::import(&p, Language::En, &v).is_err());

        std::fs::write(&p, "{\"lang\":\"ec\",\"scene_id\":1,\"split\":\"train\",\"ids\":[5]}\n{\"lang\":\"ec\",\"scene_id\":1,\"split\":\"train\",\"ids\":[999]}\n").unwrap();
        match Corpus::import(&p, Language::Ec, &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "{\"lang\":\"ec\"\n").unwrap();
        assert!(matches!(Corpus::import(&p, Language::Ec, &v), Err(Error::Parse { line: 1, .. })));
    }
}
