//! Word-level tokenizer, vocabulary, corpora and synthetic directional corpora.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::MaskVocab;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];
pub const DEFAULT_MIN_DOC_LEN: usize = 8;

/// Lowercases and splits into runs of alphanumeric characters; every other
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Blank-line separated blocks of text.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.trim().is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
            cur.clear();
        } else {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    if !cur.trim().is_empty() {
        docs.push(cur);
    }
    docs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in order.
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mask_vocab(&self) -> MaskVocab {
        MaskVocab { pad_id: PAD_ID, mask_id: MASK_ID, first_regular: RESERVED.len() as u32, vocab_size: self.len() as u32 }
    }
}

/// Token ids with the index of each word's first token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub ids: Vec<u32>,
    pub word_starts: Vec<usize>,
}

impl Document {
    /// A document whose every token is a word.
    pub fn from_words(ids: Vec<u32>) -> Self {
        let word_starts = (0..ids.len()).collect();
        Document { ids, word_starts }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Consecutive windows of at most `max_len` tokens, keeping those with at least two tokens.
    pub fn chunks(&self, max_len: usize) -> Vec<Document> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.ids.len() {
            let end = (start + max_len).min(self.ids.len());
            if end - start >= 2 {
                let word_starts = self.word_starts.iter().filter(|&&w| w >= start && w < end).map(|w| w - start).collect::<Vec<_>>();
                // A window that opens inside a word still needs a boundary at 0.
                let word_starts = if word_starts.first() == Some(&0) { word_starts } else { std::iter::once(0).chain(word_starts).collect() };
                out.push(Document { ids: self.ids[start..end].to_vec(), word_starts });
            }
            start = end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocab: Vocab,
}

impl Corpus {
    /// All documents split into model-sized windows.
    pub fn sequences(&self, max_len: usize) -> Vec<Document> {
        self.documents.iter().flat_map(|d| d.chunks(max_len)).collect()
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    /// Fraction of tokens mapped to the unknown id.
    pub fn unk_rate(&self) -> f64 {
        let unk = self.documents.iter().flat_map(|d| &d.ids).filter(|&&t| t == UNK_ID).count();
        unk as f64 / self.token_count().max(1) as f64
    }

    /// Entropy (nats) of the empirical unigram distribution.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab.len()];
        for &t in self.documents.iter().flat_map(|d| &d.ids) {
            counts[t as usize] += 1;
        }
        let n = self.token_count() as f64;
        counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
    }

    /// Text rendering that [`build_corpus`] reads back into the same documents.
    pub fn render(&self) -> String {
        let docs: Vec<String> = self
            .documents
            .iter()
            .map(|d| d.ids.iter().map(|&t| self.vocab.token(t).unwrap_or("[UNK]")).collect::<Vec<_>>().join(" "))
            .collect();
        let mut out = docs.join("\n\n");
        out.push('\n');
        out
    }
}

/// Tokenizes `text`, keeps the `vocab_cap − 5` most frequent words (ties broken
/// alphabetically), drops documents shorter than `min_doc_len`, and shuffles the
/// document order with `seed`.
pub fn build_corpus(text: &str, vocab_cap: usize, min_doc_len: usize, seed: u64) -> Result<Corpus> {
    if vocab_cap < RESERVED.len() {
        return Err(Error::Config(format!("vocabulary cap {vocab_cap} is below the {} reserved tokens", RESERVED.len())));
    }
    let docs: Vec<Vec<String>> = split_documents(text).iter().map(|d| tokenize(d)).filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::Input("corpus source contains no text".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for w in docs.iter().flatten() {
        if !RESERVED.contains(&w.as_str()) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(vocab_cap - RESERVED.len());
    let vocab = Vocab::new(ranked.into_iter().map(|(w, _)| w.to_string()))?;
    let mut documents: Vec<Document> = docs
        .iter()
        .filter(|d| d.len() >= min_doc_len)
        .map(|d| Document::from_words(d.iter().map(|w| vocab.id(w)).collect()))
        .collect();
    documents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Corpus { documents, vocab })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPreset {
    /// Every block is `[a₁..a_k, f(a₁)..f(a_k)]`: dependents sit `k` after their source.
    CopyForward,
    /// Every block is `[g(b₁)..g(b_k), b₁..b_k]`: dependents sit `k` before their source.
    CopyBackward,
    /// Blocks of either kind, chosen per block.
    CopyBoth,
    /// Nested typed brackets with filler; a closing bracket's type matches its opener.
    BracketMatch,
}

impl SynthPreset {
    pub const ALL: [SynthPreset; 4] = [SynthPreset::CopyForward, SynthPreset::CopyBackward, SynthPreset::CopyBoth, SynthPreset::BracketMatch];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthPreset::CopyForward => "copy-forward",
            SynthPreset::CopyBackward => "copy-backward",
            SynthPreset::CopyBoth => "copy-both",
            SynthPreset::BracketMatch => "bracket-match",
        }
    }
}

impl fmt::Display for SynthPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic preset '{s}'")))
    }
}

pub const SYNTH_SOURCES: usize = 32;
pub const SYNTH_DEPENDENTS: usize = 8;
pub const SYNTH_BRACKETS: usize = 4;
pub const SYNTH_DISTANCE: usize = 4;
pub const SYNTH_BLOCKS: usize = 3;
pub const SYNTH_BRACKET_LEN: usize = 24;

/// A token fully determined by the token at `source`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub target: usize,
    pub source: usize,
}

impl Dependency {
    /// `target − source`: positive when the determining token comes earlier.
    pub fn offset(&self) -> i64 {
        self.target as i64 - self.source as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub dependencies: Vec<Vec<Dependency>>,
}

fn synth_vocab() -> Vocab {
    let words = (0..SYNTH_SOURCES)
        .map(|i| format!("s{i}"))
        .chain((0..SYNTH_DEPENDENTS).map(|i| format!("f{i}")))
        .chain((0..SYNTH_DEPENDENTS).map(|i| format!("b{i}")))
        .chain((0..SYNTH_BRACKETS).map(|i| format!("open{i}")))
        .chain((0..SYNTH_BRACKETS).map(|i| format!("close{i}")));
    Vocab::new(words).expect("synthetic words are distinct")
}

/// Generates `size` sentences whose dependent tokens are predictable from one direction only.
pub fn synth_directional_corpus(preset: SynthPreset, size: usize, seed: u64) -> SynthCorpus {
    let vocab = synth_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = |w: String| vocab.get(&w).expect("synthetic word");
    let source = |rng: &mut ChaCha8Rng| rng.random_range(0..SYNTH_SOURCES);
    let mut documents = Vec::with_capacity(size);
    let mut dependencies = Vec::with_capacity(size);
    for _ in 0..size {
        let (mut ids, mut deps) = (Vec::new(), Vec::new());
        if preset == SynthPreset::BracketMatch {
            let mut stack: Vec<(usize, usize)> = Vec::new();
            for pos in 0..SYNTH_BRACKET_LEN {
                let left = SYNTH_BRACKET_LEN - pos;
                let u: f64 = rng.random();
                if !stack.is_empty() && (left == stack.len() || u < 0.3) {
                    let (kind, at) = stack.pop().expect("non-empty");
                    ids.push(id(format!("close{kind}")));
                    deps.push(Dependency { target: pos, source: at });
                } else if left > stack.len() + 1 && stack.len() < 4 && u < 0.6 {
                    let kind = rng.random_range(0..SYNTH_BRACKETS);
                    ids.push(id(format!("open{kind}")));
                    stack.push((kind, pos));
                } else {
                    ids.push(id(format!("s{}", source(&mut rng))));
                }
            }
        } else {
            for _ in 0..SYNTH_BLOCKS {
                let forward = match preset {
                    SynthPreset::CopyForward => true,
                    SynthPreset::CopyBackward => false,
                    _ => rng.random::<bool>(),
                };
                let base = ids.len();
                let src: Vec<usize> = (0..SYNTH_DISTANCE).map(|_| source(&mut rng)).collect();
                let dependents = src.iter().map(|s| s % SYNTH_DEPENDENTS);
                if forward {
                    ids.extend(src.iter().map(|s| id(format!("s{s}"))));
                    ids.extend(dependents.map(|d| id(format!("f{d}"))));
                    deps.extend((0..SYNTH_DISTANCE).map(|i| Dependency { target: base + SYNTH_DISTANCE + i, source: base + i }));
                } else {
                    ids.extend(dependents.map(|d| id(format!("b{d}"))));
                    ids.extend(src.iter().map(|s| id(format!("s{s}"))));
                    deps.extend((0..SYNTH_DISTANCE).map(|i| Dependency { target: base + i, source: base + SYNTH_DISTANCE + i }));
                }
            }
        }
        documents.push(Document::from_words(ids));
        dependencies.push(deps);
    }
    SynthCorpus { corpus: Corpus { documents, vocab }, dependencies }
}
