//! Text normalization, vocabularies, tokenization, corpus splitting,
//! labeled-data ingestion and the seeded masking primitive.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, RngExt, SliceRandom};

pub const PAD: usize = 0;
/// End of text; also the generation termination token.
pub const EOT: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<eot>", "<mask>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("vocabulary max_size {0} is below the minimum of 5")]
    VocabTooSmall(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 2 or 4 tab-separated columns, found {found}")]
    MalformedRow { path: String, line: usize, found: usize },
    #[error("{path}:{line}: label {label:?} is not 0 or 1")]
    BadLabel { path: String, line: usize, label: String },
    #[error("vocabulary file: {0}")]
    BadVocab(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Char,
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Word => "word",
            Self::Char => "char",
        })
    }
}

impl std::str::FromStr for TokenizerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(format!("unknown tokenizer mode {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

const CONTRACTIONS: &[(&str, &str)] = &[
    ("won't", " will not"),
    ("Won't", " Will not"),
    ("can't", " can not"),
    ("Can't", " Can not"),
    ("n't", " not"),
    ("'m", " am"),
    ("'ll", " will"),
    ("'re", " are"),
];

/// Normalizes raw text: expands contractions, drops `@`/`#` markers,
/// emoji, non-ASCII symbols and punctuation, collapses whitespace. Case and
/// digits are kept.
pub fn preprocess_text(raw: &str) -> String {
    let mut s = raw.replace(['\u{2019}', '\u{2018}'], "'");
    for (from, to) in CONTRACTIONS {
        s = s.replace(from, to);
    }
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            // possessive and any leftover apostrophes vanish in place
            '\'' => {}
            c if c.is_ascii_alphanumeric() => out.push(c),
            _ => out.push(' '),
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Token ↔ id map. Ids 0..4 are `<pad>`, `<eot>`, `<mask>`, `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenizerMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(mode: TokenizerMode, tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(TextError::BadVocab("reserved tokens must occupy ids 0..4".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TextError::BadVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { mode, tokens, index })
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Splits text into token strings according to the mode.
    pub fn split<'t>(&self, text: &'t str) -> Vec<std::borrow::Cow<'t, str>> {
        match self.mode {
            TokenizerMode::Word => text.split_whitespace().map(Into::into).collect(),
            TokenizerMode::Char => text.chars().map(|c| c.to_string().into()).collect(),
        }
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(mode: TokenizerMode, text: &str) -> Result<Self, TextError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_tokens(mode, body.split('\n').map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_text()).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, mode: TokenizerMode) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(mode, &text)
    }
}

/// Reserved tokens first, then by descending frequency with lexicographic
/// tie-break, up to `max_size` entries in total.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], mode: TokenizerMode, max_size: usize) -> Result<Vocab, TextError> {
    if max_size < 5 {
        return Err(TextError::VocabTooSmall(max_size));
    }
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let probe = Vocab {
        mode,
        tokens: vec![],
        index: HashMap::new(),
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for tok in probe.split(line.as_ref()) {
            if !RESERVED.contains(&tok.as_ref()) {
                *counts.entry(tok.into_owned()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - RESERVED.len()).map(|(t, _)| t));
    Vocab::from_tokens(mode, tokens)
}

// ---------------------------------------------------------------------------
// Token sequences

/// Token ids with a mask marking real (non-pad) positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl TokenSeq {
    /// An unpadded sequence.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let pad_mask = ids.iter().map(|&i| i != PAD).collect();
        Self { ids, pad_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leading real tokens.
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().take_while(|&&b| b).count()
    }

    /// The real prefix, without padding.
    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.real_len()]
    }

    pub fn pad_to(&self, max_len: usize) -> Self {
        let mut s = self.clone();
        s.ids.truncate(max_len);
        s.pad_mask.truncate(max_len);
        while s.ids.len() < max_len {
            s.ids.push(PAD);
            s.pad_mask.push(false);
        }
        s
    }
}

/// Tokenizes, truncates to `max_len` (keeping the prefix) and right-pads.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut ids: Vec<usize> = vocab.split(text).iter().map(|t| vocab.id(t)).take(max_len).collect();
    let n = ids.len();
    ids.resize(max_len, PAD);
    let pad_mask = (0..max_len).map(|i| i < n).collect();
    TokenSeq { ids, pad_mask }
}

/// Language-modeling form: the tokens followed by `<eot>`, unpadded, at
/// most `max_len` long in total.
pub fn encode_lm(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let mut ids: Vec<usize> = vocab.split(text).iter().map(|t| vocab.id(t)).collect();
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOT);
    TokenSeq::from_ids(ids)
}

/// Inverse of [`encode`] on in-vocabulary text: real tokens up to the first
/// `<eot>`, joined by spaces (word mode) or concatenated (char mode).
pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> String {
    decode_ids(seq.real_ids(), vocab)
}

pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> String {
    let toks = ids.iter().take_while(|&&i| i != EOT).filter(|&&i| i != PAD).map(|&i| vocab.token(i));
    match vocab.mode() {
        TokenizerMode::Word => toks.collect::<Vec<_>>().join(" "),
        TokenizerMode::Char => toks.collect(),
    }
}

// ---------------------------------------------------------------------------
// Corpora

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub text: String,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then contiguous train/validation/test partition. The
/// validation and test sizes are floored; the remainder goes to train.
pub fn split_corpus<T: Clone>(samples: &[T], ratios: (u32, u32, u32), seed: u64) -> CorpusSplit<T> {
    assert!(ratios.0 > 0 && ratios.1 > 0 && ratios.2 > 0, "ratios must be positive");
    let n = samples.len();
    let total = u64::from(ratios.0 + ratios.1 + ratios.2);
    let n_val = (n as u64 * u64::from(ratios.1) / total) as usize;
    let n_test = (n as u64 * u64::from(ratios.2) / total) as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| samples[i].clone()).collect();
    CorpusSplit {
        train: pick(0..n_train),
        validation: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
    }
}

/// Reads UTF-8 text, one sample per non-empty line.
pub fn load_lines(path: &Path) -> Result<Vec<String>, TextError> {
    let text = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(str::trim_end).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Parses labeled TSV. Two columns are `text<TAB>label`; four columns are
/// the CoLA layout `source<TAB>label<TAB>original-label<TAB>sentence`.
pub fn parse_labeled_tsv(content: &str, path: &str) -> Result<Vec<LabeledSample>, TextError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (text, label) = match cols.len() {
            2 => (cols[0], cols[1]),
            4 => (cols[3], cols[1]),
            found => {
                return Err(TextError::MalformedRow {
                    path: path.to_string(),
                    line: line_no,
                    found,
                })
            }
        };
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(TextError::BadLabel {
                    path: path.to_string(),
                    line: line_no,
                    label: other.to_string(),
                })
            }
        };
        out.push(LabeledSample {
            text: text.to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn load_labeled_tsv(path: &Path) -> Result<Vec<LabeledSample>, TextError> {
    let content = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_labeled_tsv(&content, &path.display().to_string())
}

pub fn write_labeled_tsv(path: &Path, samples: &[LabeledSample]) -> Result<(), TextError> {
    let body: String = samples.iter().map(|s| format!("{}\t{}\n", s.text, s.label)).collect();
    fs::write(path, body).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Masking

/// Replaces each real token other than `<eot>` by `<mask>` independently
/// with probability `p`. Returns the masked sequence and the masked
/// positions in increasing order.
pub fn mask_tokens(seq: &TokenSeq, p: f64, seed: u64) -> (TokenSeq, Vec<usize>) {
    assert!((0.0..=1.0).contains(&p), "mask probability must lie in [0, 1]");
    let mut rng = rng::seeded(seed);
    let mut out = seq.clone();
    let mut positions = Vec::new();
    for i in 0..seq.len() {
        if !seq.pad_mask[i] || seq.ids[i] == EOT || seq.ids[i] == PAD {
            continue;
        }
        let u: f64 = rng.gen();
        if u < p {
            out.ids[i] = MASK;
            positions.push(i);
        }
    }
    (out, positions)
}
