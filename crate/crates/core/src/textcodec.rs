//! Lowercasing WordPiece tokenizer and a pair-merge vocabulary builder.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];
pub const CONTINUATION: &str = "##";

/// Words longer than this are mapped straight to [UNK].
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is below the {required} reserved tokens and characters")]
    TargetTooSmall { target: usize, required: usize },
    #[error("max_len {0} leaves no room for [CLS], one piece and [SEP]")]
    MaxLenTooSmall(usize),
    #[error("vocabulary: {0}")]
    InvalidVocab(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
}

/// Fixed-length id sequence `[CLS] pieces.. [SEP] [PAD]..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions with mask set, specials included.
    pub fn active(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

impl Vocab {
    /// Vocabulary with id = position. All four reserved tokens must appear
    /// exactly once and no token may repeat.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TextError::InvalidVocab(format!("empty token at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| TextError::InvalidVocab(format!("missing reserved token {name}")))
        };
        let (pad, unk, cls, sep) = (find(PAD)?, find(UNK)?, find(CLS)?, find(SEP)?);
        if pad != 0 {
            return Err(TextError::InvalidVocab(format!("{PAD} must have id 0, found {pad}")));
        }
        Ok(Self { tokens, index, pad, unk, cls, sep })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep
    }

    /// Hex SHA-256 over the newline-terminated token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence, TextError> {
        if max_len < 3 {
            return Err(TextError::MaxLenTooSmall(max_len));
        }
        let budget = max_len - 2;
        let mut pieces = Vec::new();
        for word in split_words(text) {
            if pieces.len() >= budget {
                break;
            }
            self.wordpiece(&word, &mut pieces);
        }
        pieces.truncate(budget);

        let mut ids = Vec::with_capacity(max_len);
        ids.push(self.cls);
        ids.extend_from_slice(&pieces);
        ids.push(self.sep);
        let active = ids.len();
        ids.resize(max_len, self.pad);
        let attention_mask = (0..max_len).map(|i| i < active).collect();
        Ok(TokenSequence { ids, attention_mask })
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[start..end]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.unk);
                    return;
                }
            }
        }
    }

    /// Text from content ids: specials dropped, continuation pieces glued to
    /// the previous piece, words separated by single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), TextError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| TextError::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|source| TextError::Io { path: path.display().to_string(), source })?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercase, then split on whitespace with every punctuation character as
/// its own word. Control characters are dropped.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if c.is_control() {
            continue;
        } else if is_punct(c) {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Frequency-driven subword vocabulary. Words start as characters (non-initial
/// ones carry the `##` prefix); the most frequent adjacent pair is merged until
/// `target_size` entries exist or nothing is left to merge. Ties go to the
/// lexicographically smallest pair.
pub fn build_vocab<'a, I>(corpus: I, target_size: usize) -> Result<Vocab, TextError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in split_words(text) {
            if w.chars().count() <= MAX_WORD_CHARS {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort();
    let mut splits: Vec<Vec<String>> = words
        .iter()
        .map(|(w, _)| {
            w.chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect()
        })
        .collect();

    let alphabet: BTreeSet<String> = splits.iter().flatten().cloned().collect();
    let required = RESERVED.len() + alphabet.len();
    if target_size < required {
        return Err(TextError::TargetTooSmall { target: target_size, required });
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (split, (_, freq)) in splits.iter().zip(&words) {
            for w in split.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += freq;
            }
        }
        let Some((a, b)) = pairs
            .into_iter()
            .max_by(|x, y| x.1.cmp(&y.1).then_with(|| y.0.cmp(&x.0)))
            .map(|((a, b), _)| (a.to_string(), b.to_string()))
        else {
            break;
        };
        let merged = format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(&b));
        for split in &mut splits {
            let mut i = 0;
            while i + 1 < split.len() {
                if split[i] == a && split[i + 1] == b {
                    split[i] = merged.clone();
                    split.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}
