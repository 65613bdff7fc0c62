//! Toy subword vocabulary, whole-word aware encoding, and row packing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const CLS: usize = 3;
pub const SEP: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[MASK]", "[UNK]", "[CLS]", "[SEP]"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus has no words")]
    EmptyCorpus,
    #[error("vocabulary target {0} is below the minimum of 6")]
    TargetTooSmall(usize),
    #[error("max_len {0} is below the minimum of 8")]
    MaxLenTooSmall(usize),
    #[error("batch_size must be positive")]
    ZeroBatch,
    #[error("vocabulary file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
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
    index: HashMap<String, usize>,
    longest: usize,
}

/// Token ids with a marker on the first subword of every word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<usize>,
    pub word_start: Vec<bool>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Wraps the sentence in `[CLS] ... [SEP]`.
    pub fn framed(&self) -> TokenizedSentence {
        let mut ids = Vec::with_capacity(self.len() + 2);
        let mut word_start = Vec::with_capacity(self.len() + 2);
        ids.push(CLS);
        word_start.push(false);
        ids.extend_from_slice(&self.ids);
        word_start.extend_from_slice(&self.word_start);
        ids.push(SEP);
        word_start.push(false);
        TokenizedSentence { ids, word_start }
    }

    pub fn word_count(&self) -> usize {
        self.word_start.iter().filter(|&&b| b).count()
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let longest = tokens[NUM_SPECIAL..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Vocab {
            tokens,
            index,
            longest,
        }
    }

    /// Reserved tokens, every corpus character, then greedy pair merges
    /// until `target_size` entries exist or no adjacent pair remains.
    /// Count ties go to the lexicographically smallest pair.
    pub fn build<'a, I>(corpus: I, target_size: usize) -> Result<Vocab, TokenizerError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if target_size < 6 {
            return Err(TokenizerError::TargetTooSmall(target_size));
        }
        let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let alphabet: BTreeSet<String> = word_counts
            .keys()
            .flat_map(|w| w.chars())
            .map(String::from)
            .collect();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut known: BTreeSet<String> = BTreeSet::new();
        for c in alphabet {
            known.insert(c.clone());
            tokens.push(c);
        }

        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .iter()
            .map(|(w, &n)| (w.chars().map(String::from).collect(), n))
            .collect();

        while tokens.len() < target_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (symbols, n) in &words {
                for pair in symbols.windows(2) {
                    *pairs.entry((&pair[0], &pair[1])).or_default() += n;
                }
            }
            // BTreeMap iterates in lexicographic order; keep the first maximum.
            let Some(((left, right), _)) =
                pairs
                    .into_iter()
                    .fold(None::<((&str, &str), usize)>, |best, (p, n)| match best {
                        Some((_, bn)) if bn >= n => best,
                        _ => Some((p, n)),
                    })
            else {
                break;
            };
            let (left, right) = (left.to_string(), right.to_string());
            let merged = format!("{left}{right}");
            if known.insert(merged.clone()) {
                tokens.push(merged.clone());
            }
            for (symbols, _) in &mut words {
                let mut out = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut symbols[i]));
                        i += 1;
                    }
                }
                *symbols = out;
            }
        }
        Ok(Vocab::from_tokens(tokens))
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
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest match inside each whitespace word.
    pub fn encode(&self, text: &str) -> TokenizedSentence {
        let mut out = TokenizedSentence::default();
        for word in text.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let mut i = 0;
            let mut first = true;
            while i < chars.len() {
                let mut matched = None;
                let max = self.longest.min(chars.len() - i);
                for len in (1..=max).rev() {
                    let piece: String = chars[i..i + len].iter().collect();
                    if let Some(&id) = self.index.get(&piece) {
                        if !is_special(id) {
                            matched = Some((id, len));
                            break;
                        }
                    }
                }
                let (id, len) = matched.unwrap_or((UNK, 1));
                out.ids.push(id);
                out.word_start.push(first);
                first = false;
                i += len;
            }
        }
        out
    }

    /// Joins subwords within words and words with single spaces. Special
    /// tokens other than UNK are dropped.
    pub fn decode(&self, sentence: &TokenizedSentence) -> String {
        let mut out = String::new();
        for (&id, &start) in sentence.ids.iter().zip(&sentence.word_start) {
            if is_special(id) && id != UNK {
                continue;
            }
            if start && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab, String> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err("missing reserved tokens on the first five lines".into());
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err("duplicate token".into());
        }
        Ok(Vocab::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocab::from_text(&text).map_err(|reason| TokenizerError::BadVocabFile {
            path: path.display().to_string(),
            reason,
        })
    }
}

/// Non-empty trimmed lines of a UTF-8 text file.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, TokenizerError> {
    let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// A padded batch: `ids[r]` has exactly `max_len` entries, `valid[r][i]` is
/// false on padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub word_start: Vec<Vec<bool>>,
    pub valid: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded rows.
    pub fn rows(&self) -> Vec<TokenizedSentence> {
        (0..self.len())
            .map(|r| {
                let n = self.valid[r].iter().filter(|&&v| v).count();
                TokenizedSentence {
                    ids: self.ids[r][..n].to_vec(),
                    word_start: self.word_start[r][..n].to_vec(),
                }
            })
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.valid.iter().flatten().filter(|&&v| v).count()
    }
}

/// Packs sentences in order; a sentence that would overflow `max_len` opens
/// a new row. A sentence longer than `max_len` is truncated, keeping its
/// final token.
pub fn pack_rows(sentences: &[&TokenizedSentence], max_len: usize) -> Vec<TokenizedSentence> {
    let mut rows = Vec::new();
    let mut current = TokenizedSentence::default();
    for s in sentences {
        let piece = if s.len() > max_len {
            let mut ids = s.ids[..max_len - 1].to_vec();
            let mut ws = s.word_start[..max_len - 1].to_vec();
            ids.push(*s.ids.last().unwrap());
            ws.push(*s.word_start.last().unwrap());
            TokenizedSentence {
                ids,
                word_start: ws,
            }
        } else {
            (*s).clone()
        };
        if !current.is_empty() && current.len() + piece.len() > max_len {
            rows.push(std::mem::take(&mut current));
        }
        current.ids.extend_from_slice(&piece.ids);
        current.word_start.extend_from_slice(&piece.word_start);
    }
    if !current.is_empty() {
        rows.push(current);
    }
    rows
}

/// One epoch of padded batches over a seeded shuffle of `sentences`.
#[derive(Debug)]
pub struct BatchIter {
    rows: std::vec::IntoIter<TokenizedSentence>,
    max_len: usize,
    batch_size: usize,
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut batch = Batch {
            ids: Vec::new(),
            word_start: Vec::new(),
            valid: Vec::new(),
        };
        for row in self.rows.by_ref().take(self.batch_size) {
            let pad = self.max_len - row.len();
            let mut ids = row.ids;
            let mut ws = row.word_start;
            let mut valid = vec![true; ids.len()];
            ids.extend(std::iter::repeat_n(PAD, pad));
            ws.extend(std::iter::repeat_n(false, pad));
            valid.extend(std::iter::repeat_n(false, pad));
            batch.ids.push(ids);
            batch.word_start.push(ws);
            batch.valid.push(valid);
        }
        (!batch.is_empty()).then_some(batch)
    }
}

pub fn batch_iter(
    sentences: &[TokenizedSentence],
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchIter, TokenizerError> {
    if max_len < 8 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    if batch_size == 0 {
        return Err(TokenizerError::ZeroBatch);
    }
    let mut order: Vec<&TokenizedSentence> = sentences.iter().filter(|s| !s.is_empty()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchIter {
        rows: pack_rows(&order, max_len).into_iter(),
        max_len,
        batch_size,
    })
}

/// Runs `iter` on a producer thread behind a bounded FIFO queue.
pub fn prefetch<I>(iter: I, capacity: usize) -> Receiver<I::Item>
where
    I: Iterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = sync_channel(capacity.max(1));
    thread::spawn(move || {
        for item in iter {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx
}
