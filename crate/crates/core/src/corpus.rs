//! Whitespace-tokenized corpora, frequency-ordered vocabularies and
//! contiguous-lane batching.
//!
//! A corpus file is UTF-8 text; tokens are separated by whitespace and every
//! newline contributes one `<eos>` token. A vocabulary file holds one token
//! per line, the line number being the id.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("unknown token {0:?} and the vocabulary has no {UNK}")]
    UnknownToken(String),
    #[error("vocabulary has no {EOS} token")]
    MissingEos,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: u32 },
    #[error("invalid batch plan: {0}")]
    InvalidPlan(&'static str),
    #[error("stream of {len} tokens is too short for {batch_size} lanes of {seq_len}+1 tokens")]
    TooShort {
        len: usize,
        batch_size: usize,
        seq_len: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

enum Piece<'a> {
    Word(&'a str),
    Eos,
}

fn pieces(text: &str) -> impl Iterator<Item = Piece<'_>> {
    let mut lines = text.split('\n').peekable();
    std::iter::from_fn(move || {
        let line = lines.next()?;
        let terminated = lines.peek().is_some();
        Some(
            line.split_whitespace()
                .map(Piece::Word)
                .chain(terminated.then_some(Piece::Eos)),
        )
    })
    .flatten()
}

/// Dense token ids ordered by (count desc, bytes asc).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    unk_id: Option<u32>,
    eos_id: u32,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens already in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if id_of.insert(tok.clone(), i as u32).is_some() {
                return Err(CorpusError::DuplicateToken(tok.clone()));
            }
        }
        let eos_id = *id_of.get(EOS).ok_or(CorpusError::MissingEos)?;
        let unk_id = id_of.get(UNK).copied();
        Ok(Vocabulary {
            tokens,
            id_of,
            unk_id,
            eos_id,
        })
    }

    /// Counts tokens in `text` and keeps those seen at least `min_count`
    /// times. `<eos>` is always kept. Every entry of `specials` is kept too;
    /// `<unk>` is credited with the occurrences of the pruned tokens.
    pub fn build(text: &str, min_count: u64, specials: &[&str]) -> Result<Self, CorpusError> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut total = 0usize;
        for piece in pieces(text) {
            let tok = match piece {
                Piece::Word(w) => w,
                Piece::Eos => EOS,
            };
            *counts.entry(tok).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(CorpusError::Empty);
        }

        let wants_unk = specials.contains(&UNK);
        let mut pruned = 0u64;
        let mut kept: Vec<(&str, u64)> = Vec::with_capacity(counts.len());
        for (&tok, &n) in &counts {
            if n >= min_count || tok == EOS || specials.contains(&tok) {
                kept.push((tok, n));
            } else {
                pruned += n;
            }
        }
        for &special in specials.iter().chain([EOS].iter()) {
            if !counts.contains_key(special) && !kept.iter().any(|(t, _)| *t == special) {
                kept.push((special, 0));
            }
        }
        if wants_unk {
            if let Some(entry) = kept.iter_mut().find(|(t, _)| *t == UNK) {
                entry.1 += pruned;
            }
        }
        kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.as_bytes().cmp(b.0.as_bytes())));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()).collect())
    }

    pub fn build_from_file(
        path: impl AsRef<Path>,
        min_count: u64,
        specials: &[&str],
    ) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::build(&text, min_count, specials)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for tok in &self.tokens {
            writeln!(out, "{tok}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk_id
    }

    /// Maps text to ids, substituting `<unk>` for out-of-vocabulary tokens.
    pub fn encode(&self, text: &str) -> Result<TokenStream, CorpusError> {
        let mut ids = Vec::new();
        for piece in pieces(text) {
            let id = match piece {
                Piece::Eos => self.eos_id,
                Piece::Word(w) => match (self.id(w), self.unk_id) {
                    (Some(id), _) | (None, Some(id)) => id,
                    (None, None) => return Err(CorpusError::UnknownToken(w.to_owned())),
                },
            };
            ids.push(id);
        }
        TokenStream::new(ids, self.len() as u32)
    }

    /// Inverse of [`Vocabulary::encode`] when no `<unk>` substitution happened.
    pub fn decode(&self, stream: &TokenStream) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in stream.ids() {
            if id == self.eos_id {
                out.push('\n');
                line_start = true;
                continue;
            }
            if !line_start {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK));
            line_start = false;
        }
        out
    }
}

/// The corpus as one contiguous id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    vocab_size: u32,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, vocab_size: u32) -> Result<Self, CorpusError> {
        if ids.is_empty() {
            return Err(CorpusError::Empty);
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(CorpusError::IdOutOfRange { id, vocab_size });
        }
        Ok(TokenStream { ids, vocab_size })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        vocab.encode(&text)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Width of one step along each lane.
    pub seq_len: usize,
    #[serde(default)]
    pub drop_remainder: bool,
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan {
            batch_size: 16,
            seq_len: 16,
            drop_remainder: false,
        }
    }
}

/// One step over all lanes. Rows are lanes; `width` columns per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub width: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Absolute stream index of each target, aligned with `targets`.
    pub target_positions: Vec<usize>,
}

/// Iterator over the steps of a [`BatchPlan`] applied to a stream.
#[derive(Debug)]
pub struct Batches<'a> {
    ids: &'a [u32],
    plan: BatchPlan,
    lane_len: usize,
    offset: usize,
}

impl Batches<'_> {
    /// Number of steps this iterator yields in total.
    pub fn steps(&self) -> usize {
        let targets = self.lane_len - 1;
        if self.plan.drop_remainder {
            targets / self.plan.seq_len
        } else {
            targets.div_ceil(self.plan.seq_len)
        }
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.lane_len - 1 - self.offset;
        if remaining == 0 || (self.plan.drop_remainder && remaining < self.plan.seq_len) {
            return None;
        }
        let width = remaining.min(self.plan.seq_len);
        let rows = self.plan.batch_size;
        let mut batch = Batch {
            width,
            inputs: Vec::with_capacity(rows * width),
            targets: Vec::with_capacity(rows * width),
            target_positions: Vec::with_capacity(rows * width),
        };
        for lane in 0..rows {
            let start = lane * self.lane_len + self.offset;
            for j in 0..width {
                batch.inputs.push(self.ids[start + j]);
                batch.targets.push(self.ids[start + j + 1]);
                batch.target_positions.push(start + j + 1);
            }
        }
        self.offset += width;
        Some(batch)
    }
}

/// Splits the stream into `batch_size` contiguous lanes of `⌊T/batch_size⌋`
/// tokens and walks them `seq_len` targets at a time.
pub fn batchify(stream: &TokenStream, plan: BatchPlan) -> Result<Batches<'_>, CorpusError> {
    if plan.batch_size == 0 {
        return Err(CorpusError::InvalidPlan("batch_size must be at least 1"));
    }
    if plan.seq_len == 0 {
        return Err(CorpusError::InvalidPlan("seq_len must be at least 1"));
    }
    let len = stream.len();
    if len < plan.batch_size * (plan.seq_len + 1) {
        return Err(CorpusError::TooShort {
            len,
            batch_size: plan.batch_size,
            seq_len: plan.seq_len,
        });
    }
    Ok(Batches {
        ids: stream.ids(),
        plan,
        lane_len: len / plan.batch_size,
        offset: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOY: &str = "the cat sat\nthe cat ran\n";

    #[test]
    fn vocab_orders_by_count_then_bytes() {
        let v = Vocabulary::build(TOY, 1, &[EOS]).unwrap();
        assert_eq!(v.tokens(), &["<eos>", "cat", "the", "ran", "sat"]);
        assert_eq!(v.eos_id(), 0);
        assert_eq!(v.unk_id(), None);
    }

    #[test]
    fn eos_comes_from_newlines_without_specials() {
        let v = Vocabulary::build("a a b\n", 1, &[]).unwrap();
        assert_eq!(v.tokens(), &["a", "<eos>", "b"]);
    }

    #[test]
    fn min_count_prunes_into_unk() {
        let v = Vocabulary::build(TOY, 3, &[EOS, UNK]).unwrap();
        // unk inherits the 6 pruned occurrences, eos keeps its 2
        assert_eq!(v.tokens(), &["<unk>", "<eos>"]);
        let s = v.encode("the cat sat\n").unwrap();
        assert_eq!(s.ids(), &[0, 0, 0, 1]);
    }

    #[test]
    fn specials_without_occurrences_sort_last() {
        let v = Vocabulary::build(TOY, 1, &[EOS, UNK]).unwrap();
        assert_eq!(v.tokens().last().unwrap(), UNK);
        assert_eq!(v.id("sat"), Some(4));
    }

    #[test]
    fn encode_appends_eos_per_line() {
        let v = Vocabulary::build(TOY, 1, &[EOS]).unwrap();
        assert_eq!(v.encode("the cat sat\n").unwrap().ids(), &[2, 1, 4, 0]);
    }

    #[test]
    fn empty_text_is_an_error() {
        let v = Vocabulary::build(TOY, 1, &[EOS]).unwrap();
        assert!(matches!(v.encode(""), Err(CorpusError::Empty)));
        assert!(matches!(Vocabulary::build("  ", 1, &[]), Err(CorpusError::Empty)));
    }

    #[test]
    fn unknown_tokens() {
        let no_unk = Vocabulary::build(TOY, 1, &[EOS]).unwrap();
        assert!(matches!(no_unk.encode("dog\n"), Err(CorpusError::UnknownToken(t)) if t == "dog"));
        let with_unk = Vocabulary::build(TOY, 1, &[EOS, UNK]).unwrap();
        let unk = with_unk.unk_id().unwrap();
        assert_eq!(with_unk.encode("dog\n").unwrap().ids(), &[unk, 0]);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(TOY, 1, &[EOS, UNK]).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn loaded_vocab_requires_eos_and_unique_tokens() {
        assert!(matches!(
            Vocabulary::from_tokens(vec!["a".into()]),
            Err(CorpusError::MissingEos)
        ));
        assert!(matches!(
            Vocabulary::from_tokens(vec![EOS.into(), "a".into(), "a".into()]),
            Err(CorpusError::DuplicateToken(_))
        ));
    }

    fn stream(len: usize) -> TokenStream {
        TokenStream::new((0..len as u32).collect(), len as u32).unwrap()
    }

    #[test]
    fn batchify_lanes_and_widths() {
        let s = stream(10);
        let plan = BatchPlan {
            batch_size: 2,
            seq_len: 3,
            drop_remainder: false,
        };
        let batches: Vec<_> = batchify(&s, plan).unwrap().collect();
        assert_eq!(batches.iter().map(|b| b.width).collect::<Vec<_>>(), vec![3, 1]);
        assert_eq!(batches[0].inputs, vec![0, 1, 2, 5, 6, 7]);
        assert_eq!(batches[0].target_positions, vec![1, 2, 3, 6, 7, 8]);
        assert_eq!(batches[1].target_positions, vec![4, 9]);
        assert_eq!(batchify(&s, plan).unwrap().steps(), 2);

        let dropped = BatchPlan {
            drop_remainder: true,
            ..plan
        };
        let it = batchify(&s, dropped).unwrap();
        assert_eq!(it.steps(), 1);
        assert_eq!(it.count(), 1);
    }

    #[test]
    fn batchify_rejects_short_streams() {
        let plan = BatchPlan {
            batch_size: 4,
            seq_len: 1,
            drop_remainder: false,
        };
        assert!(matches!(batchify(&stream(3), plan), Err(CorpusError::TooShort { .. })));
        let bad = BatchPlan {
            batch_size: 0,
            ..plan
        };
        assert!(matches!(batchify(&stream(3), bad), Err(CorpusError::InvalidPlan(_))));
    }

    proptest! {
        #[test]
        fn single_lane_visits_every_target_once(len in 2usize..200, seq_len in 1usize..20) {
            prop_assume!(len > seq_len);
            let s = stream(len);
            let plan = BatchPlan { batch_size: 1, seq_len, drop_remainder: false };
            let positions: Vec<usize> = batchify(&s, plan)
                .unwrap()
                .flat_map(|b| b.target_positions)
                .collect();
            prop_assert_eq!(positions, (1..len).collect::<Vec<_>>());
        }

        #[test]
        fn decode_encode_identity(ids in proptest::collection::vec(0u32..6, 1..60)) {
            let vocab = Vocabulary::from_tokens(
                ["<eos>", "a", "bb", "c", "dd", "e"].iter().map(|s| s.to_string()).collect(),
            ).unwrap();
            let s = TokenStream::new(ids, 6).unwrap();
            prop_assert_eq!(vocab.encode(&vocab.decode(&s)).unwrap(), s);
        }

        #[test]
        fn vocab_ids_are_dense(words in proptest::collection::vec("[a-e]{1,3}", 1..50)) {
            let text = words.join(" ") + "\n";
            let v = Vocabulary::build(&text, 1, &[EOS, UNK]).unwrap();
            for (i, tok) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(tok), Some(i as u32));
            }
        }
    }
}
