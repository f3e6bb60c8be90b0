//! Rank file formats and teacher post-processing.
//!
//! # RKGT v1
//!
//! Little-endian binary, header then four row-major blocks:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "RKGT"
//! 4       4   u32     version = 1
//! 8       8   u64     T (positions)
//! 16      2   u16     k_max
//! 18      4   u32     vocab_size
//! 22      1   u8      flags, bit0 = logits present
//! 23      2·T         L: row lengths, u16
//!         4·T·k_max   R: token ids, u32, padded with 0xFFFFFFFF
//!         2·T·k_max   O: group-start indices, u16
//!         4·T·k_max   F: teacher logits, f32 (only if flags bit0)
//! ```
//!
//! # JSON lines
//!
//! A header object followed by one object per position:
//!
//! ```text
//! {"format":"rkgt-jsonl","version":1,"k_max":3,"vocab_size":5,"comment":"..."}
//! {"t":0,"ranks":["the","a"],"groups":[0,1]}
//! {"t":1,"ranks":["cat"],"groups":[0],"logits":[3.5]}
//! ```
//!
//! Tokens are vocabulary strings so files can be exchanged with tools that
//! use their own id assignment.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenStream, Vocabulary};
use crate::rankgen::{RankError, RankGroundTruth};
use crate::PAD_ID;

pub const MAGIC: &[u8; 4] = b"RKGT";
pub const VERSION: u32 = 1;
pub const JSONL_FORMAT: &str = "rkgt-jsonl";
pub const JSONL_VERSION: u32 = 1;
const HEADER_LEN: usize = 23;
const FLAG_LOGITS: u8 = 1;

/// Generator used by [`random_teacher`]: ChaCha8 seeded through
/// `seed_from_u64`, bounded draws by modulo with rejection of the biased
/// tail, duplicates redrawn.
pub const RANDOM_TEACHER_PRNG: &str = "chacha8/seed_from_u64/mod-reject/v1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, expected \"RKGT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    Version(u32),
    #[error("unknown flag bits {0:#04x}")]
    Flags(u8),
    #[error("file truncated in {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last block")]
    Trailing(usize),
    #[error("row {row} has length {len} but k_max is {k_max}")]
    LengthExceedsK { row: usize, len: u16, k_max: usize },
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("rank file has {ranks} rows but the stream has {stream} tokens")]
    Misaligned { ranks: usize, stream: usize },
    #[error("teacher ranks need a logit block")]
    MissingLogits,
    #[error("row {0} has a non-finite teacher logit")]
    NonFinite(usize),
    #[error("row {0} is not strongly ordered")]
    WeakOrder(usize),
    #[error("k = {k} exceeds the vocabulary size {vocab_size}")]
    KTooLarge { k: usize, vocab_size: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes a rank matrix to RKGT v1 bytes.
pub fn to_bytes(ranks: &RankGroundTruth) -> Vec<u8> {
    let cells = ranks.len() * ranks.k_max();
    let logits = ranks.raw_logits();
    let mut out = Vec::with_capacity(
        HEADER_LEN + 2 * ranks.len() + cells * (6 + if logits.is_some() { 4 } else { 0 }),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ranks.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ranks.k_max() as u16).to_le_bytes());
    out.extend_from_slice(&ranks.vocab_size().to_le_bytes());
    out.push(if logits.is_some() { FLAG_LOGITS } else { 0 });
    for &l in ranks.lengths() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &id in ranks.raw_ranks() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for &g in ranks.raw_groups() {
        out.extend_from_slice(&g.to_le_bytes());
    }
    if let Some(f) = logits {
        for &x in f {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn block<T, const N: usize>(
        &mut self,
        count: usize,
        what: &'static str,
        decode: fn([u8; N]) -> T,
    ) -> Result<Vec<T>, FormatError> {
        let bytes = count
            .checked_mul(N)
            .ok_or(FormatError::Truncated(what))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(N)
            .map(|c| decode(c.try_into().expect("chunk of N bytes")))
            .collect())
    }
}

/// Parses RKGT v1 bytes, validating every row.
pub fn from_bytes(bytes: &[u8]) -> Result<RankGroundTruth, FormatError> {
    let mut cur = Cursor { buf: bytes };
    let magic: [u8; 4] = cur.take(4, "header")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(cur.take(4, "header")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let len = u64::from_le_bytes(cur.take(8, "header")?.try_into().expect("8 bytes"));
    let k_max = u16::from_le_bytes(cur.take(2, "header")?.try_into().expect("2 bytes")) as usize;
    let vocab_size = u32::from_le_bytes(cur.take(4, "header")?.try_into().expect("4 bytes"));
    let flags = cur.take(1, "header")?[0];
    if flags & !FLAG_LOGITS != 0 {
        return Err(FormatError::Flags(flags));
    }
    let len = usize::try_from(len).map_err(|_| FormatError::Truncated("lengths"))?;
    if len > bytes.len() {
        // every row needs at least two bytes of L
        return Err(FormatError::Truncated("lengths"));
    }
    let cells = len
        .checked_mul(k_max)
        .ok_or(FormatError::Truncated("ranks"))?;

    let lengths = cur.block(len, "lengths", u16::from_le_bytes)?;
    if let Some((row, &l)) = lengths
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize > k_max)
    {
        return Err(FormatError::LengthExceedsK { row, len: l, k_max });
    }
    let ranks = cur.block(cells, "ranks", u32::from_le_bytes)?;
    let groups = cur.block(cells, "groups", u16::from_le_bytes)?;
    let logits = if flags & FLAG_LOGITS != 0 {
        Some(cur.block(cells, "logits", f32::from_le_bytes)?)
    } else {
        None
    };
    if !cur.buf.is_empty() {
        return Err(FormatError::Trailing(cur.buf.len()));
    }
    Ok(RankGroundTruth::from_parts(
        k_max, vocab_size, ranks, lengths, groups, logits,
    )?)
}

pub fn write_ranks(ranks: &RankGroundTruth, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(ranks)).map_err(io_err(path))
}

pub fn read_ranks(path: impl AsRef<Path>) -> Result<RankGroundTruth, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: u32,
    k_max: usize,
    vocab_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comment: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRow {
    t: usize,
    ranks: Vec<String>,
    groups: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f32>>,
}

/// Writes the JSON-lines form; `comment` lands in the header object.
pub fn write_jsonl(
    ranks: &RankGroundTruth,
    vocab: &Vocabulary,
    comment: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header = JsonlHeader {
        format: JSONL_FORMAT.into(),
        version: JSONL_VERSION,
        k_max: ranks.k_max(),
        vocab_size: ranks.vocab_size(),
        comment: comment.map(str::to_owned),
    };
    let json = |e: serde_json::Error| FormatError::Json {
        line: 0,
        message: e.to_string(),
    };
    serde_json::to_writer(&mut out, &header).map_err(json)?;
    out.write_all(b"\n").map_err(io_err(path))?;
    for t in 0..ranks.len() {
        let row = ranks.row(t);
        let line = JsonlRow {
            t,
            ranks: row
                .ids
                .iter()
                .map(|&id| vocab.token(id).unwrap_or("<?>").to_owned())
                .collect(),
            groups: row.groups.to_vec(),
            logits: row.logits.map(<[f32]>::to_vec),
        };
        serde_json::to_writer(&mut out, &line).map_err(json)?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads the JSON-lines form. Returns the ranks and the header comment.
pub fn read_jsonl(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<(RankGroundTruth, Option<String>), FormatError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |line: usize, message: String| FormatError::Json { line: line + 1, message };

    let (_, first) = lines.next().ok_or(FormatError::Truncated("header"))?;
    let first = first.map_err(io_err(path))?;
    let header: JsonlHeader = serde_json::from_str(&first).map_err(|e| bad(0, e.to_string()))?;
    if header.format != JSONL_FORMAT {
        return Err(bad(0, format!("unexpected format {:?}", header.format)));
    }
    if header.version != JSONL_VERSION {
        return Err(FormatError::Version(header.version));
    }
    let k = header.k_max;
    let mut ranks = Vec::new();
    let mut groups = Vec::new();
    let mut lengths = Vec::new();
    let mut logits: Option<Vec<f32>> = None;
    for (n, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
        if row.t != lengths.len() {
            return Err(bad(n, format!("expected t = {}, found {}", lengths.len(), row.t)));
        }
        let l = row.ranks.len();
        if l > k || row.groups.len() != l {
            return Err(bad(n, format!("row of {l} ranks does not fit k_max {k}")));
        }
        if row.logits.as_ref().is_some_and(|f| f.len() != l) {
            return Err(bad(n, "logits and ranks differ in length".into()));
        }
        if (row.logits.is_some()) != (logits.is_some()) {
            if lengths.is_empty() && row.logits.is_some() {
                logits = Some(Vec::new());
            } else {
                return Err(bad(n, "logits must be present on every row or none".into()));
            }
        }
        for tok in &row.ranks {
            let id = vocab
                .id(tok)
                .ok_or_else(|| bad(n, format!("token {tok:?} is not in the vocabulary")))?;
            ranks.push(id);
        }
        ranks.extend(std::iter::repeat_n(PAD_ID, k - l));
        groups.extend_from_slice(&row.groups);
        groups.extend(l as u16..k as u16);
        if let (Some(dst), Some(src)) = (logits.as_mut(), row.logits) {
            dst.extend_from_slice(&src);
            dst.extend(std::iter::repeat_n(0.0, k - l));
        }
        lengths.push(l as u16);
    }
    let out = RankGroundTruth::from_parts(k, header.vocab_size, ranks, lengths, groups, logits)?;
    Ok((out, header.comment))
}

/// Ranks from a probabilistic teacher: logits present, finite, and every
/// row strongly ordered.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRanks(RankGroundTruth);

impl TeacherRanks {
    pub fn new(ranks: RankGroundTruth) -> Result<Self, FormatError> {
        if !ranks.has_logits() {
            return Err(FormatError::MissingLogits);
        }
        for t in 0..ranks.len() {
            let row = ranks.row(t);
            if row.logits.is_some_and(|f| f.iter().any(|x| !x.is_finite())) {
                return Err(FormatError::NonFinite(t));
            }
            if row.groups.iter().enumerate().any(|(i, &g)| g as usize != i) {
                return Err(FormatError::WeakOrder(t));
            }
        }
        Ok(TeacherRanks(ranks))
    }

    pub fn ranks(&self) -> &RankGroundTruth {
        &self.0
    }

    pub fn into_inner(self) -> RankGroundTruth {
        self.0
    }
}

/// Moves each position's ground truth to rank 0.
///
/// Tokens ranked above the ground truth shift down one slot, keeping their
/// relative order. The logit column keeps its slot order, so the ground
/// truth takes the row's largest logit and every displaced token takes the
/// logit of the slot it lands in. A ground truth missing from its row is
/// inserted at rank 0; a full row drops its last token, a shorter row grows
/// by one and the new last slot repeats the previous last logit.
pub fn float_gt_to_top(
    teacher: &TeacherRanks,
    stream: &TokenStream,
) -> Result<TeacherRanks, FormatError> {
    let src = teacher.ranks();
    if src.len() != stream.len() {
        return Err(FormatError::Misaligned {
            ranks: src.len(),
            stream: stream.len(),
        });
    }
    let mut out = src.clone();
    let k = out.k_max;
    let logits = out.logits.as_mut().ok_or(FormatError::MissingLogits)?;
    for (t, &gt) in stream.ids().iter().enumerate() {
        let l = out.lengths[t] as usize;
        let ids = &mut out.ranks[t * k..(t + 1) * k];
        let f = &mut logits[t * k..(t + 1) * k];
        match ids[..l].iter().position(|&id| id == gt) {
            Some(0) => {}
            Some(j) => ids[..=j].rotate_right(1),
            None => {
                if l < k {
                    f[l] = f[l - 1];
                    out.lengths[t] += 1;
                }
                let end = out.lengths[t] as usize;
                ids[..end].rotate_right(1);
                ids[0] = gt;
            }
        }
    }
    TeacherRanks::new(out)
}

fn bounded(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    let limit = u64::MAX - u64::MAX % n;
    loop {
        let x = rng.next_u64();
        if x < limit {
            return x % n;
        }
    }
}

/// Ground truth at rank 0 followed by `k - 1` distinct uniform draws from
/// the rest of the vocabulary. See [`RANDOM_TEACHER_PRNG`].
pub fn random_teacher(
    stream: &TokenStream,
    k: usize,
    vocab_size: u32,
    seed: u64,
) -> Result<RankGroundTruth, FormatError> {
    if k == 0 || k > vocab_size as usize || k > u16::MAX as usize {
        return Err(FormatError::KTooLarge { k, vocab_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = stream.len();
    let mut ranks = Vec::with_capacity(len * k);
    for &gt in stream.ids() {
        let row_start = ranks.len();
        ranks.push(gt);
        while ranks.len() - row_start < k {
            let draw = bounded(&mut rng, vocab_size as u64 - 1) as u32;
            let id = if draw >= gt { draw + 1 } else { draw };
            if !ranks[row_start..].contains(&id) {
                ranks.push(id);
            }
        }
    }
    let groups = (0..len).flat_map(|_| 0..k as u16).collect();
    Ok(RankGroundTruth::from_parts(
        k,
        vocab_size,
        ranks,
        vec![k as u16; len],
        groups,
        None,
    )?)
}
