//! N-gram branching sets turned into weakly ordered top-k rank ground
//! truths.
//!
//! For every position `t` the ground-truth word holds rank 0. Then, for each
//! context schema from the widest to the narrowest, the words seen
//! continuing the same context anywhere in the corpus are appended, skipping
//! words already present. Words contributed by one (schema, context) lookup
//! share a group: they are tied in the resulting weak order.
//!
//! Construction is multi-pass: phase 1 collects one [`ContextTable`] per
//! schema, phase 2 merges the tables into a `T × k_max` rank matrix. Phase 1
//! can run one schema per worker and phase 2 partitions rows; the result is
//! identical to the sequential composition.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenStream, Vocabulary};
use crate::PAD_ID;

/// Largest stream [`brute_force_ranks`] accepts.
pub const ORACLE_MAX_LEN: usize = 100_000;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("schema {0} is invalid: at least one past token is required")]
    InvalidSchema(ContextSchema),
    #[error("max_past must be at least 1")]
    NoPastContext,
    #[error("schemas must be strictly ordered by (past desc, future desc); {0} follows {1}")]
    SchemasUnordered(ContextSchema, ContextSchema),
    #[error("cutoff q must be at least 2, got {0}")]
    InvalidCutoff(usize),
    #[error("k_max must be in 1..=65535, got {0}")]
    InvalidKMax(usize),
    #[error("stream of {len} tokens exceeds the oracle bound of {max}")]
    OracleTooLarge { len: usize, max: usize },
    #[error("position {position} out of range for {len} rows")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("invalid rank matrix: {0}")]
    Invalid(String),
    #[error("cannot start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// A context window: `past` tokens before the position and `future` after.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextSchema {
    pub past: usize,
    pub future: usize,
}

impl ContextSchema {
    pub fn new(past: usize, future: usize) -> Result<Self, RankError> {
        let schema = ContextSchema { past, future };
        if past == 0 {
            return Err(RankError::InvalidSchema(schema));
        }
        Ok(schema)
    }

    /// Whether `[t - past, t + future]` lies inside a stream of `len` tokens.
    pub fn fits(&self, t: usize, len: usize) -> bool {
        t >= self.past && t + self.future < len
    }

    /// Writes the context key of position `t` (past tokens, then future).
    fn key_into(&self, ids: &[u32], t: usize, key: &mut Vec<u32>) {
        key.clear();
        key.extend_from_slice(&ids[t - self.past..t]);
        key.extend_from_slice(&ids[t + 1..=t + self.future]);
    }
}

impl fmt::Display for ContextSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.future == 0 {
            write!(f, "{}p", self.past)
        } else {
            write!(f, "{}p-{}f", self.past, self.future)
        }
    }
}

/// All schemas up to the given sizes, widest past first, then widest future.
pub fn enumerate_schemas(
    max_past: usize,
    max_future: usize,
) -> Result<Vec<ContextSchema>, RankError> {
    if max_past == 0 {
        return Err(RankError::NoPastContext);
    }
    Ok((1..=max_past)
        .rev()
        .flat_map(|past| (0..=max_future).rev().map(move |future| ContextSchema { past, future }))
        .collect())
}

/// What happens to a context once it has `q` distinct continuations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowMode {
    /// The context is saturated and contributes nothing.
    #[default]
    Discard,
    /// Keep the first `q - 1` continuations, ignore the rest.
    Cap,
}

impl FromStr for OverflowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "discard" => Ok(OverflowMode::Discard),
            "cap" => Ok(OverflowMode::Cap),
            other => Err(format!("unknown overflow mode {other:?} (expected discard or cap)")),
        }
    }
}

impl fmt::Display for OverflowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OverflowMode::Discard => "discard",
            OverflowMode::Cap => "cap",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBuildConfig {
    pub schemas: Vec<ContextSchema>,
    pub cutoff_q: usize,
    pub k_max: usize,
    pub overflow: OverflowMode,
}

impl RankBuildConfig {
    pub fn validate(&self) -> Result<(), RankError> {
        for s in &self.schemas {
            if s.past == 0 {
                return Err(RankError::InvalidSchema(*s));
            }
        }
        for pair in self.schemas.windows(2) {
            if (pair[1].past, pair[1].future) >= (pair[0].past, pair[0].future) {
                return Err(RankError::SchemasUnordered(pair[1], pair[0]));
            }
        }
        if self.cutoff_q < 2 {
            return Err(RankError::InvalidCutoff(self.cutoff_q));
        }
        if self.k_max == 0 || self.k_max > u16::MAX as usize {
            return Err(RankError::InvalidKMax(self.k_max));
        }
        Ok(())
    }
}

/// Insertion-ordered continuations of one context.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchingSet {
    members: Vec<u32>,
    overflowed: bool,
}

impl BranchingSet {
    fn offer(&mut self, word: u32, cutoff_q: usize, mode: OverflowMode) {
        if self.overflowed || self.members.contains(&word) {
            return;
        }
        if self.members.len() < cutoff_q - 1 {
            self.members.push(word);
            return;
        }
        if mode == OverflowMode::Discard {
            self.overflowed = true;
            self.members = Vec::new();
        }
    }

    /// The continuations, or `None` once the set has overflowed.
    pub fn members(&self) -> Option<&[u32]> {
        (!self.overflowed).then_some(self.members.as_slice())
    }

    pub fn overflowed(&self) -> bool {
        self.overflowed
    }
}

/// Phase-1 output for one schema: context key → branching set.
#[derive(Clone, Debug)]
pub struct ContextTable {
    schema: ContextSchema,
    sets: HashMap<Box<[u32]>, BranchingSet>,
}

impl ContextTable {
    pub fn schema(&self) -> ContextSchema {
        self.schema
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Branching set for a context given as past tokens followed by future
    /// tokens.
    pub fn get(&self, key: &[u32]) -> Option<&BranchingSet> {
        self.sets.get(key)
    }

    fn lookup(&self, ids: &[u32], t: usize, key: &mut Vec<u32>) -> Option<&[u32]> {
        if !self.schema.fits(t, ids.len()) {
            return None;
        }
        self.schema.key_into(ids, t, key);
        self.sets.get(key.as_slice()).and_then(BranchingSet::members)
    }
}

/// One pass over the stream collecting every context of `schema`.
pub fn collect_orders(
    stream: &TokenStream,
    schema: ContextSchema,
    cutoff_q: usize,
    mode: OverflowMode,
) -> ContextTable {
    let ids = stream.ids();
    let mut sets: HashMap<Box<[u32]>, BranchingSet> = HashMap::new();
    let mut key = Vec::with_capacity(schema.past + schema.future);
    for t in 0..ids.len() {
        if !schema.fits(t, ids.len()) {
            continue;
        }
        schema.key_into(ids, t, &mut key);
        match sets.get_mut(key.as_slice()) {
            Some(set) => set.offer(ids[t], cutoff_q, mode),
            None => {
                let mut set = BranchingSet::default();
                set.offer(ids[t], cutoff_q, mode);
                sets.insert(key.as_slice().into(), set);
            }
        }
    }
    ContextTable { schema, sets }
}

/// Per-position weakly ordered top-k targets.
///
/// `ranks` is `len × k_max` row-major, padded with [`PAD_ID`]; `groups`
/// holds, for each slot, the index of the first slot of its tie group
/// (padding slots point at themselves). `lengths` is authoritative.
#[derive(Clone, Debug, PartialEq)]
pub struct RankGroundTruth {
    pub(crate) len: usize,
    pub(crate) k_max: usize,
    pub(crate) vocab_size: u32,
    pub(crate) ranks: Vec<u32>,
    pub(crate) lengths: Vec<u16>,
    pub(crate) groups: Vec<u16>,
    pub(crate) logits: Option<Vec<f32>>,
}

/// A borrowed view of one row, cut at its length.
#[derive(Clone, Copy, Debug)]
pub struct RankRow<'a> {
    pub ids: &'a [u32],
    pub groups: &'a [u16],
    pub logits: Option<&'a [f32]>,
}

impl RankRow<'_> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The first `k` slots.
    pub fn truncate(self, k: usize) -> Self {
        let k = k.min(self.ids.len());
        RankRow {
            ids: &self.ids[..k],
            groups: &self.groups[..k],
            logits: self.logits.map(|l| &l[..k]),
        }
    }
}

impl RankGroundTruth {
    /// GT-only rows for every position.
    pub fn ground_truth_only(stream: &TokenStream, k_max: usize) -> Result<Self, RankError> {
        if k_max == 0 || k_max > u16::MAX as usize {
            return Err(RankError::InvalidKMax(k_max));
        }
        let len = stream.len();
        let mut ranks = vec![PAD_ID; len * k_max];
        for (row, &gt) in ranks.chunks_exact_mut(k_max).zip(stream.ids()) {
            row[0] = gt;
        }
        let groups = (0..len).flat_map(|_| 0..k_max as u16).collect();
        Ok(RankGroundTruth {
            len,
            k_max,
            vocab_size: stream.vocab_size(),
            ranks,
            lengths: vec![1; len],
            groups,
            logits: None,
        })
    }

    /// Assembles and validates a rank matrix from raw blocks.
    pub fn from_parts(
        k_max: usize,
        vocab_size: u32,
        ranks: Vec<u32>,
        lengths: Vec<u16>,
        groups: Vec<u16>,
        logits: Option<Vec<f32>>,
    ) -> Result<Self, RankError> {
        if k_max == 0 || k_max > u16::MAX as usize {
            return Err(RankError::InvalidKMax(k_max));
        }
        let len = lengths.len();
        let cells = len * k_max;
        if ranks.len() != cells || groups.len() != cells {
            return Err(RankError::Invalid(format!(
                "expected {cells} cells, got {} ranks and {} groups",
                ranks.len(),
                groups.len()
            )));
        }
        if logits.as_ref().is_some_and(|l| l.len() != cells) {
            return Err(RankError::Invalid("logit block has the wrong size".into()));
        }
        let out = RankGroundTruth {
            len,
            k_max,
            vocab_size,
            ranks,
            lengths,
            groups,
            logits,
        };
        for t in 0..len {
            out.check_row(t)?;
        }
        Ok(out)
    }

    fn check_row(&self, t: usize) -> Result<(), RankError> {
        let l = self.lengths[t] as usize;
        if l == 0 || l > self.k_max {
            return Err(RankError::Invalid(format!(
                "row {t} has length {l}, k_max is {}",
                self.k_max
            )));
        }
        let row = self.row(t);
        for (i, &id) in row.ids.iter().enumerate() {
            if id >= self.vocab_size {
                return Err(RankError::Invalid(format!(
                    "row {t} slot {i}: id {id} >= vocab size {}",
                    self.vocab_size
                )));
            }
            if row.ids[..i].contains(&id) {
                return Err(RankError::Invalid(format!("row {t}: duplicate id {id}")));
            }
        }
        check_groups(row.groups).map_err(|e| RankError::Invalid(format!("row {t}: {e}")))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn lengths(&self) -> &[u16] {
        &self.lengths
    }

    pub fn has_logits(&self) -> bool {
        self.logits.is_some()
    }

    /// The full padded blocks, row-major.
    pub fn raw_ranks(&self) -> &[u32] {
        &self.ranks
    }

    pub fn raw_groups(&self) -> &[u16] {
        &self.groups
    }

    pub fn raw_logits(&self) -> Option<&[f32]> {
        self.logits.as_deref()
    }

    pub fn row(&self, t: usize) -> RankRow<'_> {
        let start = t * self.k_max;
        let l = self.lengths[t] as usize;
        RankRow {
            ids: &self.ranks[start..start + l],
            groups: &self.groups[start..start + l],
            logits: self.logits.as_ref().map(|f| &f[start..start + l]),
        }
    }

    /// Attaches (or replaces) the teacher logit block.
    pub fn with_logits(mut self, logits: Vec<f32>) -> Result<Self, RankError> {
        if logits.len() != self.len * self.k_max {
            return Err(RankError::Invalid("logit block has the wrong size".into()));
        }
        self.logits = Some(logits);
        Ok(self)
    }

    /// Largest row length actually used.
    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Checks `groups[0] == 0`, `groups[i] <= i` and `groups[groups[i]] == groups[i]`.
pub fn check_groups(groups: &[u16]) -> Result<(), String> {
    if let Some(&g0) = groups.first() {
        if g0 != 0 {
            return Err(format!("first group start is {g0}, expected 0"));
        }
    }
    for (i, &g) in groups.iter().enumerate() {
        let g = g as usize;
        if g > i || groups[g] as usize != g {
            return Err(format!("slot {i} has invalid group start {g}"));
        }
    }
    Ok(())
}

/// Appends the unseen members of one branching set as a single tie group.
fn merge_row(ranks: &mut [u32], groups: &mut [u16], len: &mut u16, members: &[u32]) {
    let k_max = ranks.len();
    let mut start = None;
    for &w in members {
        let l = *len as usize;
        if l == k_max {
            break;
        }
        if ranks[..l].contains(&w) {
            continue;
        }
        let s = *start.get_or_insert(l);
        ranks[l] = w;
        groups[l] = s as u16;
        *len += 1;
    }
}

fn apply_tables(
    ids: &[u32],
    tables: &[&ContextTable],
    first_row: usize,
    k_max: usize,
    ranks: &mut [u32],
    groups: &mut [u16],
    lengths: &mut [u16],
) {
    let mut key = Vec::new();
    for (i, len) in lengths.iter_mut().enumerate() {
        let t = first_row + i;
        let r = &mut ranks[i * k_max..(i + 1) * k_max];
        let g = &mut groups[i * k_max..(i + 1) * k_max];
        for table in tables {
            if *len as usize == k_max {
                break;
            }
            if let Some(members) = table.lookup(ids, t, &mut key) {
                merge_row(r, g, len, members);
            }
        }
    }
}

fn check_table_order(tables: &[&ContextTable]) -> Result<(), RankError> {
    for pair in tables.windows(2) {
        let (a, b) = (pair[0].schema, pair[1].schema);
        if (b.past, b.future) >= (a.past, a.future) {
            return Err(RankError::SchemasUnordered(b, a));
        }
    }
    Ok(())
}

/// Phase 2: GT first, then each table's branching set in schema order.
pub fn merge_orders(
    stream: &TokenStream,
    tables: &[ContextTable],
    k_max: usize,
) -> Result<RankGroundTruth, RankError> {
    let tables: Vec<&ContextTable> = tables.iter().collect();
    check_table_order(&tables)?;
    let mut out = RankGroundTruth::ground_truth_only(stream, k_max)?;
    apply_tables(
        stream.ids(),
        &tables,
        0,
        k_max,
        &mut out.ranks,
        &mut out.groups,
        &mut out.lengths,
    );
    Ok(out)
}

/// Builds the rank matrix with `jobs` workers.
///
/// With one worker each schema's table is collected, merged and dropped
/// before the next, so at most one table is resident.
pub fn build_ranks(
    stream: &TokenStream,
    config: &RankBuildConfig,
    jobs: usize,
) -> Result<RankGroundTruth, RankError> {
    config.validate()?;
    let k_max = config.k_max;
    let mut out = RankGroundTruth::ground_truth_only(stream, k_max)?;
    let ids = stream.ids();

    if jobs <= 1 {
        for &schema in &config.schemas {
            let table = collect_orders(stream, schema, config.cutoff_q, config.overflow);
            apply_tables(
                ids,
                &[&table],
                0,
                k_max,
                &mut out.ranks,
                &mut out.groups,
                &mut out.lengths,
            );
        }
        return Ok(out);
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| {
        let tables: Vec<ContextTable> = config
            .schemas
            .par_iter()
            .map(|&s| collect_orders(stream, s, config.cutoff_q, config.overflow))
            .collect();
        let tables: Vec<&ContextTable> = tables.iter().collect();
        let rows_per_chunk = stream.len().div_ceil(jobs * 4).max(1);
        out.ranks
            .par_chunks_mut(rows_per_chunk * k_max)
            .zip(out.groups.par_chunks_mut(rows_per_chunk * k_max))
            .zip(out.lengths.par_chunks_mut(rows_per_chunk))
            .enumerate()
            .for_each(|(chunk, ((r, g), l))| {
                apply_tables(ids, &tables, chunk * rows_per_chunk, k_max, r, g, l);
            });
    });
    Ok(out)
}

/// Single-pass reference construction with one dictionary over every
/// schema. Keeps every distinct continuation and applies the cutoff only
/// when reading a set back, which is equivalent to pruning on insertion.
pub fn brute_force_ranks(
    stream: &TokenStream,
    config: &RankBuildConfig,
) -> Result<RankGroundTruth, RankError> {
    config.validate()?;
    let ids = stream.ids();
    let len = ids.len();
    if len > ORACLE_MAX_LEN {
        return Err(RankError::OracleTooLarge {
            len,
            max: ORACLE_MAX_LEN,
        });
    }
    let context = |s: &ContextSchema, t: usize| -> Option<Vec<u32>> {
        if t < s.past || t + s.future >= len {
            return None;
        }
        let mut key: Vec<u32> = ids[t - s.past..t].to_vec();
        key.extend(&ids[t + 1..t + 1 + s.future]);
        Some(key)
    };

    let mut seen: HashMap<(usize, Vec<u32>), Vec<u32>> = HashMap::new();
    for t in 0..len {
        for (si, s) in config.schemas.iter().enumerate() {
            if let Some(key) = context(s, t) {
                let set = seen.entry((si, key)).or_default();
                if !set.contains(&ids[t]) {
                    set.push(ids[t]);
                }
            }
        }
    }

    let k = config.k_max;
    let q = config.cutoff_q;
    let mut ranks = vec![PAD_ID; len * k];
    let mut groups: Vec<u16> = (0..len).flat_map(|_| 0..k as u16).collect();
    let mut lengths = vec![0u16; len];
    for t in 0..len {
        let mut row: Vec<u32> = vec![ids[t]];
        let mut row_groups: Vec<u16> = vec![0];
        let mut present: HashSet<u32> = HashSet::from([ids[t]]);
        for (si, s) in config.schemas.iter().enumerate() {
            let Some(key) = context(s, t) else { continue };
            let Some(all) = seen.get(&(si, key)) else { continue };
            let members: &[u32] = match config.overflow {
                OverflowMode::Discard if all.len() >= q => continue,
                OverflowMode::Discard => all,
                OverflowMode::Cap => &all[..all.len().min(q - 1)],
            };
            let start = row.len() as u16;
            for &w in members {
                if row.len() < k && present.insert(w) {
                    row.push(w);
                    row_groups.push(start);
                }
            }
        }
        lengths[t] = row.len() as u16;
        ranks[t * k..t * k + row.len()].copy_from_slice(&row);
        groups[t * k..t * k + row.len()].copy_from_slice(&row_groups);
    }
    RankGroundTruth::from_parts(k, stream.vocab_size(), ranks, lengths, groups, None)
}

const MAX_CELL: usize = 12;

fn cell(token: &str) -> String {
    if token.chars().count() <= MAX_CELL {
        token.to_owned()
    } else {
        let mut s: String = token.chars().take(MAX_CELL - 1).collect();
        s.push('~');
        s
    }
}

/// Renders rank rows around `position` as a grid: one column per position,
/// the ground truth on the first line and each tie group in braces below.
/// Tokens longer than 12 characters are cut and marked with `~`.
pub fn render_branching_set(
    ranks: &RankGroundTruth,
    vocab: &Vocabulary,
    position: usize,
    context_width: usize,
) -> Result<String, RankError> {
    if position >= ranks.len() {
        return Err(RankError::PositionOutOfRange {
            position,
            len: ranks.len(),
        });
    }
    let name = |id: u32| cell(vocab.token(id).unwrap_or("?"));
    let first = position.saturating_sub(context_width);
    let last = (position + context_width).min(ranks.len() - 1);

    let mut columns: Vec<Vec<String>> = Vec::new();
    for t in first..=last {
        let row = ranks.row(t);
        let mut lines = vec![if t == position { format!("*{t}") } else { t.to_string() }];
        lines.push(name(row.ids[0]));
        for i in 1..row.len() {
            let mut s = String::new();
            if row.groups[i] as usize == i {
                s.push('{');
            }
            s.push_str(&name(row.ids[i]));
            if i + 1 == row.len() || row.groups[i + 1] as usize == i + 1 {
                s.push('}');
            }
            lines.push(s);
        }
        columns.push(lines);
    }

    let height = columns.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = columns
        .iter()
        .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in 0..height {
        let cells: Vec<String> = columns
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{:>w$}", c.get(line).map(String::as_str).unwrap_or("")))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if line == 1 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    Ok(out)
}
