//! Perplexity, top-k accuracy and rank/frequency statistics.
//!
//! The student only scores positions with a full context window, so the
//! first `context_len` tokens of a stream are skipped and counted.

use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::TokenStream;
use crate::num::{log_sum_exp, pairwise_sum, Real};
use crate::rankgen::RankGroundTruth;
use crate::student::{StudentError, StudentParams};

/// Contexts per forward pass during evaluation.
const EVAL_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scorable positions: stream of {len} tokens, context window {context_len}")]
    NoScorablePositions { len: usize, context_len: usize },
    #[error("k = {k} exceeds the vocabulary of {vocab}")]
    KTooLarge { k: usize, vocab: usize },
    #[error("k values must be positive and strictly ascending")]
    KsUnsorted,
    #[error("ranks cover {ranks} positions but the stream has {stream}")]
    Misaligned { ranks: usize, stream: usize },
    #[error("vocabulary sizes differ: model {model}, stream {stream}")]
    VocabMismatch { model: usize, stream: usize },
    #[error("need at least one bin")]
    NoBins,
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub mean_ce: f64,
    pub scored: usize,
    pub skipped: usize,
}

fn scorable(params_context: usize, stream: &TokenStream, vocab: usize) -> Result<(), EvalError> {
    if stream.vocab_size() as usize != vocab {
        return Err(EvalError::VocabMismatch {
            model: vocab,
            stream: stream.vocab_size() as usize,
        });
    }
    if stream.len() <= params_context {
        return Err(EvalError::NoScorablePositions {
            len: stream.len(),
            context_len: params_context,
        });
    }
    Ok(())
}

/// Calls `f(t, logits)` for every scorable position `t`, in order.
fn for_each_position<F: Real>(
    params: &StudentParams<F>,
    stream: &TokenStream,
    mut f: impl FnMut(usize, &[F]),
) -> Result<(), EvalError> {
    let n = params.context_len();
    scorable(n, stream, params.vocab_size())?;
    let ids = stream.ids();
    let positions: Vec<usize> = (n..ids.len()).collect();
    let mut contexts = Vec::with_capacity(EVAL_ROWS * n);
    for chunk in positions.chunks(EVAL_ROWS) {
        contexts.clear();
        for &t in chunk {
            contexts.extend_from_slice(&ids[t - n..t]);
        }
        let act = params.forward_batch(&contexts)?;
        for (r, &t) in chunk.iter().enumerate() {
            f(t, act.row(r));
        }
    }
    Ok(())
}

/// `exp` of the mean cross-entropy over scorable positions.
pub fn perplexity<F: Real>(
    params: &StudentParams<F>,
    stream: &TokenStream,
) -> Result<PerplexityReport, EvalError> {
    let ids = stream.ids();
    let mut losses = Vec::with_capacity(ids.len());
    for_each_position(params, stream, |t, w| {
        let (lse, _) = log_sum_exp(w);
        losses.push((lse - w[ids[t] as usize]).as_f64());
    })?;
    let mean_ce = pairwise_sum(&losses) / losses.len() as f64;
    Ok(PerplexityReport {
        perplexity: mean_ce.exp(),
        mean_ce,
        scored: losses.len(),
        skipped: ids.len() - losses.len(),
    })
}

/// 0-based rank of `gt` among the logits; ties go to the lower id.
pub fn rank_of<F: Real>(w: &[F], gt: u32) -> usize {
    let g = gt as usize;
    let target = w[g];
    w.iter()
        .enumerate()
        .filter(|&(j, &x)| x > target || (x == target && j < g))
        .count()
}

/// For each `k`, the fraction of scorable positions whose ground truth is
/// among the `k` largest logits.
pub fn topk_accuracy<F: Real>(
    params: &StudentParams<F>,
    stream: &TokenStream,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>, EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|p| p[0] >= p[1]) {
        return Err(EvalError::KsUnsorted);
    }
    let vocab = params.vocab_size();
    if let Some(&k) = ks.iter().find(|&&k| k > vocab) {
        return Err(EvalError::KTooLarge { k, vocab });
    }
    let ids = stream.ids();
    let mut hits = vec![0usize; ks.len()];
    let mut scored = 0usize;
    for_each_position(params, stream, |t, w| {
        let rank = rank_of(w, ids[t]);
        scored += 1;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    })?;
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / scored as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyRow {
    /// 1-based rank of the word type by ground-truth frequency.
    pub word_rank: usize,
    /// Occurrences as the ground truth.
    pub gt_freq: f64,
    /// Occurrences anywhere in a rank row, divided by `k`.
    pub topk_freq: f64,
    /// Mean `topk_freq` over the word's bin.
    pub bin_avg: f64,
}

/// Frequency/rank series for plotting how much probability mass the rank
/// ground truth spreads onto rare words.
///
/// Word types seen as ground truth or in any rank row are ordered by
/// ground-truth count (then row count, then id) and get ranks `1..=n`.
/// `k` is the longest row. Bins split `ln(rank)` into `n_bins` equal
/// widths, matching a log-scaled rank axis.
pub fn rank_frequency_stats(
    ranks: &RankGroundTruth,
    stream: &TokenStream,
    n_bins: usize,
) -> Result<Vec<FrequencyRow>, EvalError> {
    if ranks.len() != stream.len() {
        return Err(EvalError::Misaligned {
            ranks: ranks.len(),
            stream: stream.len(),
        });
    }
    if n_bins == 0 {
        return Err(EvalError::NoBins);
    }
    let vocab = stream.vocab_size().max(ranks.vocab_size()) as usize;
    let mut gt = vec![0u64; vocab];
    let mut topk = vec![0u64; vocab];
    for (t, &id) in stream.ids().iter().enumerate() {
        gt[id as usize] += 1;
        for &r in ranks.row(t).ids {
            topk[r as usize] += 1;
        }
    }
    let k = ranks.max_len().max(1) as f64;
    let mut types: Vec<usize> = (0..vocab).filter(|&w| gt[w] > 0 || topk[w] > 0).collect();
    types.sort_by(|&a, &b| gt[b].cmp(&gt[a]).then(topk[b].cmp(&topk[a])).then(a.cmp(&b)));

    let n = types.len();
    let bin_of = |rank: usize| {
        if n <= 1 {
            return 0;
        }
        let x = (rank as f64).ln() / (n as f64).ln();
        ((x * n_bins as f64) as usize).min(n_bins - 1)
    };
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (i, &w) in types.iter().enumerate() {
        let b = bin_of(i + 1);
        sums[b] += topk[w] as f64 / k;
        counts[b] += 1;
    }
    Ok(types
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let b = bin_of(i + 1);
            FrequencyRow {
                word_rank: i + 1,
                gt_freq: gt[w] as f64,
                topk_freq: topk[w] as f64 / k,
                bin_avg: sums[b] / counts[b] as f64,
            }
        })
        .collect())
}

pub fn write_frequency_csv(rows: &[FrequencyRow], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
