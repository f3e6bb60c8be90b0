//! Training objectives over one position's logits, with exact gradients.
//!
//! Every loss takes the student's logits `w` over the full vocabulary and
//! returns the scalar loss plus `∂loss/∂w`. The `*_into` forms add
//! `scale · ∂loss/∂w` into a caller-owned buffer instead of allocating.
//!
//! Plackett-Luce with weak orders and discounts, for targets `y` with
//! group starts `o`, discounts `d` and guard `ε` (max-shifted space):
//!
//! ```text
//! m    = max(w)
//! Z    = Σ_j exp(w_j - m)
//! C_i  = Σ_{j<i} exp(w_{y_j} - m)
//! loss = Σ_i d_i · [ ln(Z - C_{o_i} + ε) + m - w_{y_i} ]
//! ```
//!
//! With `o_i = i` this is the top-k PL negative log-likelihood; slots
//! sharing a group start are all normalised by the same partition, i.e.
//! plain softmax cross-entropy inside the tie group. For `k = 1` and `ε = 0`
//! it is exactly [`ce_loss`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{argmax, pairwise_sum, Real};
use crate::rankgen::check_groups;
use crate::PAD_ID;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("logits contain a non-finite value")]
    NonFinite,
    #[error("target id {id} out of range for {vocab} logits")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("{k} targets exceed the vocabulary of {vocab}")]
    TooManyTargets { k: usize, vocab: usize },
    #[error("no targets")]
    NoTargets,
    #[error("duplicate target id {0}")]
    DuplicateTarget(u32),
    #[error("invalid groups: {0}")]
    Groups(String),
    #[error("expected {expected} discounts, got {got}, all non-negative")]
    Discounts { expected: usize, got: usize },
    #[error("teacher logits are required for this loss")]
    MissingTeacherLogits,
    #[error("negative {0} is also a target")]
    NegativeOverlap(u32),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// A loss value and its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<F> {
    pub loss: F,
    pub grad: Vec<F>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    /// Softmax cross-entropy on the ground truth only.
    #[default]
    #[serde(rename = "CE")]
    Ce,
    /// Top-k KL distillation from teacher logits.
    #[serde(rename = "KL")]
    Kl,
    /// Plackett-Luce, undiscounted.
    #[serde(rename = "PL")]
    Pl,
    /// Plackett-Luce discounted by teacher probabilities.
    #[serde(rename = "PL-t")]
    PlTeacher,
    /// Plackett-Luce with stepped discounts.
    #[serde(rename = "PL-s")]
    PlStepped,
    /// Weak-order Plackett-Luce.
    #[serde(rename = "wPL")]
    WeakPl,
    /// Weak-order Plackett-Luce with stepped discounts.
    #[serde(rename = "wPL-s")]
    WeakPlStepped,
    /// Pairwise hinge with student-derived negatives.
    #[serde(rename = "PWH")]
    PairwiseHinge,
}

impl LossVariant {
    pub const ALL: [LossVariant; 8] = [
        LossVariant::Ce,
        LossVariant::Kl,
        LossVariant::Pl,
        LossVariant::PlTeacher,
        LossVariant::PlStepped,
        LossVariant::WeakPl,
        LossVariant::WeakPlStepped,
        LossVariant::PairwiseHinge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ce => "CE",
            LossVariant::Kl => "KL",
            LossVariant::Pl => "PL",
            LossVariant::PlTeacher => "PL-t",
            LossVariant::PlStepped => "PL-s",
            LossVariant::WeakPl => "wPL",
            LossVariant::WeakPlStepped => "wPL-s",
            LossVariant::PairwiseHinge => "PWH",
        }
    }

    pub fn needs_teacher_logits(self) -> bool {
        matches!(self, LossVariant::Kl | LossVariant::PlTeacher)
    }

    pub fn uses_ranks(self) -> bool {
        self != LossVariant::Ce
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown loss variant {s:?}"))
    }
}

fn default_k() -> usize {
    10
}
fn default_eta() -> f64 {
    0.4
}
fn default_tau() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-5
}
fn default_alpha_min() -> f64 {
    1.0
}
fn default_cycle() -> usize {
    1
}
fn default_margin() -> f64 {
    1.0
}
fn default_negatives() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default)]
    pub variant: LossVariant,
    /// Rank rows are truncated to this many slots.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Weight of rank 1 under stepped discounting.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Teacher-only temperature for KL and PL-t.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "default_cycle")]
    pub cycle_epochs: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_negatives")]
    pub n_negatives: usize,
    /// Replace per-slot discounts by their mean over each tie group.
    #[serde(default)]
    pub average_group_discounts: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::Ce,
            k: default_k(),
            eta: default_eta(),
            tau: default_tau(),
            epsilon: default_epsilon(),
            alpha_min: default_alpha_min(),
            cycle_epochs: default_cycle(),
            margin: default_margin(),
            n_negatives: default_negatives(),
            average_group_discounts: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Config(m.to_owned()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if matches!(self.variant, LossVariant::PlStepped | LossVariant::WeakPlStepped)
            && !(self.eta > 0.0 && self.eta < 1.0)
        {
            return bad("eta must lie in (0, 1)");
        }
        if self.variant.needs_teacher_logits() && !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= 1.0) {
            return bad("alpha_min must lie in (0, 1]");
        }
        if self.cycle_epochs == 0 {
            return bad("cycle_epochs must be at least 1");
        }
        Ok(())
    }
}

/// Targets for the Plackett-Luce family, in rank order.
#[derive(Clone, Copy, Debug)]
pub struct RankTargets<'a, F> {
    pub ids: &'a [u32],
    /// Group-start index per slot; `None` means strongly ordered.
    pub groups: Option<&'a [u16]>,
    /// Per-slot weights; `None` means all ones.
    pub discounts: Option<&'a [F]>,
}

impl<'a, F: Real> RankTargets<'a, F> {
    pub fn strong(ids: &'a [u32]) -> Self {
        RankTargets {
            ids,
            groups: None,
            discounts: None,
        }
    }

    fn start(&self, i: usize) -> usize {
        self.groups.map_or(i, |g| g[i] as usize)
    }

    fn discount(&self, i: usize) -> F {
        self.discounts.map_or(F::one(), |d| d[i])
    }

    fn validate(&self, vocab: usize) -> Result<(), LossError> {
        check_ids(self.ids, vocab)?;
        if let Some(g) = self.groups {
            if g.len() != self.ids.len() {
                return Err(LossError::Groups("length differs from ids".into()));
            }
            check_groups(g).map_err(LossError::Groups)?;
        }
        if let Some(d) = self.discounts {
            if d.len() != self.ids.len() || d.iter().any(|&x| !(x >= F::zero())) {
                return Err(LossError::Discounts {
                    expected: self.ids.len(),
                    got: d.len(),
                });
            }
        }
        Ok(())
    }
}

fn check_logits<F: Real>(w: &[F]) -> Result<(), LossError> {
    if w.is_empty() || w.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(())
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), LossError> {
    if ids.is_empty() {
        return Err(LossError::NoTargets);
    }
    if ids.len() > vocab {
        return Err(LossError::TooManyTargets {
            k: ids.len(),
            vocab,
        });
    }
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(LossError::IdOutOfRange { id, vocab });
        }
        if ids[..i].contains(&id) {
            return Err(LossError::DuplicateTarget(id));
        }
    }
    Ok(())
}

/// Shifted scores `exp(w - m)`, their sum and the argmax.
fn shifted_scores<F: Real>(w: &[F]) -> (Vec<F>, F, usize, F) {
    let (a, m) = argmax(w);
    let s: Vec<F> = w.iter().map(|&x| (x - m).exp()).collect();
    let z = s.iter().copied().sum();
    (s, z, a, m)
}

pub fn ce_loss<F: Real>(w: &[F], gt: u32) -> Result<LossGrad<F>, LossError> {
    let mut grad = vec![F::zero(); w.len()];
    let loss = ce_loss_into(w, gt, F::one(), &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// `log Z - w_gt`; adds `scale · (softmax(w) - onehot(gt))` into `grad`.
pub fn ce_loss_into<F: Real>(w: &[F], gt: u32, scale: F, grad: &mut [F]) -> Result<F, LossError> {
    check_logits(w)?;
    check_ids(&[gt], w.len())?;
    let (s, z, _, m) = shifted_scores(w);
    let inv = scale / z;
    for (g, &sj) in grad.iter_mut().zip(&s) {
        *g = *g + inv * sj;
    }
    grad[gt as usize] = grad[gt as usize] - scale;
    Ok(z.ln() + m - w[gt as usize])
}

pub fn pl_loss<F: Real>(
    w: &[F],
    targets: &RankTargets<'_, F>,
    epsilon: F,
) -> Result<LossGrad<F>, LossError> {
    let mut grad = vec![F::zero(); w.len()];
    let loss = pl_loss_into(w, targets, epsilon, F::one(), &mut grad)?;
    Ok(LossGrad { loss, grad })
}

pub fn pl_loss_into<F: Real>(
    w: &[F],
    targets: &RankTargets<'_, F>,
    epsilon: F,
    scale: F,
    grad: &mut [F],
) -> Result<F, LossError> {
    check_logits(w)?;
    targets.validate(w.len())?;
    let (s, _, argmax, m) = shifted_scores(w);
    let k = targets.ids.len();
    let ys: Vec<usize> = targets.ids.iter().map(|&y| y as usize).collect();

    // Each denominator is the untargeted mass plus the target mass from its
    // group on, summed from positive terms only.
    let mut untargeted = s.clone();
    for &y in &ys {
        untargeted[y] = F::zero();
    }
    let base: F = untargeted.iter().copied().sum();
    let mut suffix = vec![F::zero(); k + 1];
    for i in (0..k).rev() {
        suffix[i] = suffix[i + 1] + s[ys[i]];
    }

    let mut loss = F::zero();
    let mut coef = Vec::with_capacity(k);
    for (i, &y) in ys.iter().enumerate() {
        let denom = base + suffix[targets.start(i)] + epsilon;
        let d = targets.discount(i);
        loss = loss + d * (denom.ln() + m - w[y]);
        coef.push(d / denom);
    }

    // ∂/∂w_j = Σ_i coef_i · (s_j·[j not removed before term i] + ε·[j = argmax]) - d_i·[j = y_i]
    let total: F = coef.iter().copied().sum();
    let a = scale * total;
    for (g, &u) in grad.iter_mut().zip(&untargeted) {
        *g = *g + a * u;
    }
    grad[argmax] = grad[argmax] + a * epsilon;
    for (l, &y) in ys.iter().enumerate() {
        let kept: F = (0..k)
            .filter(|&i| targets.start(i) <= l)
            .map(|i| coef[i])
            .sum();
        grad[y] = grad[y] + scale * (kept * s[y] - targets.discount(l));
    }
    Ok(loss)
}

/// Padded batch inputs for [`pl_loss_batched`]: `rows × k_max` blocks.
#[derive(Clone, Copy, Debug)]
pub struct PlBatch<'a, F> {
    pub logits: &'a [F],
    pub vocab: usize,
    /// Target ids, padded with [`PAD_ID`].
    pub targets: &'a [u32],
    pub k_max: usize,
    pub lengths: &'a [usize],
    pub groups: Option<&'a [u16]>,
    pub discounts: Option<&'a [F]>,
}

/// Per-slot PL losses for a whole batch, computed column-wise the way a
/// tensor implementation would: shift by the row max, gather the target
/// scores, shift them right by one column, cumulative-sum, gather the sums
/// at each slot's group start, take the log, subtract the target logits,
/// weight and mask. Returns a `rows × k_max` matrix (masked slots are 0).
pub fn pl_loss_batched<F: Real>(batch: &PlBatch<'_, F>, epsilon: F) -> Vec<F> {
    let v = batch.vocab;
    let k = batch.k_max;
    let rows = batch.lengths.len();
    assert_eq!(batch.logits.len(), rows * v);
    assert_eq!(batch.targets.len(), rows * k);

    let mut out = vec![F::zero(); rows * k];
    let mut gathered = vec![F::zero(); k];
    let mut cum = vec![F::zero(); k];
    for r in 0..rows {
        let w = &batch.logits[r * v..(r + 1) * v];
        let y = &batch.targets[r * k..(r + 1) * k];
        let (_, m) = argmax(w);
        let z: F = w.iter().map(|&x| (x - m).exp()).sum();
        for (gw, &id) in gathered.iter_mut().zip(y) {
            // padding gathers column 0 and is masked below
            *gw = w[if id == PAD_ID { 0 } else { id as usize }];
        }
        let mut acc = F::zero();
        for i in 0..k {
            cum[i] = acc;
            acc = acc + (gathered[i] - m).exp();
        }
        for i in 0..k {
            let slot = r * k + i;
            if i >= batch.lengths[r] {
                continue;
            }
            let zi = match batch.groups {
                Some(o) => cum[o[slot] as usize],
                None => cum[i],
            };
            let mut l = (z - zi + epsilon).ln() + m - gathered[i];
            if let Some(f) = batch.discounts {
                l = l * f[slot];
            }
            out[slot] = l;
        }
    }
    out
}

/// Stepped discounts: `eta` on rank 1, and the remaining `1 - eta` spread
/// over ranks 2..k as an arithmetic sequence proportional to `k - i`.
pub fn stepped_discounts<F: Real>(k: usize, eta: f64) -> Result<Vec<F>, LossError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(LossError::Config(format!("eta must lie in (0, 1), got {eta}")));
    }
    if k == 0 {
        return Err(LossError::NoTargets);
    }
    if k == 1 {
        return Ok(vec![F::one()]);
    }
    let denom = (k * (k - 1)) as f64;
    Ok(std::iter::once(F::lit(eta))
        .chain((1..k).map(|i| F::lit((1.0 - eta) * 2.0 * (k - i) as f64 / denom)))
        .collect())
}

/// Replaces each slot's discount by the mean over its tie group.
pub fn average_within_groups<F: Real>(discounts: &mut [F], groups: &[u16]) {
    let mut i = 0;
    while i < discounts.len() {
        let start = groups[i];
        let end = (i..discounts.len())
            .find(|&j| groups[j] != start)
            .unwrap_or(discounts.len());
        let mean = discounts[i..end].iter().copied().sum::<F>() / F::lit((end - i) as f64);
        discounts[i..end].iter_mut().for_each(|d| *d = mean);
        i = end;
    }
}

/// `softmax(teacher_logits / tau)` over the given top-k entries only.
pub fn teacher_prob_discounts<F: Real>(teacher_logits: &[F], tau: F) -> Result<Vec<F>, LossError> {
    if !(tau > F::zero()) {
        return Err(LossError::Config("tau must be positive".into()));
    }
    check_logits(teacher_logits)?;
    let scaled: Vec<F> = teacher_logits.iter().map(|&x| x / tau).collect();
    let (_, m) = argmax(&scaled);
    let e: Vec<F> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let z: F = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

pub fn topk_kl_loss<F: Real>(
    w: &[F],
    ids: &[u32],
    teacher_logits: &[F],
    tau: F,
) -> Result<LossGrad<F>, LossError> {
    let mut grad = vec![F::zero(); w.len()];
    let loss = topk_kl_loss_into(w, ids, teacher_logits, tau, F::one(), &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// `Σ_i p_i (ln p_i - ln q_i)` with `p = softmax(teacher/τ)` over the top-k
/// and `q = softmax(w)` over the full vocabulary, read at the top-k ids.
/// The student is not temperature scaled and the gradient is not
/// multiplied by `τ²`.
pub fn topk_kl_loss_into<F: Real>(
    w: &[F],
    ids: &[u32],
    teacher_logits: &[F],
    tau: F,
    scale: F,
    grad: &mut [F],
) -> Result<F, LossError> {
    check_logits(w)?;
    check_ids(ids, w.len())?;
    if teacher_logits.len() != ids.len() {
        return Err(LossError::MissingTeacherLogits);
    }
    let p = teacher_prob_discounts(teacher_logits, tau)?;
    let (s, z, _, m) = shifted_scores(w);
    let log_z = z.ln() + m;
    let mut loss = F::zero();
    for (&pi, &id) in p.iter().zip(ids) {
        if pi > F::zero() {
            loss = loss + pi * (pi.ln() - (w[id as usize] - log_z));
        }
    }
    let mass: F = p.iter().copied().sum();
    let a = scale * mass / z;
    for (g, &sj) in grad.iter_mut().zip(&s) {
        *g = *g + a * sj;
    }
    for (&pi, &id) in p.iter().zip(ids) {
        grad[id as usize] = grad[id as usize] - scale * pi;
    }
    Ok(loss)
}

/// Ordered `(better, worse)` pairs for the hinge: consecutive ranks in
/// different tie groups, then every target against every negative.
pub(crate) fn hinge_pairs(ids: &[u32], groups: Option<&[u16]>, negatives: &[u32]) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for i in 0..ids.len().saturating_sub(1) {
        let tied = groups.is_some_and(|g| g[i + 1] as usize != i + 1);
        if !tied {
            pairs.push((ids[i], ids[i + 1]));
        }
    }
    for &t in ids {
        for &n in negatives {
            pairs.push((t, n));
        }
    }
    pairs
}

pub fn pairwise_hinge_loss<F: Real>(
    w: &[F],
    ids: &[u32],
    groups: Option<&[u16]>,
    negatives: &[u32],
    margin: F,
) -> Result<LossGrad<F>, LossError> {
    let mut grad = vec![F::zero(); w.len()];
    let loss = pairwise_hinge_loss_into(w, ids, groups, negatives, margin, F::one(), &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// Mean of `max(0, margin - (w_i - w_j))` over the pairs of
/// [`hinge_pairs`]. At the kink the zero branch is taken.
pub fn pairwise_hinge_loss_into<F: Real>(
    w: &[F],
    ids: &[u32],
    groups: Option<&[u16]>,
    negatives: &[u32],
    margin: F,
    scale: F,
    grad: &mut [F],
) -> Result<F, LossError> {
    check_logits(w)?;
    check_ids(ids, w.len())?;
    if let Some(g) = groups {
        check_groups(g).map_err(LossError::Groups)?;
    }
    for &n in negatives {
        if n as usize >= w.len() {
            return Err(LossError::IdOutOfRange {
                id: n,
                vocab: w.len(),
            });
        }
        if ids.contains(&n) {
            return Err(LossError::NegativeOverlap(n));
        }
    }
    let pairs = hinge_pairs(ids, groups, negatives);
    if pairs.is_empty() {
        return Ok(F::zero());
    }
    let inv = F::one() / F::lit(pairs.len() as f64);
    let mut loss = F::zero();
    for (hi, lo) in pairs {
        let slack = margin - (w[hi as usize] - w[lo as usize]);
        if slack > F::zero() {
            loss = loss + slack;
            grad[hi as usize] = grad[hi as usize] - scale * inv;
            grad[lo as usize] = grad[lo as usize] + scale * inv;
        }
    }
    Ok(loss * inv)
}

/// The student's own top-(n + k) ids minus the targets, cut to `n`.
/// Ties are broken by lower id first.
pub fn hinge_negatives<F: Real>(w: &[F], targets: &[u32], n: usize) -> Vec<u32> {
    let want = (n + targets.len()).min(w.len());
    let mut order: Vec<u32> = (0..w.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        w[*b as usize]
            .partial_cmp(&w[*a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if want < order.len() {
        order.select_nth_unstable_by(want, cmp);
        order.truncate(want);
    }
    order.sort_unstable_by(cmp);
    order
        .into_iter()
        .filter(|id| !targets.contains(id))
        .take(n)
        .collect()
}

/// Sawtooth interpolation weight: 1 at the start of every cycle, falling
/// linearly towards `alpha_min` at its end.
pub fn cycle_alpha(global_epoch: f64, cycle_epochs: usize, alpha_min: f64) -> Result<f64, LossError> {
    if cycle_epochs == 0 {
        return Err(LossError::Config("cycle_epochs must be at least 1".into()));
    }
    if !(alpha_min > 0.0 && alpha_min <= 1.0) {
        return Err(LossError::Config("alpha_min must lie in (0, 1]".into()));
    }
    if !(global_epoch >= 0.0) {
        return Err(LossError::Config("epoch must be non-negative".into()));
    }
    let cycle = cycle_epochs as f64;
    let phase = (global_epoch % cycle) / cycle;
    Ok(1.0 - (1.0 - alpha_min) * phase)
}

/// Everything one position contributes besides its logits.
#[derive(Clone, Copy, Debug)]
pub struct PositionTargets<'a, F> {
    pub gt: u32,
    /// Rank row, ground truth first, already truncated to `k`.
    pub ids: &'a [u32],
    pub groups: &'a [u16],
    pub teacher_logits: Option<&'a [F]>,
    /// Hinge negatives; ignored by other variants.
    pub negatives: &'a [u32],
}

pub fn combined_loss<F: Real>(
    w: &[F],
    targets: &PositionTargets<'_, F>,
    config: &LossConfig,
    alpha: F,
) -> Result<LossGrad<F>, LossError> {
    let mut grad = vec![F::zero(); w.len()];
    let loss = combined_loss_into(w, targets, config, alpha, F::one(), &mut grad)?;
    Ok(LossGrad { loss, grad })
}

/// `α·CE + (1-α)·aux`, where aux is the configured variant. `CE` ignores α.
pub fn combined_loss_into<F: Real>(
    w: &[F],
    targets: &PositionTargets<'_, F>,
    config: &LossConfig,
    alpha: F,
    scale: F,
    grad: &mut [F],
) -> Result<F, LossError> {
    let variant = config.variant;
    if variant == LossVariant::Ce {
        return ce_loss_into(w, targets.gt, scale, grad);
    }
    let mut loss = F::zero();
    if alpha > F::zero() {
        loss = loss + alpha * ce_loss_into(w, targets.gt, scale * alpha, grad)?;
    }
    let beta = F::one() - alpha;
    if beta <= F::zero() {
        return Ok(loss);
    }
    let aux_scale = scale * beta;
    let eps = F::lit(config.epsilon);
    let ids = targets.ids;
    let groups = targets.groups;
    let teacher = || targets.teacher_logits.ok_or(LossError::MissingTeacherLogits);

    let aux = match variant {
        LossVariant::Ce => unreachable!("handled above"),
        LossVariant::Kl => {
            topk_kl_loss_into(w, ids, teacher()?, F::lit(config.tau), aux_scale, grad)?
        }
        LossVariant::Pl => pl_loss_into(w, &RankTargets::strong(ids), eps, aux_scale, grad)?,
        LossVariant::WeakPl => {
            let t = RankTargets {
                ids,
                groups: Some(groups),
                discounts: None,
            };
            pl_loss_into(w, &t, eps, aux_scale, grad)?
        }
        LossVariant::PlTeacher | LossVariant::PlStepped | LossVariant::WeakPlStepped => {
            let mut d = if variant == LossVariant::PlTeacher {
                teacher_prob_discounts(teacher()?, F::lit(config.tau))?
            } else {
                stepped_discounts(ids.len(), config.eta)?
            };
            let weak = variant == LossVariant::WeakPlStepped;
            if weak && config.average_group_discounts {
                average_within_groups(&mut d, groups);
            }
            let t = RankTargets {
                ids,
                groups: weak.then_some(groups),
                discounts: Some(&d),
            };
            pl_loss_into(w, &t, eps, aux_scale, grad)?
        }
        LossVariant::PairwiseHinge => pairwise_hinge_loss_into(
            w,
            ids,
            Some(groups),
            targets.negatives,
            F::lit(config.margin),
            aux_scale,
            grad,
        )?,
    };
    Ok(loss + beta * aux)
}

/// Mean of per-position losses with a fixed reduction order.
pub fn mean_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    pairwise_sum(losses) / losses.len() as f64
}
