//! Training loop, metric logging and the end-to-end gradient check.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{batchify, BatchPlan, CorpusError, TokenStream, Vocabulary};
use crate::eval::{perplexity, EvalError, PerplexityReport};
use crate::loss::{
    combined_loss, combined_loss_into, cycle_alpha, hinge_negatives, hinge_pairs, LossConfig,
    LossError, LossVariant, PositionTargets,
};
use crate::num::pairwise_sum;
use crate::rankgen::RankGroundTruth;
use crate::student::{init_params, AdamConfig, OptimState, StudentConfig, StudentError, StudentParams};
use crate::teacherio::{read_jsonl, read_ranks, FormatError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("variant {0} needs a ranks file")]
    MissingRanks(LossVariant),
    #[error("variant {0} needs teacher logits in the ranks file")]
    MissingTeacherLogits(LossVariant),
    #[error("ranks cover {ranks} positions but the training stream has {stream}")]
    Misaligned { ranks: usize, stream: usize },
    #[error("ranks use a vocabulary of {ranks}, the corpus {vocab}")]
    VocabMismatch { ranks: u32, vocab: u32 },
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub vocab: PathBuf,
    /// RKGT binary, or JSON-lines when the extension is `jsonl`.
    #[serde(default)]
    pub ranks: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub epochs: usize,
    #[serde(default)]
    pub batch: BatchPlan,
    pub paths: TrainPaths,
    /// Log and checkpoint every this many steps; 0 means epoch ends only.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub metrics_csv: Option<PathBuf>,
    /// Record elapsed time in the metrics; off keeps reruns byte-identical.
    #[serde(default)]
    pub log_wall_time: bool,
}

impl TrainConfig {
    /// Reads a JSON config. Relative paths inside it are taken relative to
    /// the config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.paths.train);
        fix(&mut cfg.paths.valid);
        fix(&mut cfg.paths.vocab);
        cfg.paths.ranks.as_mut().map(fix);
        cfg.checkpoint_dir.as_mut().map(fix);
        cfg.metrics_csv.as_mut().map(fix);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Corpora and ranks already in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: TokenStream,
    pub valid: TokenStream,
    pub ranks: Option<RankGroundTruth>,
}

impl TrainData {
    pub fn load(paths: &TrainPaths) -> Result<Self, TrainError> {
        let vocab = Vocabulary::load(&paths.vocab)?;
        let train = TokenStream::load(&paths.train, &vocab)?;
        let valid = TokenStream::load(&paths.valid, &vocab)?;
        let ranks = match &paths.ranks {
            Some(p) if p.extension().is_some_and(|e| e == "jsonl") => Some(read_jsonl(p, &vocab)?.0),
            Some(p) => Some(read_ranks(p)?),
            None => None,
        };
        Ok(TrainData { train, valid, ranks })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Fractional epoch position α was computed from.
    pub epoch: f64,
    pub alpha: f64,
    /// Mean training loss over the steps since the previous row.
    pub train_loss: f64,
    pub val_ppl: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: StudentParams<f32>,
    pub metrics: Vec<MetricRow>,
    pub validation: PerplexityReport,
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let data = TrainData::load(&config.paths)?;
    train_on(config, &data)
}

fn check_data(config: &TrainConfig, data: &TrainData) -> Result<StudentConfig, TrainError> {
    config.validate()?;
    let vocab = data.train.vocab_size();
    if data.valid.vocab_size() != vocab {
        return Err(TrainError::Config("train and validation vocabularies differ".into()));
    }
    let mut student = config.student.clone();
    if student.vocab_size == 0 {
        student.vocab_size = vocab as usize;
    } else if student.vocab_size != vocab as usize {
        return Err(TrainError::Config(format!(
            "student vocab_size {} differs from the corpus vocabulary {vocab}",
            student.vocab_size
        )));
    }
    let variant = config.loss.variant;
    if variant.uses_ranks() {
        let ranks = data.ranks.as_ref().ok_or(TrainError::MissingRanks(variant))?;
        if ranks.len() != data.train.len() {
            return Err(TrainError::Misaligned {
                ranks: ranks.len(),
                stream: data.train.len(),
            });
        }
        if ranks.vocab_size() != vocab {
            return Err(TrainError::VocabMismatch {
                ranks: ranks.vocab_size(),
                vocab,
            });
        }
        if variant.needs_teacher_logits() && !ranks.has_logits() {
            return Err(TrainError::MissingTeacherLogits(variant));
        }
    }
    Ok(student)
}

fn save_checkpoint(params: &StudentParams<f32>, dir: &Path, name: &str) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_owned(),
        source,
    })?;
    params.save(dir.join(name))?;
    Ok(())
}

pub fn train_on(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome, TrainError> {
    let student = check_data(config, data)?;
    let loss_cfg = &config.loss;
    let mut params: StudentParams<f32> = init_params(&student)?;
    let mut grads = params.zeros_like();
    let mut opt = OptimState::new(config.optimizer.clone(), &params);
    let ids = data.train.ids();
    let n = student.context_len;
    let v = student.vocab_size;
    let ranks = data.ranks.as_ref().filter(|_| loss_cfg.variant.uses_ranks());

    let mut csv = match &config.metrics_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut pending: Vec<f64> = Vec::new();
    let mut step = 0u64;
    let mut contexts = Vec::new();
    let mut upstream = Vec::new();
    let mut row_losses = Vec::new();

    for epoch in 0..config.epochs {
        let batches = batchify(&data.train, config.batch)?;
        let steps_per_epoch = batches.steps().max(1);
        let mut last = None;
        for (i, batch) in batches.enumerate() {
            let positions: Vec<usize> =
                batch.target_positions.iter().copied().filter(|&t| t >= n).collect();
            if positions.is_empty() {
                continue;
            }
            let epoch_pos = epoch as f64 + i as f64 / steps_per_epoch as f64;
            let alpha = cycle_alpha(epoch_pos, loss_cfg.cycle_epochs, loss_cfg.alpha_min)?;

            contexts.clear();
            for &t in &positions {
                contexts.extend_from_slice(&ids[t - n..t]);
            }
            let act = params.forward_batch(&contexts)?;
            upstream.clear();
            upstream.resize(positions.len() * v, 0.0f32);
            row_losses.clear();
            let scale = 1.0 / positions.len() as f32;
            for (r, &t) in positions.iter().enumerate() {
                let w = act.row(r);
                let (rank_ids, groups, teacher) = match ranks {
                    Some(rk) => {
                        let row = rk.row(t).truncate(loss_cfg.k);
                        (row.ids, row.groups, row.logits)
                    }
                    None => (&ids[t..t + 1], &[0u16][..], None),
                };
                let negatives = if loss_cfg.variant == LossVariant::PairwiseHinge {
                    hinge_negatives(w, rank_ids, loss_cfg.n_negatives)
                } else {
                    Vec::new()
                };
                let targets = PositionTargets {
                    gt: ids[t],
                    ids: rank_ids,
                    groups,
                    teacher_logits: teacher,
                    negatives: &negatives,
                };
                let grad = &mut upstream[r * v..(r + 1) * v];
                let l = combined_loss_into(w, &targets, loss_cfg, alpha as f32, scale, grad)?;
                row_losses.push(l as f64);
            }
            let batch_loss = pairwise_sum(&row_losses) / row_losses.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            grads.fill_zero();
            params.backward(&act, &upstream, &mut grads)?;
            opt.step(&mut params, &grads).map_err(|e| match e {
                StudentError::Diverged => TrainError::Diverged { step },
                other => other.into(),
            })?;
            step += 1;
            pending.push(batch_loss);
            last = Some((epoch_pos, alpha));

            if config.eval_every > 0 && step.is_multiple_of(config.eval_every as u64) {
                let row = log_row(config, &params, data, step, epoch_pos, alpha, &mut pending, started)?;
                emit(&mut csv, &mut metrics, row)?;
                if let Some(dir) = &config.checkpoint_dir {
                    save_checkpoint(&params, dir, &format!("step-{step:08}.ckpt"))?;
                }
            }
        }
        if let (Some((epoch_pos, alpha)), false) = (last, pending.is_empty()) {
            let row = log_row(config, &params, data, step, epoch_pos, alpha, &mut pending, started)?;
            emit(&mut csv, &mut metrics, row)?;
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoint(&params, dir, "final.ckpt")?;
    }
    let validation = perplexity(&params, &data.valid)?;
    info!(
        "done: {step} steps, validation ppl {:.3} over {} positions ({} skipped)",
        validation.perplexity, validation.scored, validation.skipped
    );
    Ok(TrainOutcome {
        params,
        metrics,
        validation,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_row(
    config: &TrainConfig,
    params: &StudentParams<f32>,
    data: &TrainData,
    step: u64,
    epoch: f64,
    alpha: f64,
    pending: &mut Vec<f64>,
    started: Instant,
) -> Result<MetricRow, TrainError> {
    let train_loss = pairwise_sum(pending) / pending.len() as f64;
    pending.clear();
    let val_ppl = perplexity(params, &data.valid)?.perplexity;
    let wall_ms = if config.log_wall_time {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    info!("step {step} epoch {epoch:.3} alpha {alpha:.4} train_loss {train_loss:.4} val_ppl {val_ppl:.3}");
    Ok(MetricRow {
        step,
        epoch,
        alpha,
        train_loss,
        val_ppl,
        wall_ms,
    })
}

fn emit(
    csv: &mut Option<csv::Writer<fs::File>>,
    metrics: &mut Vec<MetricRow>,
    row: MetricRow,
) -> Result<(), TrainError> {
    if let Some(w) = csv {
        w.serialize(&row)?;
        w.flush().map_err(csv::Error::from)?;
    }
    metrics.push(row);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub cases: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub variants: Vec<LossVariant>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            cases: 100,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            variants: LossVariant::ALL.to_vec(),
        }
    }
}

/// Denominator floor for relative errors, per unit of loss. Central
/// differences carry roughly `f64::EPSILON · |loss| / step` of rounding
/// noise, so gradients below this floor are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantCheck {
    pub variant: LossVariant,
    pub cases: usize,
    pub parameters: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variants: Vec<VariantCheck>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.variants {
            writeln!(
                f,
                "{:<6} {:>4} cases {:>7} params  max rel err {:.3e}  {}",
                v.variant.name(),
                v.cases,
                v.parameters,
                v.max_rel_err,
                if v.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// One random tiny student plus one position's targets.
struct GradCase {
    params: StudentParams<f64>,
    context: Vec<u32>,
    gt: u32,
    ids: Vec<u32>,
    groups: Vec<u16>,
    teacher: Vec<f64>,
    negatives: Vec<u32>,
    loss: LossConfig,
    alpha: f64,
}

impl GradCase {
    fn random(rng: &mut ChaCha8Rng, variant: LossVariant) -> Self {
        let tie = rng.random_bool(0.3);
        let embed_dim = rng.random_range(2..=4);
        let cfg = StudentConfig {
            context_len: rng.random_range(1..=3),
            embed_dim,
            hidden_dim: if tie { embed_dim } else { rng.random_range(2..=6) },
            vocab_size: rng.random_range(8..=32),
            tie_embeddings: tie,
            init_scale: 0.8,
            seed: rng.random(),
        };
        let mut params: StudentParams<f64> = init_params(&cfg).expect("valid tiny config");
        for b in [&mut params.b1, &mut params.b2] {
            b.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
        let v = cfg.vocab_size as u32;
        let context = (0..cfg.context_len).map(|_| rng.random_range(0..v)).collect();
        let k = rng.random_range(1..=8);
        let mut ids: Vec<u32> = Vec::with_capacity(k);
        while ids.len() < k {
            let id = rng.random_range(0..v);
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let mut groups = vec![0u16];
        for i in 1..k {
            let prev = groups[i - 1];
            groups.push(if rng.random_bool(0.4) { prev } else { i as u16 });
        }
        let mut teacher: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..4.0)).collect();
        teacher.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        let loss = LossConfig {
            variant,
            k,
            eta: rng.random_range(0.1..0.9),
            tau: rng.random_range(0.5..4.0),
            epsilon: 1e-5,
            margin: 1.0,
            n_negatives: rng.random_range(1..=4),
            ..LossConfig::default()
        };
        let alpha = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) };
        let mut case = GradCase {
            params,
            context,
            gt: ids[0],
            ids,
            groups,
            teacher,
            negatives: Vec::new(),
            loss,
            alpha,
        };
        if variant == LossVariant::PairwiseHinge {
            let w = case.logits(&case.params);
            case.negatives = hinge_negatives(&w, &case.ids, case.loss.n_negatives);
        }
        case
    }

    fn logits(&self, p: &StudentParams<f64>) -> Vec<f64> {
        p.forward(&self.context).expect("valid context").logits
    }

    fn targets(&self) -> PositionTargets<'_, f64> {
        PositionTargets {
            gt: self.gt,
            ids: &self.ids,
            groups: &self.groups,
            teacher_logits: Some(&self.teacher),
            negatives: &self.negatives,
        }
    }

    fn loss_at(&self, p: &StudentParams<f64>) -> f64 {
        let w = self.logits(p);
        combined_loss(&w, &self.targets(), &self.loss, self.alpha)
            .expect("valid case")
            .loss
    }

    /// Smallest hinge slack; FD is only meaningful away from the kinks.
    fn kink_distance(&self) -> f64 {
        let w = self.logits(&self.params);
        hinge_pairs(&self.ids, Some(&self.groups), &self.negatives)
            .iter()
            .map(|&(a, b)| (self.loss.margin - (w[a as usize] - w[b as usize])).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Max relative error over every parameter, and the parameter count.
    fn check(&self, h: f64) -> (f64, usize) {
        let act = self.params.forward_batch(&self.context).expect("valid context");
        let upstream = combined_loss(&act.logits, &self.targets(), &self.loss, self.alpha)
            .expect("valid case")
            .grad;
        let mut grads = self.params.zeros_like();
        self.params
            .backward(&act, &upstream, &mut grads)
            .expect("shapes match");
        let floor = REL_ERR_FLOOR * self.loss_at(&self.params).abs().max(1.0);
        let mut probe = self.params.clone();
        let mut worst = 0.0f64;
        for block in 0..5 {
            for j in 0..probe.blocks()[block].len() {
                let orig = probe.blocks()[block][j];
                probe.blocks_mut()[block][j] = orig + h;
                let up = self.loss_at(&probe);
                probe.blocks_mut()[block][j] = orig - h;
                let down = self.loss_at(&probe);
                probe.blocks_mut()[block][j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.blocks()[block][j];
                let denom = numeric.abs().max(analytic.abs()).max(floor);
                worst = worst.max((numeric - analytic).abs() / denom);
            }
        }
        (worst, self.params.num_params())
    }
}

/// Compares the analytic gradient of every loss, back-propagated through a
/// random tiny student, with central finite differences in `f64`.
pub fn grad_check(config: &GradCheckConfig) -> GradCheckReport {
    let mut variants = Vec::new();
    for &variant in &config.variants {
        let salt = LossVariant::ALL.iter().position(|&v| v == variant).unwrap_or(0) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (salt << 56));
        let mut worst = 0.0f64;
        let mut parameters = 0;
        for _ in 0..config.cases {
            let case = loop {
                let c = GradCase::random(&mut rng, variant);
                if variant != LossVariant::PairwiseHinge || c.kink_distance() > 1e-3 {
                    break c;
                }
            };
            let (err, n) = case.check(config.step);
            worst = worst.max(err);
            parameters += n;
        }
        variants.push(VariantCheck {
            variant,
            cases: config.cases,
            parameters,
            max_rel_err: worst,
            passed: worst < config.tolerance,
        });
    }
    let passed = variants.iter().all(|v| v.passed);
    GradCheckReport { variants, passed }
}
