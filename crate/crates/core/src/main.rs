use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use lmrank::corpus::{TokenStream, Vocabulary, EOS, UNK};
use lmrank::eval::{perplexity, rank_frequency_stats, topk_accuracy, write_frequency_csv};
use lmrank::rankgen::{build_ranks, enumerate_schemas, render_branching_set, OverflowMode, RankBuildConfig};
use lmrank::student::{StudentParams, CHECKPOINT_VERSION};
use lmrank::synth::{generate, SynthConfig};
use lmrank::teacherio::{
    float_gt_to_top, random_teacher, read_jsonl, read_ranks, write_jsonl, write_ranks, TeacherRanks,
    JSONL_FORMAT, JSONL_VERSION, RANDOM_TEACHER_PRNG, VERSION as RKGT_VERSION,
};
use lmrank::trainer::{grad_check, train, GradCheckConfig, TrainConfig};
use lmrank::{LossVariant, RankGroundTruth};

#[derive(Debug, Parser)]
#[command(name = "lmrank", about = "Language models trained on top-k rank ground truths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Serialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Build a vocabulary file (one token per line) from a corpus.
    BuildVocab {
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        /// Leave out the <unk> token.
        #[arg(long)]
        no_unk: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build N-gram branching-set ranks for every position.
    BuildRanks {
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 5)]
        max_past: usize,
        #[arg(long, default_value_t = 4)]
        max_future: usize,
        #[arg(long, default_value_t = 10)]
        cutoff: usize,
        #[arg(long, default_value_t = 32)]
        k_max: usize,
        #[arg(long, default_value_t = OverflowMode::Discard)]
        overflow: OverflowMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Ground truth plus k-1 uniformly random tokens per position.
    RandomRanks {
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move each position's ground truth to the top of a teacher's ranks.
    FloatGt {
        ranks: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one position's context and rank groups.
    Inspect {
        ranks: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        pos: usize,
        #[arg(long, default_value_t = 2)]
        width: usize,
    },
    /// Convert a rank file between RKGT and JSON lines (by extension).
    Convert {
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Perplexity and top-k accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10")]
        topk: Vec<usize>,
    },
    /// Frequency/rank statistics of a rank file as CSV.
    Stats {
        ranks: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every loss's gradient through the student against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated subset of CE,KL,PL,PL-t,PL-s,wPL,wPL-s,PWH.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<LossVariant>,
    },
    /// Write a synthetic English-like corpus.
    Synth {
        #[arg(long, default_value_t = 100_000)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn version_text() -> String {
    format!(
        "{} (formats: RKGT v{RKGT_VERSION}, {JSONL_FORMAT} v{JSONL_VERSION}, checkpoint v{CHECKPOINT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

fn stanza(command: &Command, extra: Option<serde_json::Value>) {
    let mut head = json!({
        "lmrank": env!("CARGO_PKG_VERSION"),
        "formats": {
            "rkgt": RKGT_VERSION,
            JSONL_FORMAT: JSONL_VERSION,
            "checkpoint": CHECKPOINT_VERSION,
        },
        "command": command,
    });
    if let Some(extra) = extra {
        head["resolved"] = extra;
    }
    eprintln!("# {head}");
}

fn load_stream(corpus: &Path, vocab: &Vocabulary) -> Result<TokenStream> {
    TokenStream::load(corpus, vocab).with_context(|| format!("loading {}", corpus.display()))
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn load_ranks(path: &Path, vocab: &Vocabulary) -> Result<RankGroundTruth> {
    let ranks = if is_jsonl(path) {
        read_jsonl(path, vocab)?.0
    } else {
        read_ranks(path)?
    };
    Ok(ranks)
}

fn save_ranks(ranks: &RankGroundTruth, path: &Path, vocab: &Vocabulary, comment: Option<&str>) -> Result<()> {
    if is_jsonl(path) {
        write_jsonl(ranks, vocab, comment, path)?;
    } else {
        write_ranks(ranks, path)?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match &command {
        Command::BuildVocab {
            corpus,
            min_count,
            no_unk,
            out,
        } => {
            stanza(&command, None);
            let specials: &[&str] = if *no_unk { &[EOS] } else { &[EOS, UNK] };
            let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
            let vocab = Vocabulary::build(&text, *min_count, specials)?;
            vocab.save(out)?;
            println!("{} tokens", vocab.len());
        }
        Command::BuildRanks {
            corpus,
            vocab,
            max_past,
            max_future,
            cutoff,
            k_max,
            overflow,
            out,
            jobs,
        } => {
            let config = RankBuildConfig {
                schemas: enumerate_schemas(*max_past, *max_future)?,
                cutoff_q: *cutoff,
                k_max: *k_max,
                overflow: *overflow,
            };
            stanza(&command, Some(serde_json::to_value(&config)?));
            let vocab = Vocabulary::load(vocab)?;
            let stream = load_stream(corpus, &vocab)?;
            let ranks = build_ranks(&stream, &config, *jobs)?;
            save_ranks(&ranks, out, &vocab, None)?;
            let mean = ranks.lengths().iter().map(|&l| l as f64).sum::<f64>() / ranks.len() as f64;
            println!("{} positions, mean row length {mean:.3}", ranks.len());
        }
        Command::RandomRanks {
            corpus,
            vocab,
            k,
            seed,
            out,
        } => {
            stanza(&command, Some(json!({ "prng": RANDOM_TEACHER_PRNG })));
            let vocab = Vocabulary::load(vocab)?;
            let stream = load_stream(corpus, &vocab)?;
            let ranks = random_teacher(&stream, *k, vocab.len() as u32, *seed)?;
            let comment = format!("random teacher, prng {RANDOM_TEACHER_PRNG}, seed {seed}");
            save_ranks(&ranks, out, &vocab, Some(&comment))?;
            println!("{} positions", ranks.len());
        }
        Command::FloatGt {
            ranks,
            corpus,
            vocab,
            out,
        } => {
            stanza(&command, None);
            let vocab = Vocabulary::load(vocab)?;
            let stream = load_stream(corpus, &vocab)?;
            let teacher = TeacherRanks::new(load_ranks(ranks, &vocab)?)?;
            let floated = float_gt_to_top(&teacher, &stream)?;
            save_ranks(floated.ranks(), out, &vocab, None)?;
            println!("{} positions", floated.ranks().len());
        }
        Command::Inspect {
            ranks,
            vocab,
            pos,
            width,
        } => {
            let vocab = Vocabulary::load(vocab)?;
            let ranks = load_ranks(ranks, &vocab)?;
            print!("{}", render_branching_set(&ranks, &vocab, *pos, *width)?);
        }
        Command::Convert { input, vocab, out } => {
            stanza(&command, None);
            let vocab = Vocabulary::load(vocab)?;
            let ranks = load_ranks(input, &vocab)?;
            save_ranks(&ranks, out, &vocab, None)?;
            println!("{} positions", ranks.len());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(config)?;
            stanza(&command, Some(serde_json::to_value(&cfg)?));
            let outcome = train(&cfg)?;
            let v = &outcome.validation;
            println!(
                "validation perplexity {:.4} over {} positions ({} skipped)",
                v.perplexity, v.scored, v.skipped
            );
        }
        Command::Eval {
            checkpoint,
            corpus,
            vocab,
            topk,
        } => {
            stanza(&command, None);
            let params = StudentParams::<f32>::load(checkpoint)?;
            let vocab = Vocabulary::load(vocab)?;
            let stream = load_stream(corpus, &vocab)?;
            let ppl = perplexity(&params, &stream)?;
            println!(
                "perplexity {:.4} over {} positions ({} skipped)",
                ppl.perplexity, ppl.scored, ppl.skipped
            );
            let acc = topk_accuracy(&params, &stream, topk)?;
            let header: Vec<String> = acc.iter().map(|(k, _)| format!("A@{k}")).collect();
            let values: Vec<String> = acc.iter().map(|(_, a)| format!("{a:.4}")).collect();
            println!("{}", header.join("\t"));
            println!("{}", values.join("\t"));
        }
        Command::Stats {
            ranks,
            corpus,
            vocab,
            bins,
            out,
        } => {
            stanza(&command, None);
            let vocab = Vocabulary::load(vocab)?;
            let stream = load_stream(corpus, &vocab)?;
            let ranks = load_ranks(ranks, &vocab)?;
            let rows = rank_frequency_stats(&ranks, &stream, *bins)?;
            write_frequency_csv(&rows, out)?;
            println!("{} word types", rows.len());
        }
        Command::Gradcheck {
            cases,
            tol,
            step,
            seed,
            variants,
        } => {
            stanza(&command, None);
            let cfg = GradCheckConfig {
                cases: *cases,
                step: *step,
                tolerance: *tol,
                seed: *seed,
                variants: if variants.is_empty() {
                    LossVariant::ALL.to_vec()
                } else {
                    variants.clone()
                },
            };
            let report = grad_check(&cfg);
            println!("{report}");
            if !report.passed {
                bail!("gradient check failed");
            }
        }
        Command::Synth { tokens, seed, out } => {
            let cfg = SynthConfig {
                tokens: *tokens,
                seed: *seed,
                ..SynthConfig::default()
            };
            stanza(&command, Some(serde_json::to_value(&cfg)?));
            fs::write(out, generate(&cfg)).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let version: &'static str = Box::leak(version_text().into_boxed_str());
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
