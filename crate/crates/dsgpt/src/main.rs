//! Command-line surface: vocabulary building, synthetic data generation,
//! pre-training, fine-tuning, generation, ROUGE evaluation, and the
//! one-command comparison experiment.
//!
//! Exit codes: 0 on success, 1 when the experiment's directional checks
//! fail, 2 on any error.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dsgpt::checkpoint::load_checkpoint;
use dsgpt::data::{
    format_example, load_jsonl, make_synthetic_family, split_train_val, write_jsonl,
    AlphabetSpec, TaskFamily,
};
use dsgpt::decoder::{generate, DecodeStrategy, GenerationConfig, StopReason};
use dsgpt::experiment::{render_table, run_experiment, ExperimentConfig};
use dsgpt::model::TransformerLM;
use dsgpt::rouge::{corpus_rouge, RougeTokenization};
use dsgpt::tokenizer::Vocabulary;
use dsgpt::trainer::{train, TrainData};

#[derive(Parser)]
#[command(
    name = "dsgpt",
    version,
    about = "Domain-specific generative pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FamilyArg {
    ACompress,
    BTitleLike,
    CReviewLike,
}

impl From<FamilyArg> for TaskFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::ACompress => TaskFamily::ACompress,
            FamilyArg::BTitleLike => TaskFamily::BTitleLike,
            FamilyArg::CReviewLike => TaskFamily::CReviewLike,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
}

impl From<StrategyArg> for DecodeStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Greedy => DecodeStrategy::Greedy,
            StrategyArg::Beam => DecodeStrategy::Beam,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a character vocabulary from JSONL datasets.
    BuildVocab {
        /// Input JSONL files; sources and targets both feed the counts.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long)]
        max_size: Option<usize>,
        /// Number of reserved task tokens.
        #[arg(long, default_value_t = 4)]
        tasks: usize,
    },
    /// Synthesize one task family as JSONL.
    MakeData {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train from random initialization.
    Pretrain {
        /// Experiment-format config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the init and the shuffle seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune, optionally from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to start from; omitting it trains from scratch.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Decode a JSONL file of sources with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        /// JSONL with `source` and optional `task` per line.
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "greedy")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// EOS probability amplification factor.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        truncate: Option<usize>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Score candidates against references with ROUGE-1/2/L.
    Evaluate {
        /// JSONL with `candidate` and `reference` per line.
        #[arg(long, conflicts_with_all = ["candidates", "references"])]
        pairs: Option<PathBuf>,
        /// Plain text, one candidate per line; needs --references.
        #[arg(long, requires = "references")]
        candidates: Option<PathBuf>,
        /// Plain text, one reference per line; needs --candidates.
        #[arg(long, requires = "candidates")]
        references: Option<PathBuf>,
    },
    /// Pre-train, fine-tune with and without that initialization, decode
    /// under three strategies, and emit a ROUGE comparison table.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip stages whose artifacts and input hashes are intact.
        #[arg(long)]
        resume: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn load_experiment_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::BuildVocab {
            data,
            out,
            min_freq,
            max_size,
            tasks,
        } => {
            let mut corpus = Vec::new();
            for path in &data {
                let examples = load_jsonl(path)
                    .with_context(|| format!("loading dataset {}", path.display()))?;
                for ex in examples {
                    corpus.push(ex.source);
                    corpus.push(ex.target);
                }
            }
            let vocab = Vocabulary::build(&corpus, min_freq, max_size, tasks)?;
            vocab.save(&out)?;
            println!(
                "vocabulary: {} tokens (hash {}) -> {}",
                vocab.len(),
                vocab.content_hash_hex(),
                out.display()
            );
            Ok(0)
        }
        Command::MakeData {
            family,
            size,
            seed,
            out,
        } => {
            let examples =
                make_synthetic_family(family.into(), size, seed, &AlphabetSpec::default());
            write_jsonl(&out, &examples)?;
            println!("wrote {} examples -> {}", examples.len(), out.display());
            Ok(0)
        }
        Command::Pretrain {
            config,
            data,
            vocab,
            out,
            seed,
        } => {
            let cfg = load_experiment_config(&config)?;
            train_command(&cfg, TrainPhase::Pretrain, &data, &vocab, &out, seed, None)
        }
        Command::Finetune {
            config,
            data,
            vocab,
            out,
            seed,
            init_from,
        } => {
            let cfg = load_experiment_config(&config)?;
            train_command(
                &cfg,
                TrainPhase::Finetune,
                &data,
                &vocab,
                &out,
                seed,
                init_from,
            )
        }
        Command::Generate {
            checkpoint,
            vocab,
            tasks,
            input,
            out,
            strategy,
            beam,
            lambda,
            truncate,
            max_new,
        } => {
            let vocab = Vocabulary::load(&vocab, tasks)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            ckpt.require_vocab(&vocab.content_hash())?;
            let gen_cfg = GenerationConfig {
                strategy: strategy.into(),
                beam_width: beam,
                max_new_tokens: max_new,
                truncate_to: truncate,
                eos_amplification: lambda,
                length_normalize_beam: false,
            };
            let inputs = read_generate_inputs(&input)?;
            let mut lines = Vec::with_capacity(inputs.len());
            for item in &inputs {
                let r = generate(&ckpt.model, &vocab, &item.source, item.task, &gen_cfg)?;
                lines.push(serde_json::to_string(&GenerateOutput {
                    source: &item.source,
                    task: item.task,
                    output: &r.text,
                    stop_reason: r.stop_reason,
                    total_log_prob: r.total_log_prob,
                })?);
            }
            let body = lines.join("\n") + "\n";
            match out {
                Some(path) => std::fs::write(&path, body)?,
                None => std::io::stdout().write_all(body.as_bytes())?,
            }
            Ok(0)
        }
        Command::Evaluate {
            pairs,
            candidates,
            references,
        } => {
            let pair_list = match (pairs, candidates, references) {
                (Some(p), None, None) => read_pairs(&p)?,
                (None, Some(c), Some(r)) => read_parallel(&c, &r)?,
                _ => bail!("pass either --pairs or both --candidates and --references"),
            };
            let scores = corpus_rouge(&pair_list, RougeTokenization::Char)?;
            println!("{}", serde_json::to_string_pretty(&scores)?);
            Ok(0)
        }
        Command::Experiment {
            config,
            out,
            resume,
        } => {
            let cfg = load_experiment_config(&config)?;
            let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let report = run_experiment(&cfg, &out_dir, resume)?;
            print!("{}", render_table(&report));
            println!("artifacts: {}", out_dir.display());
            Ok(if report.checks.passed { 0 } else { 1 })
        }
    }
}

enum TrainPhase {
    Pretrain,
    Finetune,
}

/// Shared body of the pretrain and finetune commands: both are train runs
/// differing only in which config phase and initial weights they use.
fn train_command(
    cfg: &ExperimentConfig,
    phase: TrainPhase,
    data: &Path,
    vocab_path: &Path,
    out: &Path,
    seed: Option<u64>,
    init_from: Option<PathBuf>,
) -> Result<i32> {
    let settings = match phase {
        TrainPhase::Pretrain => &cfg.pretrain,
        TrainPhase::Finetune => &cfg.finetune,
    };
    let seed = seed.unwrap_or(0);
    let raws =
        load_jsonl(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let vocab = Vocabulary::load(vocab_path, cfg.vocab.task_count)?;
    let (train_raws, val_raws) = split_train_val(&raws);
    let fmt = |rs: &[dsgpt::data::RawExample]| -> Result<Vec<_>> {
        rs.iter()
            .map(|r| {
                format_example(r, &vocab, cfg.model.max_seq_len, settings.loss_mode)
                    .map_err(Into::into)
            })
            .collect()
    };
    let train_data = TrainData {
        train: fmt(train_raws)?,
        val: fmt(val_raws)?,
        vocab_hash: vocab.content_hash(),
    };
    std::fs::create_dir_all(out)?;
    let mut model = TransformerLM::<f32>::init(cfg.model.to_model_config(vocab.len(), seed))?;
    let report = train(
        &mut model,
        &train_data,
        &settings.to_train_config(seed, init_from),
        out,
    )?;
    let first_ppl = report.epoch_evals.first().map(|e| e.train_perplexity);
    let last_ppl = report.epoch_evals.last().map(|e| e.train_perplexity);
    println!(
        "trained {} steps in {:.1}s -> {}",
        report.step_losses.len(),
        report.wall_clock_seconds,
        report.final_checkpoint.display()
    );
    if let (Some(first), Some(last)) = (first_ppl, last_ppl) {
        println!("train perplexity: {first:.3} -> {last:.3}");
    }
    Ok(0)
}

#[derive(Deserialize)]
struct GenerateInput {
    source: String,
    #[serde(default)]
    task: usize,
}

#[derive(Serialize)]
struct GenerateOutput<'a> {
    source: &'a str,
    task: usize,
    output: &'a str,
    stop_reason: StopReason,
    total_log_prob: f64,
}

fn read_generate_inputs(path: &Path) -> Result<Vec<GenerateInput>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: GenerateInput = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PairLine {
    candidate: String,
    reference: String,
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairLine = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push((pair.candidate, pair.reference));
    }
    Ok(out)
}

fn read_parallel(candidates: &Path, references: &Path) -> Result<Vec<(String, String)>> {
    let cands = std::fs::read_to_string(candidates)
        .with_context(|| format!("reading {}", candidates.display()))?;
    let refs = std::fs::read_to_string(references)
        .with_context(|| format!("reading {}", references.display()))?;
    let cands: Vec<&str> = cands.lines().collect();
    let refs: Vec<&str> = refs.lines().collect();
    if cands.len() != refs.len() {
        bail!(
            "{} candidates but {} references",
            cands.len(),
            refs.len()
        );
    }
    Ok(cands
        .into_iter()
        .zip(refs)
        .map(|(c, r)| (c.to_string(), r.to_string()))
        .collect())
}
