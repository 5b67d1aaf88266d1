//! One-command experiment: pre-train on one synthetic family, fine-tune
//! on another with and without the pre-trained initialization, decode
//! under three strategies, and report a ROUGE comparison table plus
//! directional checks (pre-training helps; EOS amplification shortens).
//!
//! Every artifact lands under one output directory. Stages record a
//! fingerprint of their inputs when they complete; rerunning with
//! `resume` skips stages whose fingerprint and artifacts are intact.
//! Results files contain no wall-clock data, so two runs with the same
//! config and seeds produce byte-identical tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::load_checkpoint;
use crate::data::{
    format_example, load_jsonl, make_synthetic_family, split_train_val, write_jsonl,
    AlphabetSpec, LossMode, RawExample, TaskFamily,
};
use crate::decoder::{generate, DecodeStrategy, GenerationConfig, GenerationResult};
use crate::model::{ModelConfig, TransformerLM};
use crate::rouge::{corpus_rouge, RougeTokenization};
use crate::tokenizer::Vocabulary;
use crate::trainer::{train, TrainConfig, TrainData};

pub const SCRATCH_ARM: &str = "transformer-scratch";
pub const FINETUNED_ARM: &str = "dsgpt-finetuned";
pub const BEAM_ARM: &str = "beam";
pub const GREEDY_ARM: &str = "greedy";
pub const AMPLIFIED_ARM: &str = "greedy+lambda";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at_stage<T, E: std::fmt::Display>(
    stage: &str,
    result: Result<T, E>,
) -> Result<T, ExperimentError> {
    result.map_err(|e| ExperimentError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f32,
    pub tie_embeddings: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 64,
            dropout_rate: 0.0,
            tie_embeddings: true,
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout_rate: self.dropout_rate,
            tie_embeddings: self.tie_embeddings,
            seed,
        }
    }
}

/// One training phase. In config files a `[pretrain]` or `[finetune]`
/// table is either omitted entirely (its phase profile applies) or
/// written out in full; partial tables fail to parse rather than fill
/// silently from the wrong phase's profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub loss_mode: LossMode,
    pub checkpoint_every: usize,
}

impl TrainSettings {
    pub fn pretrain_default() -> Self {
        Self {
            batch_size: 16,
            steps: 300,
            learning_rate: 3e-3,
            warmup_steps: 20,
            grad_clip_norm: 1.0,
            loss_mode: LossMode::FullSequence,
            checkpoint_every: 0,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            batch_size: 16,
            steps: 20,
            learning_rate: 1e-3,
            warmup_steps: 10,
            grad_clip_norm: 1.0,
            loss_mode: LossMode::TargetOnly,
            checkpoint_every: 0,
        }
    }

    pub fn to_train_config(&self, seed: u64, init_from: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            grad_clip_norm: self.grad_clip_norm,
            loss_mode: self.loss_mode,
            seed,
            checkpoint_every: self.checkpoint_every,
            init_from,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub pretrain_family: TaskFamily,
    pub finetune_family: TaskFamily,
    pub pretrain_size: usize,
    pub finetune_size: usize,
    /// When set, loaded instead of synthesizing the pre-training set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_path: Option<PathBuf>,
    /// When set, loaded instead of synthesizing the fine-tuning set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_path: Option<PathBuf>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            pretrain_family: TaskFamily::ACompress,
            finetune_family: TaskFamily::BTitleLike,
            pretrain_size: 2000,
            finetune_size: 200,
            pretrain_path: None,
            finetune_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSettings {
    pub min_freq: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_size: Option<usize>,
    pub task_count: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: None,
            task_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// EOS amplification factor for the `greedy+lambda` arm; the other
    /// arms decode with a factor of 1.
    pub amplification: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncate_to: Option<usize>,
    pub length_normalize_beam: bool,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_new_tokens: 16,
            amplification: 3.0,
            truncate_to: None,
            length_normalize_beam: false,
        }
    }
}

impl GenerationSettings {
    fn to_generation_config(&self, strategy: DecodeStrategy, lambda: f64) -> GenerationConfig {
        GenerationConfig {
            strategy,
            beam_width: self.beam_width,
            max_new_tokens: self.max_new_tokens,
            truncate_to: self.truncate_to,
            eos_amplification: lambda,
            length_normalize_beam: self.length_normalize_beam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub model: ModelSettings,
    pub vocab: VocabSettings,
    pub data: DataSettings,
    #[serde(default = "TrainSettings::pretrain_default")]
    pub pretrain: TrainSettings,
    #[serde(default = "TrainSettings::finetune_default")]
    pub finetune: TrainSettings,
    pub generation: GenerationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs/experiment"),
            model: ModelSettings::default(),
            vocab: VocabSettings::default(),
            data: DataSettings::default(),
            pretrain: TrainSettings::pretrain_default(),
            finetune: TrainSettings::finetune_default(),
            generation: GenerationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |msg: String| Err(ExperimentError::InvalidConfig(msg));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        // The 1-in-20 validation split must be non-empty for both phases.
        if self.data.pretrain_size < 20 || self.data.finetune_size < 20 {
            return fail("dataset sizes must be at least 20".into());
        }
        if self.pretrain.steps == 0 || self.finetune.steps == 0 {
            return fail("train phases need at least one step".into());
        }
        if self.generation.amplification < 1.0 {
            return fail("generation.amplification must be at least 1".into());
        }
        for (name, path) in [
            ("data.pretrain_path", &self.data.pretrain_path),
            ("data.finetune_path", &self.data.finetune_path),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return fail(format!("{name} does not exist: {}", p.display()));
                }
            }
        }
        if self.data.finetune_family.task_index() >= self.vocab.task_count
            || self.data.pretrain_family.task_index() >= self.vocab.task_count
        {
            return fail("vocab.task_count does not cover the configured families".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub model_arm: String,
    pub decode_arm: String,
    pub per_seed_rouge_l: Vec<f64>,
    pub mean_rouge1: f64,
    pub mean_rouge2: f64,
    pub mean_rouge_l: f64,
    pub mean_output_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalChecks {
    /// Seeds where the pre-trained arm beat scratch on beam ROUGE-L.
    pub transfer_wins: usize,
    pub seed_count: usize,
    pub transfer_ok: bool,
    pub mean_rouge_l_margin: f64,
    pub margin_ok: bool,
    /// Mean output lengths on the fine-tuned model's greedy arms.
    pub greedy_mean_len: f64,
    pub amplified_mean_len: f64,
    pub length_ok: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmResult>,
    pub checks: DirectionalChecks,
}

/// Per-seed evaluation record, written as `eval.json` in the seed dir.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedEval {
    seed: u64,
    arms: Vec<SeedArmEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedArmEval {
    model_arm: String,
    decode_arm: String,
    rouge1_f1: f64,
    rouge2_f1: f64,
    rouge_l_f1: f64,
    mean_output_len: f64,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hex::encode(hasher.finalize())
}

fn file_sha_hex(path: &Path) -> Result<String, std::io::Error> {
    Ok(sha_hex(&[&fs::read(path)?]))
}

const DONE_MARKER: &str = "done.txt";

fn stage_is_done(dir: &Path, fingerprint: &str) -> bool {
    fs::read_to_string(dir.join(DONE_MARKER))
        .map(|s| s.trim() == fingerprint)
        .unwrap_or(false)
}

fn mark_stage_done(dir: &Path, fingerprint: &str) -> Result<(), std::io::Error> {
    fs::write(dir.join(DONE_MARKER), format!("{fingerprint}\n"))
}

/// Exclusive ownership of an output directory for the duration of a run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(out: &Path) -> Result<Self, ExperimentError> {
        let path = out.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(ExperimentError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn build_train_data(
    raws: &[RawExample],
    vocab: &Vocabulary,
    max_len: usize,
    loss_mode: LossMode,
    stage: &str,
) -> Result<TrainData, ExperimentError> {
    let (train_raws, val_raws) = split_train_val(raws);
    let fmt = |rs: &[RawExample]| -> Result<Vec<_>, ExperimentError> {
        rs.iter()
            .map(|r| at_stage(stage, format_example(r, vocab, max_len, loss_mode)))
            .collect()
    };
    Ok(TrainData {
        train: fmt(train_raws)?,
        val: fmt(val_raws)?,
        vocab_hash: vocab.content_hash(),
    })
}

/// Synthesizes (or loads) one family's dataset for one seed, reusing the
/// file on resume when its fingerprint matches.
fn data_stage(
    out: &Path,
    family: TaskFamily,
    size: usize,
    explicit: &Option<PathBuf>,
    seed: u64,
    resume: bool,
) -> Result<(Vec<RawExample>, PathBuf), ExperimentError> {
    let stage = format!("data[{family:?}, seed {seed}]");
    if let Some(path) = explicit {
        let raws = at_stage(&stage, load_jsonl(path))?;
        return Ok((raws, path.clone()));
    }
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;
    let file = dir.join(format!("{}_seed{seed}.jsonl", arm_slug(family)));
    let marker_dir = dir.join(format!("{}_seed{seed}.stage", arm_slug(family)));
    fs::create_dir_all(&marker_dir)?;
    let fp = sha_hex(&[
        b"data-v1",
        format!("{family:?}").as_bytes(),
        &size.to_le_bytes(),
        &seed.to_le_bytes(),
    ]);
    if resume && stage_is_done(&marker_dir, &fp) && file.exists() {
        let raws = at_stage(&stage, load_jsonl(&file))?;
        return Ok((raws, file));
    }
    let raws = make_synthetic_family(family, size, seed, &AlphabetSpec::default());
    at_stage(&stage, write_jsonl(&file, &raws))?;
    mark_stage_done(&marker_dir, &fp)?;
    Ok((raws, file))
}

fn arm_slug(family: TaskFamily) -> &'static str {
    match family {
        TaskFamily::ACompress => "a_compress",
        TaskFamily::BTitleLike => "b_title_like",
        TaskFamily::CReviewLike => "c_review_like",
    }
}

/// Trains one phase into `dir/final.bin`, skipping on matching resume
/// fingerprints. Returns the checkpoint path.
#[allow(clippy::too_many_arguments)]
fn train_stage(
    stage: &str,
    dir: &Path,
    model_cfg: ModelConfig,
    data: &TrainData,
    train_cfg: &TrainConfig,
    fingerprint: &str,
    resume: bool,
) -> Result<PathBuf, ExperimentError> {
    let final_ckpt = dir.join("final.bin");
    if resume && stage_is_done(dir, fingerprint) && final_ckpt.exists() {
        return Ok(final_ckpt);
    }
    fs::create_dir_all(dir)?;
    let mut model = at_stage(stage, TransformerLM::<f32>::init(model_cfg))?;
    let report = at_stage(stage, train(&mut model, data, train_cfg, dir))?;
    let summary = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(dir.join("summary.json"), summary)?;
    mark_stage_done(dir, fingerprint)?;
    Ok(final_ckpt)
}

struct ArmSpec {
    decode_arm: &'static str,
    strategy: DecodeStrategy,
    lambda: f64,
}

fn decode_arms(gen: &GenerationSettings) -> [ArmSpec; 3] {
    [
        ArmSpec {
            decode_arm: BEAM_ARM,
            strategy: DecodeStrategy::Beam,
            lambda: 1.0,
        },
        ArmSpec {
            decode_arm: GREEDY_ARM,
            strategy: DecodeStrategy::Greedy,
            lambda: 1.0,
        },
        ArmSpec {
            decode_arm: AMPLIFIED_ARM,
            strategy: DecodeStrategy::Greedy,
            lambda: gen.amplification,
        },
    ]
}

#[derive(Serialize)]
struct GenerationRecord<'a> {
    source: &'a str,
    reference: &'a str,
    output: &'a str,
    stop_reason: &'a crate::decoder::StopReason,
    total_log_prob: f64,
}

/// Generates and scores all six (model x decode) arms for one seed.
fn eval_stage(
    cfg: &ExperimentConfig,
    seed_dir: &Path,
    seed: u64,
    vocab: &Vocabulary,
    val_raws: &[RawExample],
    checkpoints: &[(&str, &Path)],
    fingerprint: &str,
    resume: bool,
) -> Result<SeedEval, ExperimentError> {
    let eval_path = seed_dir.join("eval.json");
    let stage = format!("eval[seed {seed}]");
    if resume && stage_is_done(seed_dir, fingerprint) && eval_path.exists() {
        let text = fs::read_to_string(&eval_path)?;
        return at_stage(&stage, serde_json::from_str::<SeedEval>(&text));
    }
    let task = cfg.data.finetune_family.task_index();
    let mut arms = Vec::new();
    for (model_arm, ckpt_path) in checkpoints {
        let ckpt = at_stage(&stage, load_checkpoint(ckpt_path))?;
        at_stage(&stage, ckpt.require_vocab(&vocab.content_hash()))?;
        for spec in decode_arms(&cfg.generation) {
            let gen_cfg = cfg
                .generation
                .to_generation_config(spec.strategy, spec.lambda);
            let mut results: Vec<GenerationResult> = Vec::with_capacity(val_raws.len());
            for raw in val_raws {
                let r = at_stage(
                    &stage,
                    generate(&ckpt.model, vocab, &raw.source, task, &gen_cfg),
                );
                results.push(r?);
            }
            let records: Vec<String> = val_raws
                .iter()
                .zip(&results)
                .map(|(raw, r)| {
                    serde_json::to_string(&GenerationRecord {
                        source: &raw.source,
                        reference: &raw.target,
                        output: &r.text,
                        stop_reason: &r.stop_reason,
                        total_log_prob: r.total_log_prob,
                    })
                    .expect("record serializes")
                })
                .collect();
            fs::write(
                seed_dir.join(format!("gen_{model_arm}_{}.jsonl", spec.decode_arm)),
                records.join("\n") + "\n",
            )?;
            let pairs: Vec<(String, String)> = val_raws
                .iter()
                .zip(&results)
                .map(|(raw, r)| (r.text.clone(), raw.target.clone()))
                .collect();
            let scores = at_stage(&stage, corpus_rouge(&pairs, RougeTokenization::Char))?;
            let mean_len = results.iter().map(|r| r.ids.len() as f64).sum::<f64>()
                / results.len() as f64;
            arms.push(SeedArmEval {
                model_arm: model_arm.to_string(),
                decode_arm: spec.decode_arm.to_string(),
                rouge1_f1: scores.rouge1.f1,
                rouge2_f1: scores.rouge2.f1,
                rouge_l_f1: scores.rouge_l.f1,
                mean_output_len: mean_len,
            });
        }
    }
    let eval = SeedEval { seed, arms };
    fs::write(
        &eval_path,
        serde_json::to_string_pretty(&eval).expect("eval serializes"),
    )?;
    mark_stage_done(seed_dir, fingerprint)?;
    Ok(eval)
}

fn aggregate(cfg: &ExperimentConfig, evals: &[SeedEval]) -> ExperimentReport {
    let mut arms = Vec::new();
    for model_arm in [SCRATCH_ARM, FINETUNED_ARM] {
        for spec in decode_arms(&cfg.generation) {
            let picked: Vec<&SeedArmEval> = evals
                .iter()
                .map(|e| {
                    e.arms
                        .iter()
                        .find(|a| a.model_arm == model_arm && a.decode_arm == spec.decode_arm)
                        .expect("every seed evaluates every arm")
                })
                .collect();
            let n = picked.len() as f64;
            arms.push(ArmResult {
                model_arm: model_arm.to_string(),
                decode_arm: spec.decode_arm.to_string(),
                per_seed_rouge_l: picked.iter().map(|a| a.rouge_l_f1).collect(),
                mean_rouge1: picked.iter().map(|a| a.rouge1_f1).sum::<f64>() / n,
                mean_rouge2: picked.iter().map(|a| a.rouge2_f1).sum::<f64>() / n,
                mean_rouge_l: picked.iter().map(|a| a.rouge_l_f1).sum::<f64>() / n,
                mean_output_len: picked.iter().map(|a| a.mean_output_len).sum::<f64>() / n,
            });
        }
    }
    let find = |model: &str, decode: &str| -> &ArmResult {
        arms.iter()
            .find(|a| a.model_arm == model && a.decode_arm == decode)
            .expect("all arms aggregated")
    };
    let tuned = find(FINETUNED_ARM, BEAM_ARM);
    let scratch = find(SCRATCH_ARM, BEAM_ARM);
    let transfer_wins = tuned
        .per_seed_rouge_l
        .iter()
        .zip(&scratch.per_seed_rouge_l)
        .filter(|(t, s)| t > s)
        .count();
    let seed_count = cfg.seeds.len();
    let required_wins = 4 * seed_count / 5;
    let mean_margin = tuned.mean_rouge_l - scratch.mean_rouge_l;
    let greedy_len = find(FINETUNED_ARM, GREEDY_ARM).mean_output_len;
    let amplified_len = find(FINETUNED_ARM, AMPLIFIED_ARM).mean_output_len;
    let checks = DirectionalChecks {
        transfer_wins,
        seed_count,
        transfer_ok: transfer_wins >= required_wins.max(1),
        mean_rouge_l_margin: mean_margin,
        margin_ok: mean_margin > 0.0,
        greedy_mean_len: greedy_len,
        amplified_mean_len: amplified_len,
        length_ok: amplified_len < greedy_len,
        passed: false,
    };
    let passed = checks.transfer_ok && checks.margin_ok && checks.length_ok;
    ExperimentReport {
        seeds: cfg.seeds.clone(),
        arms,
        checks: DirectionalChecks { passed, ..checks },
    }
}

/// Plain-text rendering of the comparison table and checks. Fixed-width
/// formatting keeps reruns byte-identical.
pub fn render_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<14} {:>8} {:>8} {:>8} {:>7}  per-seed ROUGE-L",
        "model", "decoding", "ROUGE-1", "ROUGE-2", "ROUGE-L", "len"
    );
    for arm in &report.arms {
        let per_seed = arm
            .per_seed_rouge_l
            .iter()
            .map(|v| format!("{v:.2}"))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            "{:<20} {:<14} {:>8.2} {:>8.2} {:>8.2} {:>7.2}  {per_seed}",
            arm.model_arm,
            arm.decode_arm,
            arm.mean_rouge1,
            arm.mean_rouge2,
            arm.mean_rouge_l,
            arm.mean_output_len,
        );
    }
    let c = &report.checks;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "transfer (pretrained > scratch, beam ROUGE-L): {}/{} seeds  {}",
        c.transfer_wins,
        c.seed_count,
        verdict(c.transfer_ok)
    );
    let _ = writeln!(
        out,
        "mean ROUGE-L margin: {:+.2}  {}",
        c.mean_rouge_l_margin,
        verdict(c.margin_ok)
    );
    let _ = writeln!(
        out,
        "length control (amplified {:.2} < greedy {:.2})  {}",
        c.amplified_mean_len,
        c.greedy_mean_len,
        verdict(c.length_ok)
    );
    let _ = writeln!(out, "overall: {}", verdict(c.passed));
    out
}

/// Runs the full pipeline under `out`. With `resume`, stages whose
/// fingerprints and artifacts are intact are skipped.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let _lock = DirLock::acquire(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;

    // The vocabulary is seed-independent: it covers the full generator
    // alphabet, so every synthetic example encodes without UNKs.
    let alphabet = AlphabetSpec::default().all_chars();
    let vocab = at_stage(
        "vocab",
        Vocabulary::build(
            &[alphabet.as_str()],
            cfg.vocab.min_freq,
            cfg.vocab.max_size,
            cfg.vocab.task_count,
        ),
    )?;
    at_stage("vocab", vocab.save(&out.join("vocab.txt")))?;
    let vocab_hash_hex = vocab.content_hash_hex();

    let model_toml = toml::to_string(&cfg.model).expect("model settings serialize");
    let pretrain_toml = toml::to_string(&cfg.pretrain).expect("train settings serialize");
    let finetune_toml = toml::to_string(&cfg.finetune).expect("train settings serialize");
    let generation_toml = toml::to_string(&cfg.generation).expect("generation settings serialize");

    let mut evals = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir)?;

        let (pre_raws, pre_path) = data_stage(
            out,
            cfg.data.pretrain_family,
            cfg.data.pretrain_size,
            &cfg.data.pretrain_path,
            seed,
            resume,
        )?;
        let (fine_raws, fine_path) = data_stage(
            out,
            cfg.data.finetune_family,
            cfg.data.finetune_size,
            &cfg.data.finetune_path,
            seed,
            resume,
        )?;
        let pre_data_hash = file_sha_hex(&pre_path)?;
        let fine_data_hash = file_sha_hex(&fine_path)?;

        let pretrain_stage_name = format!("pretrain[seed {seed}]");
        let pre_data = build_train_data(
            &pre_raws,
            &vocab,
            cfg.model.max_seq_len,
            cfg.pretrain.loss_mode,
            &pretrain_stage_name,
        )?;
        let pretrain_fp = sha_hex(&[
            b"pretrain-v1",
            model_toml.as_bytes(),
            pretrain_toml.as_bytes(),
            &seed.to_le_bytes(),
            vocab_hash_hex.as_bytes(),
            pre_data_hash.as_bytes(),
        ]);
        let pretrain_ckpt = train_stage(
            &pretrain_stage_name,
            &seed_dir.join("pretrain"),
            cfg.model.to_model_config(vocab.len(), seed),
            &pre_data,
            &cfg.pretrain.to_train_config(seed, None),
            &pretrain_fp,
            resume,
        )?;
        let pretrain_ckpt_hash = file_sha_hex(&pretrain_ckpt)?;

        let fine_data = build_train_data(
            &fine_raws,
            &vocab,
            cfg.model.max_seq_len,
            cfg.finetune.loss_mode,
            "finetune",
        )?;
        let tuned_fp = sha_hex(&[
            b"finetune-pretrained-v1",
            model_toml.as_bytes(),
            finetune_toml.as_bytes(),
            &seed.to_le_bytes(),
            vocab_hash_hex.as_bytes(),
            fine_data_hash.as_bytes(),
            pretrain_ckpt_hash.as_bytes(),
        ]);
        let tuned_ckpt = train_stage(
            &format!("finetune-pretrained[seed {seed}]"),
            &seed_dir.join("finetune_pretrained"),
            cfg.model.to_model_config(vocab.len(), seed),
            &fine_data,
            &cfg.finetune.to_train_config(seed, Some(pretrain_ckpt.clone())),
            &tuned_fp,
            resume,
        )?;
        let scratch_fp = sha_hex(&[
            b"finetune-scratch-v1",
            model_toml.as_bytes(),
            finetune_toml.as_bytes(),
            &seed.to_le_bytes(),
            vocab_hash_hex.as_bytes(),
            fine_data_hash.as_bytes(),
        ]);
        let scratch_ckpt = train_stage(
            &format!("finetune-scratch[seed {seed}]"),
            &seed_dir.join("finetune_scratch"),
            cfg.model.to_model_config(vocab.len(), seed),
            &fine_data,
            &cfg.finetune.to_train_config(seed, None),
            &scratch_fp,
            resume,
        )?;

        let (_, val_raws) = split_train_val(&fine_raws);
        let eval_fp = sha_hex(&[
            b"eval-v1",
            generation_toml.as_bytes(),
            &seed.to_le_bytes(),
            vocab_hash_hex.as_bytes(),
            fine_data_hash.as_bytes(),
            file_sha_hex(&tuned_ckpt)?.as_bytes(),
            file_sha_hex(&scratch_ckpt)?.as_bytes(),
        ]);
        let eval = eval_stage(
            cfg,
            &seed_dir,
            seed,
            &vocab,
            val_raws,
            &[
                (SCRATCH_ARM, scratch_ckpt.as_path()),
                (FINETUNED_ARM, tuned_ckpt.as_path()),
            ],
            &eval_fp,
            resume,
        )?;
        evals.push(eval);
    }

    let report = aggregate(cfg, &evals);
    fs::write(
        out.join("results.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    fs::write(out.join("results.txt"), render_table(&report))?;
    Ok(report)
}
