//! Autoregressive decoding: greedy and beam search over a trained
//! language model, with structural-token masking and optional EOS
//! probability amplification for length control.
//!
//! Step distributions are computed in 64-bit regardless of the model's
//! parameter precision. At each step the raw softmax is masked so that
//! PAD, BOS, SEP, and task tokens can never be emitted (UNK and EOS stay
//! legal), the EOS probability is multiplied by the amplification factor,
//! and the result is renormalized exactly once. An amplification factor
//! of 1 skips the multiply, so that path is bit-identical to masking
//! alone.
//!
//! Beam search keeps `beam_width` hypotheses ranked by summed log
//! probability of the masked distribution. Finished hypotheses keep
//! their beam slots and are never refilled, and candidates from the same
//! step compete under (score, then lowest token id) with EOS compared by
//! its real id. Those two rules make beam width 1 reproduce greedy
//! decoding token for token, including tie handling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TransformerLM};
use crate::tensor::Scalar;
use crate::tokenizer::{VocabError, Vocabulary, BOS, EOS, PAD, SEP, TASK_BASE};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("prompt of {prompt} tokens plus budget of {budget} exceeds max_seq_len {max}")]
    ContextOverflow {
        prompt: usize,
        budget: usize,
        max: usize,
    },
    #[error("all emittable tokens have zero probability")]
    DegenerateDistribution,
    #[error("task index {task} out of range for {task_count} tasks")]
    InvalidTask { task: usize, task_count: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: DecodeStrategy,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Hard cap applied after decoding; `None` leaves output untouched.
    pub truncate_to: Option<usize>,
    /// EOS probability multiplier, at least 1. One disables amplification.
    pub eos_amplification: f64,
    /// Rank final beam hypotheses by score divided by step count.
    pub length_normalize_beam: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            beam_width: 5,
            max_new_tokens: 32,
            truncate_to: None,
            eos_amplification: 1.0,
            length_normalize_beam: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::InvalidConfig(
                "beam_width must be at least 1".into(),
            ));
        }
        if !self.eos_amplification.is_finite() || self.eos_amplification < 1.0 {
            return Err(DecodeError::InvalidConfig(format!(
                "eos_amplification must be a finite value >= 1, got {}",
                self.eos_amplification
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The model emitted EOS within budget.
    Eos,
    /// The new-token budget ran out first.
    MaxLen,
    /// `truncate_to` cut the decoded output.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Emitted content token ids; EOS is never included.
    pub ids: Vec<usize>,
    pub text: String,
    /// Log probability of each emitted id under the raw (unmasked,
    /// unamplified) model softmax.
    pub token_log_probs: Vec<f64>,
    /// Sum of `token_log_probs`.
    pub total_log_prob: f64,
    pub stop_reason: StopReason,
}

/// Zeroes structural tokens, multiplies the EOS entry by `lambda`, and
/// renormalizes once. `probs` must cover the whole vocabulary.
pub fn mask_and_amplify(
    probs: &mut [f64],
    task_count: usize,
    lambda: f64,
) -> Result<(), DecodeError> {
    probs[PAD] = 0.0;
    probs[BOS] = 0.0;
    probs[SEP] = 0.0;
    for task in 0..task_count {
        probs[TASK_BASE + task] = 0.0;
    }
    if lambda != 1.0 {
        probs[EOS] *= lambda;
    }
    let sum: f64 = probs.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(DecodeError::DegenerateDistribution);
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(())
}

/// Raw log-softmax of the next-token logits plus the masked, amplified,
/// renormalized sampling distribution, both in 64-bit.
fn step_distributions<E: Scalar>(
    model: &TransformerLM<E>,
    prefix: &[usize],
    task_count: usize,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), DecodeError> {
    let logits = model.forward(prefix, false)?;
    let vocab = model.config().vocab_size;
    let last = &logits.data()[(prefix.len() - 1) * vocab..prefix.len() * vocab];
    let row: Vec<f64> = last.iter().map(|&x| x.to_f64()).collect();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let raw_log_probs: Vec<f64> = row.iter().map(|x| x - max - log_norm).collect();
    let mut stepped: Vec<f64> = raw_log_probs.iter().map(|lp| lp.exp()).collect();
    mask_and_amplify(&mut stepped, task_count, lambda)?;
    Ok((raw_log_probs, stepped))
}

fn check_budget<E: Scalar>(
    model: &TransformerLM<E>,
    prompt: &[usize],
    config: &GenerationConfig,
) -> Result<(), DecodeError> {
    if prompt.len() + config.max_new_tokens > model.config().max_seq_len {
        return Err(DecodeError::ContextOverflow {
            prompt: prompt.len(),
            budget: config.max_new_tokens,
            max: model.config().max_seq_len,
        });
    }
    Ok(())
}

fn finish(
    mut ids: Vec<usize>,
    mut token_log_probs: Vec<f64>,
    stop_reason: StopReason,
    truncate_to: Option<usize>,
    vocab: &Vocabulary,
) -> Result<GenerationResult, DecodeError> {
    let mut stop_reason = stop_reason;
    if let Some(limit) = truncate_to {
        if ids.len() > limit {
            ids.truncate(limit);
            token_log_probs.truncate(limit);
            stop_reason = StopReason::Truncated;
        }
    }
    Ok(GenerationResult {
        text: vocab.decode(&ids, false)?,
        total_log_prob: token_log_probs.iter().sum(),
        ids,
        token_log_probs,
        stop_reason,
    })
}

/// Greedy decoding: at each step take the highest-probability emittable
/// token, breaking ties toward the lowest id. Emitting EOS stops early.
pub fn greedy<E: Scalar>(
    model: &TransformerLM<E>,
    vocab: &Vocabulary,
    prompt: &[usize],
    config: &GenerationConfig,
) -> Result<GenerationResult, DecodeError> {
    config.validate()?;
    check_budget(model, prompt, config)?;
    let mut prefix = prompt.to_vec();
    let mut ids = Vec::new();
    let mut token_log_probs = Vec::new();
    let mut stop_reason = StopReason::MaxLen;
    for _ in 0..config.max_new_tokens {
        let (raw_lp, stepped) =
            step_distributions(model, &prefix, vocab.task_count(), config.eos_amplification)?;
        let mut best = 0usize;
        for (id, &p) in stepped.iter().enumerate() {
            if p > stepped[best] {
                best = id;
            }
        }
        if best == EOS {
            stop_reason = StopReason::Eos;
            break;
        }
        ids.push(best);
        token_log_probs.push(raw_lp[best]);
        prefix.push(best);
    }
    finish(ids, token_log_probs, stop_reason, config.truncate_to, vocab)
}

struct Hypothesis {
    /// Content ids emitted so far; EOS never appears here.
    ids: Vec<usize>,
    /// Raw log probability of each content id.
    raw_log_probs: Vec<f64>,
    /// Sum of masked-distribution log probabilities over all steps taken,
    /// including the EOS step for hypotheses that finished on EOS.
    score: f64,
    /// Number of scored steps, used for length normalization.
    steps: usize,
    state: HypothesisState,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum HypothesisState {
    Live,
    FinishedEos,
    FinishedBudget,
}

impl Hypothesis {
    /// Ids used for lexicographic tie-breaking. Hypotheses that finished
    /// on EOS carry it virtually so they order against longer siblings
    /// exactly as the emitted token streams would.
    fn ranking_ids(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        if self.state == HypothesisState::FinishedEos {
            ids.push(EOS);
        }
        ids
    }

    fn normalized_score(&self) -> f64 {
        self.score / self.steps.max(1) as f64
    }
}

/// Total order used both for beam slot selection and final ranking:
/// higher score first, then lexicographically smaller token stream.
fn rank_key(h: &Hypothesis, normalize: bool) -> (f64, Vec<usize>) {
    let score = if normalize { h.normalized_score() } else { h.score };
    (score, h.ranking_ids())
}

fn sort_hypotheses(hyps: &mut Vec<Hypothesis>, normalize: bool) {
    hyps.sort_by(|a, b| {
        let (sa, ia) = rank_key(a, normalize);
        let (sb, ib) = rank_key(b, normalize);
        sb.total_cmp(&sa).then_with(|| ia.cmp(&ib))
    });
}

/// Beam search over the masked next-token distribution. Finished
/// hypotheses occupy beam slots until displaced by higher-ranked
/// candidates. Without length normalization the search stops as soon as
/// the best finished hypothesis strictly outranks every live score,
/// since live scores can only fall.
pub fn beam_search<E: Scalar>(
    model: &TransformerLM<E>,
    vocab: &Vocabulary,
    prompt: &[usize],
    config: &GenerationConfig,
) -> Result<GenerationResult, DecodeError> {
    config.validate()?;
    check_budget(model, prompt, config)?;
    if config.max_new_tokens == 0 {
        return finish(
            Vec::new(),
            Vec::new(),
            StopReason::MaxLen,
            config.truncate_to,
            vocab,
        );
    }
    let mut beam = vec![Hypothesis {
        ids: Vec::new(),
        raw_log_probs: Vec::new(),
        score: 0.0,
        steps: 0,
        state: HypothesisState::Live,
    }];
    loop {
        let any_live = beam.iter().any(|h| h.state == HypothesisState::Live);
        if !any_live {
            break;
        }
        // Live hypotheses all share a length; at budget they terminate
        // without an EOS step, mirroring greedy's budget stop.
        let live_len = beam
            .iter()
            .find(|h| h.state == HypothesisState::Live)
            .map(|h| h.ids.len())
            .unwrap();
        if live_len == config.max_new_tokens {
            for h in beam.iter_mut() {
                if h.state == HypothesisState::Live {
                    h.state = HypothesisState::FinishedBudget;
                }
            }
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in beam.drain(..) {
            if h.state != HypothesisState::Live {
                candidates.push(h);
                continue;
            }
            let mut prefix = prompt.to_vec();
            prefix.extend_from_slice(&h.ids);
            let (raw_lp, stepped) =
                step_distributions(model, &prefix, vocab.task_count(), config.eos_amplification)?;
            for (id, &p) in stepped.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                if id == EOS {
                    candidates.push(Hypothesis {
                        ids: h.ids.clone(),
                        raw_log_probs: h.raw_log_probs.clone(),
                        score: h.score + p.ln(),
                        steps: h.steps + 1,
                        state: HypothesisState::FinishedEos,
                    });
                } else {
                    let mut ids = h.ids.clone();
                    ids.push(id);
                    let mut raw_log_probs = h.raw_log_probs.clone();
                    raw_log_probs.push(raw_lp[id]);
                    candidates.push(Hypothesis {
                        ids,
                        raw_log_probs,
                        score: h.score + p.ln(),
                        steps: h.steps + 1,
                        state: HypothesisState::Live,
                    });
                }
            }
        }
        // Slot selection always uses unnormalized scores.
        sort_hypotheses(&mut candidates, false);
        candidates.truncate(config.beam_width);
        beam = candidates;
        if !config.length_normalize_beam {
            let best_finished = beam
                .iter()
                .filter(|h| h.state != HypothesisState::Live)
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live = beam
                .iter()
                .filter(|h| h.state == HypothesisState::Live)
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_finished > best_live {
                beam.retain(|h| h.state != HypothesisState::Live);
                break;
            }
        }
    }
    sort_hypotheses(&mut beam, config.length_normalize_beam);
    let winner = beam
        .into_iter()
        .next()
        .ok_or(DecodeError::DegenerateDistribution)?;
    let stop_reason = match winner.state {
        HypothesisState::FinishedEos => StopReason::Eos,
        _ => StopReason::MaxLen,
    };
    finish(
        winner.ids,
        winner.raw_log_probs,
        stop_reason,
        config.truncate_to,
        vocab,
    )
}

/// Builds the conditioning prompt `[BOS, task token, source, SEP]` and
/// decodes with the configured strategy.
pub fn generate<E: Scalar>(
    model: &TransformerLM<E>,
    vocab: &Vocabulary,
    source: &str,
    task: usize,
    config: &GenerationConfig,
) -> Result<GenerationResult, DecodeError> {
    let task_token = vocab.task_id(task).ok_or(DecodeError::InvalidTask {
        task,
        task_count: vocab.task_count(),
    })?;
    let mut prompt = vec![BOS, task_token];
    prompt.extend(vocab.encode(source));
    prompt.push(SEP);
    match config.strategy {
        DecodeStrategy::Greedy => greedy(model, vocab, &prompt, config),
        DecodeStrategy::Beam => beam_search(model, vocab, &prompt, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{format_example, LossMode, RawExample};
    use crate::model::ModelConfig;
    use crate::tokenizer::UNK;
    use crate::trainer::{lm_loss_and_grads, AdamState};

    fn test_vocab(content: &str, tasks: usize) -> Vocabulary {
        Vocabulary::build(&[content], 1, None, tasks).unwrap()
    }

    fn small_config(vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            max_seq_len: 32,
            vocab_size,
            dropout_rate: 0.0,
            tie_embeddings: true,
            seed,
        }
    }

    fn prompt_for(vocab: &Vocabulary, source: &str, task: usize) -> Vec<usize> {
        let mut p = vec![BOS, vocab.task_id(task).unwrap()];
        p.extend(vocab.encode(source));
        p.push(SEP);
        p
    }

    #[test]
    fn amplification_hand_example() {
        // Allowed mass before renorm: EOS 0.2, two content tokens 0.5
        // and 0.3. Doubling EOS gives 0.4/0.5/0.3, normalizing by 1.2
        // gives 1/3, 5/12, 1/4.
        let mut probs = vec![0.0; 8];
        probs[PAD] = 0.05;
        probs[BOS] = 0.03;
        probs[SEP] = 0.02;
        probs[TASK_BASE] = 0.1;
        probs[EOS] = 0.2;
        probs[6] = 0.5;
        probs[7] = 0.3;
        mask_and_amplify(&mut probs, 1, 2.0).unwrap();
        assert!((probs[EOS] - 1.0 / 3.0).abs() < 1e-12);
        assert!((probs[6] - 5.0 / 12.0).abs() < 1e-12);
        assert!((probs[7] - 0.25).abs() < 1e-12);
        assert_eq!(probs[PAD], 0.0);
        assert_eq!(probs[TASK_BASE], 0.0);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_amplification_is_bitwise_identical_to_masking_alone() {
        let raw = [0.11, 0.07, 0.13, 0.05, 0.17, 0.19, 0.23, 0.05];
        let mut amplified = raw.to_vec();
        mask_and_amplify(&mut amplified, 1, 1.0).unwrap();
        // Reference path: mask and renormalize with no amplification step.
        let mut reference = raw.to_vec();
        for id in [PAD, BOS, SEP, TASK_BASE] {
            reference[id] = 0.0;
        }
        let sum: f64 = reference.iter().sum();
        for p in reference.iter_mut() {
            *p /= sum;
        }
        for (a, r) in amplified.iter().zip(&reference) {
            assert_eq!(a.to_bits(), r.to_bits());
        }
    }

    #[test]
    fn zero_emittable_mass_is_degenerate() {
        let mut probs = vec![0.0; 8];
        probs[PAD] = 0.6;
        probs[BOS] = 0.4;
        assert!(matches!(
            mask_and_amplify(&mut probs, 1, 1.0),
            Err(DecodeError::DegenerateDistribution)
        ));
    }

    #[test]
    fn amplification_matches_logit_shift() {
        // Multiplying the EOS probability by lambda and renormalizing
        // must agree with adding ln(lambda) to the EOS logit before the
        // softmax, because both scale the EOS term of the partition sum.
        let logits = [0.3, -1.2, 0.8, 0.1, -0.4, 1.5, -0.9, 0.6];
        let lambda = 3.7;
        let softmax = |xs: &[f64]| {
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / s).collect::<Vec<f64>>()
        };
        let mut via_probs = softmax(&logits);
        mask_and_amplify(&mut via_probs, 1, lambda).unwrap();
        let mut shifted = logits.to_vec();
        shifted[EOS] += lambda.ln();
        let mut via_logits = softmax(&shifted);
        mask_and_amplify(&mut via_logits, 1, 1.0).unwrap();
        for (a, b) in via_probs.iter().zip(&via_logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_width = GenerationConfig {
            beam_width: 0,
            ..GenerationConfig::default()
        };
        assert!(matches!(
            bad_width.validate(),
            Err(DecodeError::InvalidConfig(_))
        ));
        for lambda in [0.5, f64::NAN, f64::INFINITY] {
            let bad_lambda = GenerationConfig {
                eos_amplification: lambda,
                ..GenerationConfig::default()
            };
            assert!(matches!(
                bad_lambda.validate(),
                Err(DecodeError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn budget_overflow_is_rejected() {
        let vocab = test_vocab("abc", 1);
        let model = TransformerLM::<f32>::init(small_config(vocab.len(), 3)).unwrap();
        let prompt = prompt_for(&vocab, "abc", 0);
        let config = GenerationConfig {
            max_new_tokens: 64,
            ..GenerationConfig::default()
        };
        assert!(matches!(
            greedy(&model, &vocab, &prompt, &config),
            Err(DecodeError::ContextOverflow { .. })
        ));
        assert!(matches!(
            beam_search(&model, &vocab, &prompt, &config),
            Err(DecodeError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn generate_rejects_out_of_range_task() {
        let vocab = test_vocab("abc", 2);
        let model = TransformerLM::<f32>::init(small_config(vocab.len(), 3)).unwrap();
        let err = generate(&model, &vocab, "ab", 2, &GenerationConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            DecodeError::InvalidTask {
                task: 2,
                task_count: 2
            }
        ));
    }

    /// Trains a one-layer model to memorize a single formatted example.
    fn memorize(
        vocab: &Vocabulary,
        source: &str,
        target: &str,
        steps: usize,
    ) -> TransformerLM<f32> {
        let raw = RawExample {
            source: source.into(),
            target: target.into(),
            task: 0,
        };
        let example = format_example(&raw, vocab, 32, LossMode::FullSequence).unwrap();
        let mut model = TransformerLM::<f32>::init(small_config(vocab.len(), 11)).unwrap();
        let mut adam = AdamState::new(&model);
        for _ in 0..steps {
            let batch = [example.clone()];
            lm_loss_and_grads(&mut model, &batch, None).unwrap();
            adam.step(&mut model, 3e-3);
        }
        model
    }

    #[test]
    fn memorized_model_reproduces_target_and_stops_on_eos() {
        let vocab = test_vocab("abcdxyz", 1);
        let model = memorize(&vocab, "xyzax", "xyza", 250);
        let config = GenerationConfig {
            max_new_tokens: 8,
            ..GenerationConfig::default()
        };
        let result = generate(&model, &vocab, "xyzax", 0, &config).unwrap();
        assert_eq!(result.text, "xyza");
        assert_eq!(result.stop_reason, StopReason::Eos);
        assert_eq!(result.ids, vocab.encode("xyza"));
        assert_eq!(result.token_log_probs.len(), 4);
        // A confident model assigns nearly all mass to each target token.
        assert!(result.total_log_prob > -0.5, "{}", result.total_log_prob);
    }

    #[test]
    fn beam_width_one_matches_greedy_on_random_models() {
        let vocab = test_vocab("abcdef", 2);
        for seed in [5u64, 17, 42] {
            let model = TransformerLM::<f32>::init(small_config(vocab.len(), seed)).unwrap();
            for source in ["a", "fed", "abcabc", ""] {
                for lambda in [1.0, 2.5] {
                    let base = GenerationConfig {
                        max_new_tokens: 6,
                        eos_amplification: lambda,
                        ..GenerationConfig::default()
                    };
                    let g = generate(&model, &vocab, source, 1, &base).unwrap();
                    let beam_cfg = GenerationConfig {
                        strategy: DecodeStrategy::Beam,
                        beam_width: 1,
                        ..base
                    };
                    let b = generate(&model, &vocab, source, 1, &beam_cfg).unwrap();
                    assert_eq!(g.ids, b.ids, "seed {seed} source {source:?}");
                    assert_eq!(g.stop_reason, b.stop_reason);
                    assert_eq!(g.text, b.text);
                }
            }
        }
    }

    /// Exhaustively enumerates every terminal hypothesis: EOS-terminated
    /// streams shorter than the budget and full-budget streams without a
    /// final EOS step, scored exactly like the beam.
    fn brute_force_best(
        model: &TransformerLM<f32>,
        vocab: &Vocabulary,
        prompt: &[usize],
        max_new: usize,
    ) -> (Vec<usize>, f64, bool) {
        struct Terminal {
            ids: Vec<usize>,
            score: f64,
            finished_eos: bool,
        }
        fn expand(
            model: &TransformerLM<f32>,
            vocab: &Vocabulary,
            prompt: &[usize],
            ids: Vec<usize>,
            score: f64,
            max_new: usize,
            out: &mut Vec<Terminal>,
        ) {
            if ids.len() == max_new {
                out.push(Terminal {
                    ids,
                    score,
                    finished_eos: false,
                });
                return;
            }
            let mut prefix = prompt.to_vec();
            prefix.extend_from_slice(&ids);
            let (_, stepped) =
                step_distributions(model, &prefix, vocab.task_count(), 1.0).unwrap();
            for (id, &p) in stepped.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                if id == EOS {
                    out.push(Terminal {
                        ids: ids.clone(),
                        score: score + p.ln(),
                        finished_eos: true,
                    });
                } else {
                    let mut next = ids.clone();
                    next.push(id);
                    expand(model, vocab, prompt, next, score + p.ln(), max_new, out);
                }
            }
        }
        let mut all = Vec::new();
        expand(model, vocab, prompt, Vec::new(), 0.0, max_new, &mut all);
        let ranking = |t: &Terminal| {
            let mut ids = t.ids.clone();
            if t.finished_eos {
                ids.push(EOS);
            }
            ids
        };
        all.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| ranking(a).cmp(&ranking(b)))
        });
        let best = &all[0];
        (best.ids.clone(), best.score, best.finished_eos)
    }

    #[test]
    fn saturated_beam_matches_exhaustive_search() {
        // Three content characters plus UNK give four live expansions per
        // step; with a budget of two the whole candidate space holds
        // 1 + 4 EOS-terminated plus 16 budget-terminated hypotheses, so a
        // width of 64 retains everything.
        let vocab = test_vocab("abc", 1);
        for seed in [2u64, 9, 23, 31] {
            let model = TransformerLM::<f32>::init(small_config(vocab.len(), seed)).unwrap();
            for source in ["a", "cb", "abc", "cab"] {
                let prompt = prompt_for(&vocab, source, 0);
                let config = GenerationConfig {
                    strategy: DecodeStrategy::Beam,
                    beam_width: 64,
                    max_new_tokens: 2,
                    ..GenerationConfig::default()
                };
                let beam = beam_search(&model, &vocab, &prompt, &config).unwrap();
                let (oracle_ids, _, oracle_eos) =
                    brute_force_best(&model, &vocab, &prompt, 2);
                assert_eq!(beam.ids, oracle_ids, "seed {seed} source {source}");
                let expect = if oracle_eos {
                    StopReason::Eos
                } else {
                    StopReason::MaxLen
                };
                assert_eq!(beam.stop_reason, expect);
            }
        }
    }

    #[test]
    fn uniform_model_ties_break_toward_lowest_id() {
        // Zeroed weights yield uniform logits, so every step distribution
        // ties. Greedy and beam width 1 must both pick UNK, the lowest
        // emittable id. A wider beam instead surfaces the empty
        // EOS-terminated hypothesis, whose single-step score beats any
        // two-step product.
        let vocab = test_vocab("ab", 1);
        let mut model = TransformerLM::<f32>::init(small_config(vocab.len(), 0)).unwrap();
        model.visit_params_mut(|_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        let prompt = prompt_for(&vocab, "a", 0);
        let config = GenerationConfig {
            max_new_tokens: 2,
            ..GenerationConfig::default()
        };
        let g = greedy(&model, &vocab, &prompt, &config).unwrap();
        assert_eq!(g.ids, vec![UNK, UNK]);
        assert_eq!(g.stop_reason, StopReason::MaxLen);
        let narrow = GenerationConfig {
            strategy: DecodeStrategy::Beam,
            beam_width: 1,
            ..config.clone()
        };
        let b1 = beam_search(&model, &vocab, &prompt, &narrow).unwrap();
        assert_eq!(b1.ids, g.ids);
        assert_eq!(b1.stop_reason, g.stop_reason);
        let wide = GenerationConfig {
            strategy: DecodeStrategy::Beam,
            beam_width: 8,
            ..config
        };
        let b8 = beam_search(&model, &vocab, &prompt, &wide).unwrap();
        assert_eq!(b8.ids, Vec::<usize>::new());
        assert_eq!(b8.stop_reason, StopReason::Eos);
    }

    #[test]
    fn extreme_amplification_forces_immediate_eos() {
        let vocab = test_vocab("abcdef", 1);
        let model = TransformerLM::<f32>::init(small_config(vocab.len(), 7)).unwrap();
        let config = GenerationConfig {
            eos_amplification: 1e9,
            max_new_tokens: 8,
            ..GenerationConfig::default()
        };
        let result = generate(&model, &vocab, "abc", 0, &config).unwrap();
        assert_eq!(result.ids, Vec::<usize>::new());
        assert_eq!(result.stop_reason, StopReason::Eos);
        assert_eq!(result.total_log_prob, 0.0);
    }

    #[test]
    fn truncation_cuts_and_relabels_only_when_needed() {
        let vocab = test_vocab("abcdxyz", 1);
        let model = memorize(&vocab, "xyzax", "xyza", 250);
        let cut = GenerationConfig {
            truncate_to: Some(2),
            max_new_tokens: 8,
            ..GenerationConfig::default()
        };
        let result = generate(&model, &vocab, "xyzax", 0, &cut).unwrap();
        assert_eq!(result.text, "xy");
        assert_eq!(result.stop_reason, StopReason::Truncated);
        assert_eq!(result.token_log_probs.len(), 2);
        let loose = GenerationConfig {
            truncate_to: Some(4),
            max_new_tokens: 8,
            ..GenerationConfig::default()
        };
        let untouched = generate(&model, &vocab, "xyzax", 0, &loose).unwrap();
        assert_eq!(untouched.text, "xyza");
        assert_eq!(untouched.stop_reason, StopReason::Eos);
    }

    #[test]
    fn zero_budget_returns_empty_result() {
        let vocab = test_vocab("abc", 1);
        let model = TransformerLM::<f32>::init(small_config(vocab.len(), 3)).unwrap();
        for strategy in [DecodeStrategy::Greedy, DecodeStrategy::Beam] {
            let config = GenerationConfig {
                strategy,
                max_new_tokens: 0,
                ..GenerationConfig::default()
            };
            let result = generate(&model, &vocab, "ab", 0, &config).unwrap();
            assert_eq!(result.ids, Vec::<usize>::new());
            assert_eq!(result.stop_reason, StopReason::MaxLen);
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let vocab = test_vocab("abcdef", 1);
        let model = TransformerLM::<f32>::init(small_config(vocab.len(), 13)).unwrap();
        let config = GenerationConfig {
            strategy: DecodeStrategy::Beam,
            beam_width: 3,
            max_new_tokens: 5,
            ..GenerationConfig::default()
        };
        let a = generate(&model, &vocab, "fade", 0, &config).unwrap();
        let b = generate(&model, &vocab, "fade", 0, &config).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.total_log_prob.to_bits(), b.total_log_prob.to_bits());
        for (x, y) in a.token_log_probs.iter().zip(&b.token_log_probs) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
