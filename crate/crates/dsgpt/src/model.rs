//! Decoder-only transformer language model: token + position embeddings,
//! pre-norm blocks of causal multi-head self-attention and a GELU MLP with
//! residual connections, final layer norm, and an output projection tied to
//! the token embedding by default.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive pre-softmax mask value. Far enough below any real logit that
/// exp underflows to exactly zero, making causality bit-exact.
const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("forward requires a nonempty sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f32,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, d_model 64, 4 heads.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 128,
            vocab_size,
            dropout_rate: 0.1,
            tie_embeddings: true,
            seed: 0,
        }
    }

    /// 12-layer preset with GPT-1 conventional width.
    pub fn dsgpt(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            max_seq_len: 512,
            vocab_size,
            dropout_rate: 0.1,
            tie_embeddings: true,
            seed: 0,
        }
    }

    /// 24-layer preset with BERT-large conventional width.
    pub fn dsgpt_large(vocab_size: usize) -> Self {
        Self {
            n_layers: 24,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            max_seq_len: 512,
            vocab_size,
            dropout_rate: 0.1,
            tie_embeddings: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers < 1 {
            return fail(format!("n_layers must be >= 1, got {}", self.n_layers));
        }
        if self.n_heads < 1 {
            return fail(format!("n_heads must be >= 1, got {}", self.n_heads));
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        if self.vocab_size < crate::tokenizer::TASK_BASE {
            return fail(format!(
                "vocab_size {} below the reserved special-token range",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            ));
        }
        Ok(())
    }

    /// True when both configs lay out identical parameter tensors. The
    /// init seed and the dropout rate are run settings, not properties of
    /// the stored weights, so they do not participate.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.d_model == other.d_model
            && self.d_ff == other.d_ff
            && self.max_seq_len == other.max_seq_len
            && self.vocab_size == other.vocab_size
            && self.tie_embeddings == other.tie_embeddings
    }

    /// Closed-form parameter count for this config.
    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let per_block = 4 * (d * d + d)      // q/k/v/out projections with biases
            + 2 * d * self.d_ff + self.d_ff + d // two MLP mats with biases
            + 4 * d; // two layer norms
        let mut total = self.vocab_size * d   // token embedding
            + self.max_seq_len * d            // position embedding
            + self.n_layers * per_block
            + 2 * d; // final layer norm
        if !self.tie_embeddings {
            total += self.vocab_size * d; // separate output projection
        }
        total
    }
}

#[derive(Debug, Clone)]
struct Block<E: Scalar> {
    ln1_gain: Tensor<E>,
    ln1_bias: Tensor<E>,
    w_q: Tensor<E>,
    b_q: Tensor<E>,
    w_k: Tensor<E>,
    b_k: Tensor<E>,
    w_v: Tensor<E>,
    b_v: Tensor<E>,
    w_o: Tensor<E>,
    b_o: Tensor<E>,
    ln2_gain: Tensor<E>,
    ln2_bias: Tensor<E>,
    w_fc1: Tensor<E>,
    b_fc1: Tensor<E>,
    w_fc2: Tensor<E>,
    b_fc2: Tensor<E>,
}

/// Tape handles for one block's parameters, in declaration order.
struct BlockVars {
    ln1_gain: Var,
    ln1_bias: Var,
    w_q: Var,
    b_q: Var,
    w_k: Var,
    b_k: Var,
    w_v: Var,
    b_v: Var,
    w_o: Var,
    b_o: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_fc1: Var,
    b_fc1: Var,
    w_fc2: Var,
    b_fc2: Var,
}

/// Tape handles for every parameter of a bound model. `ordered` lists them
/// in the same order `visit_params` yields, for gradient harvesting.
pub struct LmVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    lnf_gain: Var,
    lnf_bias: Var,
    lm_head: Option<Var>,
    pub ordered: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct TransformerLM<E: Scalar> {
    config: ModelConfig,
    tok_emb: Tensor<E>,
    pos_emb: Tensor<E>,
    blocks: Vec<Block<E>>,
    lnf_gain: Tensor<E>,
    lnf_bias: Tensor<E>,
    lm_head: Option<Tensor<E>>,
}

/// One draw from a standard normal via Box-Muller, using two uniforms so
/// the stream layout is fixed and platform-independent.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_tensor<E: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel)
        .map(|_| E::from_f64(normal_sample(rng) * INIT_STD))
        .collect();
    Tensor::new(shape, data)
        .expect("shape/data length match by construction")
        .with_requires_grad(true)
}

fn zeros_tensor<E: Scalar>(shape: Vec<usize>) -> Tensor<E> {
    Tensor::zeros(shape).with_requires_grad(true)
}

fn ones_tensor<E: Scalar>(shape: Vec<usize>) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, vec![E::one(); numel])
        .expect("shape/data length match by construction")
        .with_requires_grad(true)
}

impl<E: Scalar> TransformerLM<E> {
    /// Deterministically initializes all parameters from `config.seed`:
    /// weights normal(0, 0.02), biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, dff) = (config.vocab_size, config.d_model, config.d_ff);
        let tok_emb = normal_tensor(vec![v, d], &mut rng);
        let pos_emb = normal_tensor(vec![config.max_seq_len, d], &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: ones_tensor(vec![d]),
                ln1_bias: zeros_tensor(vec![d]),
                w_q: normal_tensor(vec![d, d], &mut rng),
                b_q: zeros_tensor(vec![d]),
                w_k: normal_tensor(vec![d, d], &mut rng),
                b_k: zeros_tensor(vec![d]),
                w_v: normal_tensor(vec![d, d], &mut rng),
                b_v: zeros_tensor(vec![d]),
                w_o: normal_tensor(vec![d, d], &mut rng),
                b_o: zeros_tensor(vec![d]),
                ln2_gain: ones_tensor(vec![d]),
                ln2_bias: zeros_tensor(vec![d]),
                w_fc1: normal_tensor(vec![d, dff], &mut rng),
                b_fc1: zeros_tensor(vec![dff]),
                w_fc2: normal_tensor(vec![dff, d], &mut rng),
                b_fc2: zeros_tensor(vec![d]),
            })
            .collect();
        let lnf_gain = ones_tensor(vec![d]);
        let lnf_bias = zeros_tensor(vec![d]);
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(normal_tensor(vec![d, v], &mut rng))
        };
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Sets the dropout rate applied by forward passes that supply an RNG.
    /// The rest of the config, weights included, is untouched.
    pub fn set_dropout_rate(&mut self, rate: f32) -> Result<(), ModelError> {
        let candidate = ModelConfig {
            dropout_rate: rate,
            ..self.config.clone()
        };
        candidate.validate()?;
        self.config = candidate;
        Ok(())
    }

    /// Visits every parameter with its stable name, in checkpoint order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<E>)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in Self::block_fields(b) {
                f(&format!("block{i}.{field}"), t);
            }
        }
        f("ln_f_gain", &self.lnf_gain);
        f("ln_f_bias", &self.lnf_bias);
        if let Some(head) = &self.lm_head {
            f("lm_head", head);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<E>)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.ln1_gain"), &mut b.ln1_gain);
            f(&format!("block{i}.ln1_bias"), &mut b.ln1_bias);
            f(&format!("block{i}.w_q"), &mut b.w_q);
            f(&format!("block{i}.b_q"), &mut b.b_q);
            f(&format!("block{i}.w_k"), &mut b.w_k);
            f(&format!("block{i}.b_k"), &mut b.b_k);
            f(&format!("block{i}.w_v"), &mut b.w_v);
            f(&format!("block{i}.b_v"), &mut b.b_v);
            f(&format!("block{i}.w_o"), &mut b.w_o);
            f(&format!("block{i}.b_o"), &mut b.b_o);
            f(&format!("block{i}.ln2_gain"), &mut b.ln2_gain);
            f(&format!("block{i}.ln2_bias"), &mut b.ln2_bias);
            f(&format!("block{i}.w_fc1"), &mut b.w_fc1);
            f(&format!("block{i}.b_fc1"), &mut b.b_fc1);
            f(&format!("block{i}.w_fc2"), &mut b.w_fc2);
            f(&format!("block{i}.b_fc2"), &mut b.b_fc2);
        }
        f("ln_f_gain", &mut self.lnf_gain);
        f("ln_f_bias", &mut self.lnf_bias);
        if let Some(head) = &mut self.lm_head {
            f("lm_head", head);
        }
    }

    fn block_fields<'a>(b: &'a Block<E>) -> [(&'static str, &'a Tensor<E>); 16] {
        [
            ("ln1_gain", &b.ln1_gain),
            ("ln1_bias", &b.ln1_bias),
            ("w_q", &b.w_q),
            ("b_q", &b.b_q),
            ("w_k", &b.w_k),
            ("b_k", &b.b_k),
            ("w_v", &b.w_v),
            ("b_v", &b.b_v),
            ("w_o", &b.w_o),
            ("b_o", &b.b_o),
            ("ln2_gain", &b.ln2_gain),
            ("ln2_bias", &b.ln2_bias),
            ("w_fc1", &b.w_fc1),
            ("b_fc1", &b.b_fc1),
            ("w_fc2", &b.w_fc2),
            ("b_fc2", &b.b_fc2),
        ]
    }

    /// Actual parameter count of the materialized tensors.
    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(|_, t| total += t.numel());
        total
    }

    /// Copies every parameter onto `tape` as a gradient-requesting leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> Result<LmVars, ModelError> {
        let mut leaf = |t: &Tensor<E>| -> Result<Var, TensorError> {
            let mut copy = t.clone();
            copy.clear_grad();
            tape.leaf(copy)
        };
        let tok_emb = leaf(&self.tok_emb)?;
        let pos_emb = leaf(&self.pos_emb)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockVars {
                ln1_gain: leaf(&b.ln1_gain)?,
                ln1_bias: leaf(&b.ln1_bias)?,
                w_q: leaf(&b.w_q)?,
                b_q: leaf(&b.b_q)?,
                w_k: leaf(&b.w_k)?,
                b_k: leaf(&b.b_k)?,
                w_v: leaf(&b.w_v)?,
                b_v: leaf(&b.b_v)?,
                w_o: leaf(&b.w_o)?,
                b_o: leaf(&b.b_o)?,
                ln2_gain: leaf(&b.ln2_gain)?,
                ln2_bias: leaf(&b.ln2_bias)?,
                w_fc1: leaf(&b.w_fc1)?,
                b_fc1: leaf(&b.b_fc1)?,
                w_fc2: leaf(&b.w_fc2)?,
                b_fc2: leaf(&b.b_fc2)?,
            });
        }
        let lnf_gain = leaf(&self.lnf_gain)?;
        let lnf_bias = leaf(&self.lnf_bias)?;
        let lm_head = match &self.lm_head {
            Some(head) => Some(leaf(head)?),
            None => None,
        };
        let mut ordered = vec![tok_emb, pos_emb];
        for b in &blocks {
            ordered.extend([
                b.ln1_gain, b.ln1_bias, b.w_q, b.b_q, b.w_k, b.b_k, b.w_v, b.b_v, b.w_o,
                b.b_o, b.ln2_gain, b.ln2_bias, b.w_fc1, b.b_fc1, b.w_fc2, b.b_fc2,
            ]);
        }
        ordered.extend([lnf_gain, lnf_bias]);
        if let Some(head) = lm_head {
            ordered.push(head);
        }
        Ok(LmVars {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
            lm_head,
            ordered,
        })
    }

    /// Runs the network on a bound tape and returns the [T, V] logit node.
    /// Dropout fires only when an RNG is supplied and the rate is nonzero.
    pub fn forward_bound<R: Rng>(
        &self,
        tape: &mut Tape<E>,
        vars: &LmVars,
        ids: &[usize],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var, ModelError> {
        let t = ids.len();
        if t == 0 {
            return Err(ModelError::EmptySequence);
        }
        if t > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        let rate = self.config.dropout_rate;
        let mut drop = |tape: &mut Tape<E>, x: Var| -> Result<Var, TensorError> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
                _ => Ok(x),
            }
        };

        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.gather_rows(vars.tok_emb, ids)?;
        let pos = tape.gather_rows(vars.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = drop(tape, x)?;

        let n_heads = self.config.n_heads;
        let d_head = self.config.d_model / n_heads;
        let mask = tape.leaf(causal_mask(t))?;
        let attn_scale = E::from_f64(1.0 / (d_head as f64).sqrt());
        let eps = E::from_f64(LAYER_NORM_EPS);

        for b in &vars.blocks {
            let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, eps)?;
            let q = tape.matmul(h, b.w_q)?;
            let q = tape.add_bias(q, b.b_q)?;
            let k = tape.matmul(h, b.w_k)?;
            let k = tape.add_bias(k, b.b_k)?;
            let v = tape.matmul(h, b.w_v)?;
            let v = tape.add_bias(v, b.b_v)?;
            let mut heads = Vec::with_capacity(n_heads);
            for i in 0..n_heads {
                let qh = tape.slice_cols(q, i * d_head, d_head)?;
                let kh = tape.slice_cols(k, i * d_head, d_head)?;
                let vh = tape.slice_cols(v, i * d_head, d_head)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, attn_scale)?;
                let masked = tape.add(scores, mask)?;
                let probs = tape.softmax_last(masked)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let proj = tape.matmul(merged, b.w_o)?;
            let proj = tape.add_bias(proj, b.b_o)?;
            let proj = drop(tape, proj)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, eps)?;
            let f1 = tape.matmul(h2, b.w_fc1)?;
            let f1 = tape.add_bias(f1, b.b_fc1)?;
            let act = tape.gelu(f1)?;
            let f2 = tape.matmul(act, b.w_fc2)?;
            let f2 = tape.add_bias(f2, b.b_fc2)?;
            let f2 = drop(tape, f2)?;
            x = tape.add(x, f2)?;
        }

        let x = tape.layer_norm(x, vars.lnf_gain, vars.lnf_bias, eps)?;
        let logits = match vars.lm_head {
            Some(head) => tape.matmul(x, head)?,
            None => {
                let head = tape.transpose(vars.tok_emb)?;
                tape.matmul(x, head)?
            }
        };
        Ok(logits)
    }

    /// Convenience forward pass on a private tape, returning [T, V] logits.
    /// In train mode, dropout draws from a stream seeded by the model seed;
    /// training loops that need step-varying dropout use [`forward_bound`].
    pub fn forward(&self, ids: &[usize], train_mode: bool) -> Result<Tensor<E>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let rng_opt = train_mode.then_some(&mut rng);
        let logits = self.forward_bound(&mut tape, &vars, ids, rng_opt)?;
        Ok(tape.value(logits).clone())
    }

    /// Accumulates the bound leaves' gradients into the model tensors'
    /// gradient buffers after a backward pass on `tape`.
    pub fn harvest_grads(&mut self, tape: &Tape<E>, vars: &LmVars) {
        let mut idx = 0;
        self.visit_params_mut(|_, t| {
            if let Some(grad) = tape.grad(vars.ordered[idx]) {
                t.accumulate_grad(grad);
            }
            idx += 1;
        });
    }
}

/// [T, T] additive causal mask: 0 where key <= query position, -1e9 above
/// the diagonal.
fn causal_mask<E: Scalar>(t: usize) -> Tensor<E> {
    let mut data = vec![E::zero(); t * t];
    let masked = E::from_f64(MASK_VALUE);
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = masked;
        }
    }
    Tensor::new(vec![t, t], data).expect("shape/data length match by construction")
}
