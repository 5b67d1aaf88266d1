//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward op records a node holding its output tensor plus whatever
//! it needs for the backward rule. `backward` walks the nodes in reverse,
//! accumulating gradients into each node's tensor. A tape supports exactly
//! one backward pass; recording after backward is an error.

use rand::Rng;

use crate::tensor::{Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_COEF: f64 = 0.044715;
// sqrt(2/pi) for the tanh-based GELU approximation.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

enum Op<E: Scalar> {
    Leaf,
    /// c = a · b for 2-D operands.
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    /// y[r][c] = x[r][c] + bias[c].
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: E },
    Gelu { x: Var },
    /// Softmax over the last axis; output saved on the node for backward.
    SoftmaxLast { x: Var },
    /// Per-row normalization over the last axis followed by gain/bias affine.
    /// `normed` is (x - mean)/std per row, `inv_std` one entry per row.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<E>,
        inv_std: Vec<E>,
    },
    /// out[i] = table[ids[i]]; backward scatter-adds rows.
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, width: usize },
    ConcatCols { parts: Vec<Var> },
    /// Inverted dropout; `mask` entries are 0 or 1/(1-rate).
    Dropout { x: Var, mask: Vec<E> },
    Sum { x: Var },
    /// Mean negative log-likelihood over unmasked positions.
    /// `probs` holds the softmax rows for backward.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<E>,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Single-use computation tape. See module docs.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[E]> {
        self.nodes[var.0].value.grad()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        debug_assert!(value.all_finite(), "op produced non-finite values");
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Set `requires_grad` on the tensor to have
    /// backward populate (and guarantee) its gradient buffer.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Result<Var, TensorError> {
        self.push(tensor, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape2(a, "matmul")?, self.shape2(b, "matmul")?);
        if ash.1 != bsh.0 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![ash.0, ash.1],
                rhs: vec![bsh.0, bsh.1],
            });
        }
        let (m, k, n) = (ash.0, ash.1, bsh.1);
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape2(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "add")?;
        let out: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape2(x, "add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let xs = self.data(x);
        let bs = self.data(bias);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xs[i * c + j] + bs[j]);
            }
        }
        self.push(Tensor::new(vec![r, c], out)?, Op::AddBias { x, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_same_shape(a, b, "mul")?;
        let out: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Result<Var, TensorError> {
        let out: Vec<E> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out: Vec<E> = self
            .data(x)
            .iter()
            .map(|&v| E::from_f64(gelu_forward(v.to_f64())))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu { x })
    }

    /// Softmax along the last axis, stabilized by per-row max subtraction.
    /// Entries at least ~1e9 below the row max underflow to exactly zero.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let width = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "softmax",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let src = self.data(x);
        let mut out = vec![E::zero(); src.len()];
        for (row_in, row_out) in src.chunks(width).zip(out.chunks_mut(width)) {
            softmax_row(row_in, row_out);
        }
        self.push(Tensor::new(shape, out)?, Op::SoftmaxLast { x })
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: E,
    ) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0
            || self.value(gain).shape() != [width]
            || self.value(bias).shape() != [width]
        {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let rows = self.value(x).numel() / width;
        let xs = self.data(x);
        let gs = self.data(gain);
        let bs = self.data(bias);
        let mut out = vec![E::zero(); xs.len()];
        let mut normed = vec![E::zero(); xs.len()];
        let mut inv_std = vec![E::zero(); rows];
        let denom = E::from_f64(width as f64);
        for i in 0..rows {
            let row = &xs[i * width..(i + 1) * width];
            let mean = row.iter().fold(E::zero(), |s, &v| s + v) / denom;
            let var = row
                .iter()
                .fold(E::zero(), |s, &v| s + (v - mean) * (v - mean))
                / denom;
            let istd = (var + eps).sqrt().recip();
            inv_std[i] = istd;
            for j in 0..width {
                let n = (row[j] - mean) * istd;
                normed[i * width + j] = n;
                out[i * width + j] = n * gs[j] + bs[j];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, width) = self.shape2(table, "gather_rows")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        self.push(
            Tensor::new(vec![ids.len(), width], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape2(x, "slice_cols")?;
        if start + width > c {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + width,
                bound: c,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        self.push(
            Tensor::new(vec![r, width], out)?,
            Op::SliceCols { x, start, width },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.shape2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.data(p);
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate) so the
    /// expected value is unchanged. Rate 0 records a plain identity and
    /// draws nothing from the generator.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f32, rng: &mut R) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        let mask: Vec<E> = if rate == 0.0 {
            vec![E::one(); n]
        } else {
            let keep = 1.0 / (1.0 - rate as f64);
            (0..n)
                .map(|_| {
                    if rng.gen::<f32>() < rate {
                        E::zero()
                    } else {
                        E::from_f64(keep)
                    }
                })
                .collect()
        };
        let out: Vec<E> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.data(x).iter().fold(E::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, averaged over positions where `mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (rows, vocab) = self.shape2(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let n_unmasked = mask.iter().filter(|&&m| m).count();
        if n_unmasked == 0 {
            return Err(TensorError::AllMasked);
        }
        let src = self.data(logits);
        let mut probs = vec![E::zero(); src.len()];
        let mut total = 0.0f64;
        for t in 0..rows {
            if !mask[t] {
                continue;
            }
            if targets[t] >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    id: targets[t],
                    vocab,
                });
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            softmax_row(row, &mut probs[t * vocab..(t + 1) * vocab]);
            total -= probs[t * vocab + targets[t]].to_f64().max(f64::MIN_POSITIVE).ln();
        }
        let loss = E::from_f64(total / n_unmasked as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Backpropagates from `loss` with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.backward_with_seed(loss, E::one())
    }

    /// Backpropagates from `loss` with an arbitrary seed gradient, so a
    /// caller accumulating a weighted batch objective can fold the weight in.
    pub fn backward_with_seed(&mut self, loss: Var, seed: E) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.consumed = true;
        self.nodes[loss.0].value.accumulate_grad(&[seed]);
        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].value.grad().is_none() {
                continue;
            }
            self.backprop_node(idx);
        }
        // Leaves marked requires_grad always end up with a buffer, even when
        // the loss did not depend on them.
        for node in &mut self.nodes {
            if node.value.requires_grad() && node.value.grad().is_none() {
                node.value.accumulate_grad(&vec![E::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        let upstream = self.nodes[idx].value.grad().unwrap().to_vec();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape2(a, "matmul").unwrap();
                let n = self.value(b).shape()[1];
                // dA = dC · Bᵀ
                let bt = transpose_data(self.data(b), k, n);
                let da = matmul_kernel(&upstream, &bt, m, n, k);
                // dB = Aᵀ · dC
                let at = transpose_data(self.data(a), m, k);
                let db = matmul_kernel(&at, &upstream, k, m, n);
                self.nodes[a.0].value.accumulate_grad(&da);
                self.nodes[b.0].value.accumulate_grad(&db);
            }
            Op::Transpose { x } => {
                let x = *x;
                let (r, c) = self.shape2(x, "transpose").unwrap();
                let dx = transpose_data(&upstream, c, r);
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.nodes[a.0].value.accumulate_grad(&upstream);
                self.nodes[b.0].value.accumulate_grad(&upstream);
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let width = self.value(bias).numel();
                let mut db = vec![E::zero(); width];
                for (i, &g) in upstream.iter().enumerate() {
                    db[i % width] = db[i % width] + g;
                }
                self.nodes[x.0].value.accumulate_grad(&upstream);
                self.nodes[bias.0].value.accumulate_grad(&db);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<E> = upstream
                    .iter()
                    .zip(self.data(b))
                    .map(|(&g, &v)| g * v)
                    .collect();
                let db: Vec<E> = upstream
                    .iter()
                    .zip(self.data(a))
                    .map(|(&g, &v)| g * v)
                    .collect();
                self.nodes[a.0].value.accumulate_grad(&da);
                self.nodes[b.0].value.accumulate_grad(&db);
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                let dx: Vec<E> = upstream.iter().map(|&g| g * factor).collect();
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<E> = upstream
                    .iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| g * E::from_f64(gelu_derivative(v.to_f64())))
                    .collect();
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::SoftmaxLast { x } => {
                let x = *x;
                let width = *self.nodes[idx].value.shape().last().unwrap();
                let y = self.nodes[idx].value.data();
                let mut dx = vec![E::zero(); y.len()];
                for r in 0..y.len() / width {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &upstream[r * width..(r + 1) * width];
                    let dot = ys
                        .iter()
                        .zip(gs)
                        .fold(E::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for j in 0..width {
                        dx[r * width + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let width = self.value(gain).numel();
                let rows = normed.len() / width;
                let gs = self.data(gain).to_vec();
                let normed = normed.clone();
                let inv_std = inv_std.clone();
                let mut dx = vec![E::zero(); normed.len()];
                let mut dgain = vec![E::zero(); width];
                let mut dbias = vec![E::zero(); width];
                let denom = E::from_f64(width as f64);
                for r in 0..rows {
                    let base = r * width;
                    let mut sum_dn = E::zero();
                    let mut sum_dn_n = E::zero();
                    for j in 0..width {
                        let g = upstream[base + j];
                        let n = normed[base + j];
                        dgain[j] = dgain[j] + g * n;
                        dbias[j] = dbias[j] + g;
                        let dn = g * gs[j];
                        sum_dn = sum_dn + dn;
                        sum_dn_n = sum_dn_n + dn * n;
                    }
                    for j in 0..width {
                        let dn = upstream[base + j] * gs[j];
                        dx[base + j] = inv_std[r]
                            * (dn - sum_dn / denom - normed[base + j] * sum_dn_n / denom);
                    }
                }
                self.nodes[x.0].value.accumulate_grad(&dx);
                self.nodes[gain.0].value.accumulate_grad(&dgain);
                self.nodes[bias.0].value.accumulate_grad(&dbias);
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let width = self.value(table).shape()[1];
                let mut dt = vec![E::zero(); self.value(table).numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..width {
                        dt[id * width + j] = dt[id * width + j] + upstream[i * width + j];
                    }
                }
                self.nodes[table.0].value.accumulate_grad(&dt);
            }
            Op::SliceCols { x, start, width } => {
                let (x, start, width) = (*x, *start, *width);
                let (r, c) = self.shape2(x, "slice_cols").unwrap();
                let mut dx = vec![E::zero(); r * c];
                for i in 0..r {
                    for j in 0..width {
                        dx[i * c + start + j] = upstream[i * width + j];
                    }
                }
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = self.value(parts[0]).shape()[0];
                let total: usize = parts
                    .iter()
                    .map(|&p| self.value(p).shape()[1])
                    .sum();
                let mut offset = 0;
                for &p in &parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = vec![E::zero(); rows * w];
                    for i in 0..rows {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&upstream[i * total + offset..i * total + offset + w]);
                    }
                    self.nodes[p.0].value.accumulate_grad(&dp);
                    offset += w;
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<E> = upstream
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let dx = vec![upstream[0]; self.value(x).numel()];
                self.nodes[x.0].value.accumulate_grad(&dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let logits = *logits;
                let vocab = self.value(logits).shape()[1];
                let n_unmasked = mask.iter().filter(|&&m| m).count();
                let scale = upstream[0] / E::from_f64(n_unmasked as f64);
                let mut dl = vec![E::zero(); probs.len()];
                for t in 0..mask.len() {
                    if !mask[t] {
                        continue;
                    }
                    for j in 0..vocab {
                        let indicator = if j == targets[t] { E::one() } else { E::zero() };
                        dl[t * vocab + j] = (probs[t * vocab + j] - indicator) * scale;
                    }
                }
                self.nodes[logits.0].value.accumulate_grad(&dl);
            }
        }
    }

    fn data(&self, var: Var) -> &[E] {
        self.nodes[var.0].value.data()
    }

    fn shape2(&self, var: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let shape = self.nodes[var.0].value.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Stabilized softmax of one row into `out`. Entries far enough below the
/// row max underflow to exactly 0 after exp, which is what makes additive
/// -1e9 masking produce bit-exact zeros downstream.
fn softmax_row<E: Scalar>(row: &[E], out: &mut [E]) {
    let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn transpose_data<E: Scalar>(src: &[E], r: usize, c: usize) -> Vec<E> {
    let mut out = vec![E::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// a[m×k] · b[k×n]. Exact-zero lhs entries skip the whole row update:
/// numerically a no-op, but it guarantees that fully masked attention
/// weights leave the accumulator bits untouched.
fn matmul_kernel<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == E::zero() {
                continue;
            }
            let brow = &b[j * n..(j + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aij * bv;
            }
        }
    }
    out
}
