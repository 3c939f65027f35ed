//! Vanilla and relation-aware transformer encoder blocks and the layer stack.
//!
//! A block is one self-attention layer plus one two-layer MLP, each wrapped in
//! a skip connection. With layer norm enabled the block follows the post-norm
//! arrangement (normalize after each skip); with it disabled the block is pure
//! residual, which is the regime the scaled initialization schemes target.
//! Each block therefore contributes two layers to the stack: an encoder with
//! `n_blocks = N` has `L = 2N` layers.
//!
//! Relational attention offsets every key by a learned relation embedding
//! selected by the token-pair label, and every value likewise. The embedding
//! tables are shared across heads and across layers (one pair per model).

use std::sync::Arc;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::init::xavier_init;
use crate::tensor::{Gradients, RelationLabels, Tape, Tensor};

/// Architecture hyperparameters for an encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Number of transformer blocks N; the stack has 2N layers.
    pub n_blocks: usize,
    /// Model width d_x.
    pub d_x: usize,
    /// Per-head projection width d_z.
    pub d_z: usize,
    /// Attention head count.
    pub n_heads: usize,
    /// Inner width of the per-token MLP.
    pub mlp_hidden: usize,
    /// Relation-aware attention (keys/values offset by relation embeddings).
    pub relational: bool,
    /// Post-norm layer normalization after each skip.
    pub use_layer_norm: bool,
    /// Relation vocabulary size (0 unless relational).
    pub n_relations: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 {
            return Err(CoreError::Config("n_blocks must be >= 1".into()));
        }
        if self.d_x < 1 || self.d_z < 1 || self.mlp_hidden < 1 || self.n_heads < 1 {
            return Err(CoreError::Config(
                "d_x, d_z, mlp_hidden and n_heads must be >= 1".into(),
            ));
        }
        if self.relational && self.n_relations < 1 {
            return Err(CoreError::Config(
                "relational encoders need n_relations >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Layer count L = 2N.
    pub fn layer_count(&self) -> usize {
        2 * self.n_blocks
    }
}

/// Per-head projection matrices, each `d_x x d_z`.
#[derive(Debug, Clone)]
pub struct AttentionHeadParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn identity(width: usize) -> Self {
        Self {
            gain: Tensor::vector(vec![1.0; width]).expect("width >= 1"),
            bias: Tensor::vector(vec![0.0; width]).expect("width >= 1"),
        }
    }
}

/// Parameters of one block: attention heads, the combined output projection
/// mapping concatenated head outputs `(H*d_z) -> d_x`, the MLP weights, and
/// optional post-norm parameters.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub heads: Vec<AttentionHeadParams>,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
    pub mlp_hidden_weight: Tensor,
    pub mlp_hidden_bias: Tensor,
    pub mlp_out_weight: Tensor,
    pub mlp_out_bias: Tensor,
    pub attn_norm: Option<LayerNormParams>,
    pub mlp_norm: Option<LayerNormParams>,
}

impl BlockParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.push(&h.query);
            out.push(&h.key);
            out.push(&h.value);
        }
        out.push(&self.out_proj);
        out.push(&self.out_bias);
        out.push(&self.mlp_hidden_weight);
        out.push(&self.mlp_hidden_bias);
        out.push(&self.mlp_out_weight);
        out.push(&self.mlp_out_bias);
        for ln in [&self.attn_norm, &self.mlp_norm].into_iter().flatten() {
            out.push(&ln.gain);
            out.push(&ln.bias);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for h in &mut self.heads {
            out.push(&mut h.query);
            out.push(&mut h.key);
            out.push(&mut h.value);
        }
        out.push(&mut self.out_proj);
        out.push(&mut self.out_bias);
        out.push(&mut self.mlp_hidden_weight);
        out.push(&mut self.mlp_hidden_bias);
        out.push(&mut self.mlp_out_weight);
        out.push(&mut self.mlp_out_bias);
        for ln in [&mut self.attn_norm, &mut self.mlp_norm]
            .into_iter()
            .flatten()
        {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out
    }

    /// The weight matrices of this block, without biases or norm parameters.
    /// These are the blocks whose gradients the stability analysis bounds.
    pub fn weight_matrices(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.push(&h.query);
            out.push(&h.key);
            out.push(&h.value);
        }
        out.push(&self.out_proj);
        out.push(&self.mlp_hidden_weight);
        out.push(&self.mlp_out_weight);
        out
    }

    fn weight_matrices_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for h in &mut self.heads {
            out.push(&mut h.query);
            out.push(&mut h.key);
            out.push(&mut h.value);
        }
        out.push(&mut self.out_proj);
        out.push(&mut self.mlp_hidden_weight);
        out.push(&mut self.mlp_out_weight);
        out
    }

    /// Squared Frobenius norm of the composite value map (all heads).
    pub fn value_norm_sq(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| h.value.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Per-pair relation labels plus the shared relation embedding tables
/// (`n_relations x d_z` each). Labels may be asymmetric; directed relations
/// are allowed.
#[derive(Debug, Clone)]
pub struct RelationMap {
    pub labels: Arc<RelationLabels>,
    pub key_table: Tensor,
    pub value_table: Tensor,
}

impl RelationMap {
    /// Largest row norm of the value table; the per-pair value offset the
    /// stability conditions bound.
    pub fn value_row_norm(&self) -> f64 {
        self.value_table.max_row_norm()
    }
}

/// Frobenius and max-token norms of a hidden state after one layer, plus the
/// worst softmax row-sum deviation observed inside attention layers.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub frobenius_norm: f64,
    pub max_token_norm: f64,
    pub max_rowsum_deviation: Option<f64>,
}

impl LayerTrace {
    fn of(t: &Tensor, rowsum: Option<f64>) -> Self {
        Self {
            frobenius_norm: t.frobenius_norm(),
            max_token_norm: t.max_row_norm(),
            max_rowsum_deviation: rowsum,
        }
    }
}

/// An encoder stack: configuration, per-block parameters and, when
/// relational, the shared relation map.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<BlockParams>,
    pub relations: Option<RelationMap>,
    scaled: bool,
}

impl Encoder {
    /// Builds an encoder with Xavier-initialized weight matrices, zero biases
    /// and identity layer-norm parameters (when enabled). Deterministic for a
    /// fixed RNG seed: draws happen in block order, then the relation tables.
    pub fn xavier(
        config: EncoderConfig,
        labels: Option<Arc<RelationLabels>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.relational != labels.is_some() {
            return Err(CoreError::Config(
                "relation labels must be provided exactly when the encoder is relational".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let heads = (0..config.n_heads)
                .map(|_| {
                    Ok(AttentionHeadParams {
                        query: xavier_init(config.d_x, config.d_z, rng)?,
                        key: xavier_init(config.d_x, config.d_z, rng)?,
                        value: xavier_init(config.d_x, config.d_z, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = |on: bool| on.then(|| LayerNormParams::identity(config.d_x));
            blocks.push(BlockParams {
                heads,
                out_proj: xavier_init(config.n_heads * config.d_z, config.d_x, rng)?,
                out_bias: Tensor::vector(vec![0.0; config.d_x])?,
                mlp_hidden_weight: xavier_init(config.d_x, config.mlp_hidden, rng)?,
                mlp_hidden_bias: Tensor::vector(vec![0.0; config.mlp_hidden])?,
                mlp_out_weight: xavier_init(config.mlp_hidden, config.d_x, rng)?,
                mlp_out_bias: Tensor::vector(vec![0.0; config.d_x])?,
                attn_norm: norm(config.use_layer_norm),
                mlp_norm: norm(config.use_layer_norm),
            });
        }
        let relations = labels
            .map(|labels| {
                if labels.max_label() >= config.n_relations {
                    return Err(CoreError::LabelOutOfRange {
                        label: labels.max_label(),
                        n_relations: config.n_relations,
                    });
                }
                Ok(RelationMap {
                    labels,
                    key_table: xavier_init(config.n_relations, config.d_z, rng)?,
                    value_table: xavier_init(config.n_relations, config.d_z, rng)?,
                })
            })
            .transpose()?;
        Ok(Self {
            config,
            blocks,
            relations,
            scaled: false,
        })
    }

    /// Whether an initialization scheme has been applied.
    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    /// One-shot guard: a second application would rescale already-scaled
    /// weights, so it is refused.
    pub fn mark_scaled(&mut self) -> Result<()> {
        if self.scaled {
            return Err(CoreError::AlreadyScaled);
        }
        self.scaled = true;
        Ok(())
    }

    /// All trainable tensors in a fixed order (block parameters, then the
    /// relation tables).
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        if let Some(rel) = &self.relations {
            out.push(&rel.key_table);
            out.push(&rel.value_table);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        if let Some(rel) = &mut self.relations {
            out.push(&mut rel.key_table);
            out.push(&mut rel.value_table);
        }
        out
    }

    /// Weight matrices and relation tables only (no biases, no norm
    /// parameters): the blocks entering the squared-Jacobian accumulation.
    pub fn weight_parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .blocks
            .iter()
            .flat_map(|b| b.weight_matrices())
            .collect();
        if let Some(rel) = &self.relations {
            out.push(&rel.key_table);
            out.push(&rel.value_table);
        }
        out
    }

    pub fn weight_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.weight_matrices_mut());
        }
        if let Some(rel) = &mut self.relations {
            out.push(&mut rel.key_table);
            out.push(&mut rel.value_table);
        }
        out
    }

    /// Registers every parameter as a leaf on `tape` and returns the bound
    /// copy whose tensors carry tape handles (so gradients can be looked up
    /// per parameter after a backward pass).
    pub fn bind(&self, tape: &mut Tape) -> Encoder {
        let mut bound = self.clone();
        for p in bound.parameters_mut() {
            *p = tape.leaf(p);
        }
        bound
    }

    /// Runs the stack. See [`encoder_forward`].
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<(Tensor, Vec<LayerTrace>)> {
        encoder_forward(tape, x, &self.blocks, self.relations.as_ref())
    }
}

fn descend(
    params: &mut [&mut Tensor],
    handles: &[&Tensor],
    grads: &Gradients,
    eta: f64,
) -> Result<()> {
    if handles.len() != params.len() {
        return Err(CoreError::Usage(
            "bound encoder does not match the model being updated".into(),
        ));
    }
    for (param, handle) in params.iter_mut().zip(handles) {
        let g = grads
            .get(handle)
            .ok_or_else(|| CoreError::Usage("gradient missing for a bound parameter".into()))?;
        let mut data = param.data().to_vec();
        for (d, gv) in data.iter_mut().zip(g) {
            *d -= eta * gv;
        }
        **param = Tensor::new(param.shape().to_vec(), data)?;
    }
    Ok(())
}

/// Descends `eta` times the recorded gradients over every trainable tensor:
/// `theta <- theta - eta * g`. `bound` must be the tape-bound copy of `model`
/// that produced `grads`.
pub fn apply_sgd_step(
    model: &mut Encoder,
    bound: &Encoder,
    grads: &Gradients,
    eta: f64,
) -> Result<()> {
    descend(&mut model.parameters_mut(), &bound.parameters(), grads, eta)
}

/// Descends only the weight matrices and relation tables, the parameter set
/// the stability theory scales. Biases feed the output through every skip
/// connection with an order-one Jacobian regardless of scheme, so a probe
/// that moved them would measure depth rather than the initialization.
pub fn apply_sgd_step_weights(
    model: &mut Encoder,
    bound: &Encoder,
    grads: &Gradients,
    eta: f64,
) -> Result<()> {
    descend(
        &mut model.weight_parameters_mut(),
        &bound.weight_parameters(),
        grads,
        eta,
    )
}

fn max_rowsum_deviation(alpha: &Tensor) -> f64 {
    let n = alpha.cols();
    alpha
        .data()
        .chunks(n)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Multi-head self-attention shared by the vanilla and relational paths.
/// Returns the projected output (bias included, no skip, no norm) and the
/// worst softmax row-sum deviation across heads.
fn attention(
    tape: &mut Tape,
    x: &Tensor,
    params: &BlockParams,
    rel: Option<&RelationMap>,
) -> Result<(Tensor, f64)> {
    let d_x = params.heads[0].query.shape()[0];
    if x.rank() != 2 || x.shape()[1] != d_x {
        return Err(CoreError::ShapeMismatch {
            op: "attention",
            lhs: x.shape().to_vec(),
            rhs: params.heads[0].query.shape().to_vec(),
        });
    }
    if let Some(rel) = rel {
        if rel.labels.n() != x.shape()[0] {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                lhs: x.shape().to_vec(),
                rhs: vec![rel.labels.n(), rel.labels.n()],
            });
        }
    }
    let d_z = params.heads[0].query.shape()[1];
    let inv_temp = 1.0 / (d_z as f64).sqrt();

    let mut worst_rowsum = 0.0f64;
    let mut concat: Option<Tensor> = None;
    for head in &params.heads {
        let queries = tape.matmul(x, &head.query)?;
        let keys = tape.matmul(x, &head.key)?;
        let values = tape.matmul(x, &head.value)?;
        let keys_t = tape.transpose(&keys)?;
        let mut scores = tape.matmul(&queries, &keys_t)?;
        if let Some(rel) = rel {
            let offsets = tape.relation_scores(&queries, &rel.key_table, &rel.labels)?;
            scores = tape.add(&scores, &offsets)?;
        }
        let scores = tape.scale(&scores, inv_temp)?;
        let alpha = tape.softmax_rows(&scores)?;
        worst_rowsum = worst_rowsum.max(max_rowsum_deviation(&alpha));
        let mut head_out = tape.matmul(&alpha, &values)?;
        if let Some(rel) = rel {
            let offsets = tape.relation_values(&alpha, &rel.value_table, &rel.labels)?;
            head_out = tape.add(&head_out, &offsets)?;
        }
        concat = Some(match concat {
            None => head_out,
            Some(prev) => tape.concat_last(&prev, &head_out)?,
        });
    }
    let concat = concat.expect("n_heads >= 1");
    let projected = tape.matmul(&concat, &params.out_proj)?;
    let out = tape.add(&projected, &params.out_bias)?;
    Ok((out, worst_rowsum))
}

/// Content-only self-attention: scores are scaled query-key dot products,
/// values are attention-weighted value projections, heads are concatenated
/// and projected. Skip connection and layer norm belong to [`block_forward`].
pub fn attention_vanilla(tape: &mut Tape, x: &Tensor, params: &BlockParams) -> Result<Tensor> {
    attention(tape, x, params, None).map(|(out, _)| out)
}

/// Relation-aware self-attention: every key is offset by the relation-key
/// embedding of the token pair and every value by the relation-value
/// embedding, before the same softmax/mixing/projection as the vanilla path.
pub fn attention_relational(
    tape: &mut Tape,
    x: &Tensor,
    rel: &RelationMap,
    params: &BlockParams,
) -> Result<Tensor> {
    attention(tape, x, params, Some(rel)).map(|(out, _)| out)
}

fn block_forward_traced(
    tape: &mut Tape,
    x: &Tensor,
    params: &BlockParams,
    rel: Option<&RelationMap>,
) -> Result<(Tensor, [LayerTrace; 2])> {
    let (attn, rowsum_dev) = attention(tape, x, params, rel)?;
    let mid = tape.add(x, &attn)?;
    let mid = match &params.attn_norm {
        Some(ln) => tape.layer_norm(&mid, &ln.gain, &ln.bias)?,
        None => mid,
    };
    let attn_trace = LayerTrace::of(&mid, Some(rowsum_dev));

    let hidden = tape.matmul(&mid, &params.mlp_hidden_weight)?;
    let hidden = tape.add(&hidden, &params.mlp_hidden_bias)?;
    let hidden = tape.relu(&hidden)?;
    let inner = tape.matmul(&hidden, &params.mlp_out_weight)?;
    let inner = tape.add(&inner, &params.mlp_out_bias)?;
    let out = tape.add(&mid, &inner)?;
    let out = match &params.mlp_norm {
        Some(ln) => tape.layer_norm(&out, &ln.gain, &ln.bias)?,
        None => out,
    };
    let mlp_trace = LayerTrace::of(&out, None);
    Ok((out, [attn_trace, mlp_trace]))
}

/// One block: attention with skip (then norm, if configured), followed by the
/// MLP with skip (then norm). `rel` selects the relational attention path.
pub fn block_forward(
    tape: &mut Tape,
    x: &Tensor,
    params: &BlockParams,
    rel: Option<&RelationMap>,
) -> Result<Tensor> {
    block_forward_traced(tape, x, params, rel).map(|(out, _)| out)
}

/// Applies the blocks in order, recording the hidden-state norms after every
/// layer (two trace entries per block).
pub fn encoder_forward(
    tape: &mut Tape,
    x: &Tensor,
    stack: &[BlockParams],
    rel: Option<&RelationMap>,
) -> Result<(Tensor, Vec<LayerTrace>)> {
    let mut hidden = x.clone();
    let mut trace = Vec::with_capacity(2 * stack.len());
    for params in stack {
        let (next, block_trace) = block_forward_traced(tape, &hidden, params, rel)?;
        trace.extend(block_trace);
        hidden = next;
    }
    Ok((hidden, trace))
}
