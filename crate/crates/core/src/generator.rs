//! The autoregressive generator: causal decoder stack, LM head, sequence
//! likelihood, bounded generation and the attachable classifier head.

use serde::{Deserialize, Serialize};

use crate::nn::{
    block_forward, cls_logits, embed, impl_params, layer_norm, softmax2, BlockKind, ClsHead, ConfigError, EmbeddingTable,
    Initializer, LayerNormParams, ModelDims, Params, TransformerBlock,
};
use crate::parallel::ExecMode;
use crate::rng::{self, derive_seed, derive_seed_str, RngExt, SliceRandom};
use crate::tensor::{log_softmax, Optimizer, Tape, Tensor, TensorError, Var};
use crate::text::{TokenSeq, EOT};
use crate::train::{apply_step, batch_gradients, select_trainable};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub dims: ModelDims,
    pub embedding: EmbeddingTable,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
    pub lm_head: Tensor,
    pub cls_head: Option<ClsHead>,
}
impl_params!(GeneratorModel { embedding, blocks, ln_f, lm_head, cls_head });

/// Parameter groups by name prefix.
pub const BLOCK_GROUPS: [&str; 3] = ["embedding", "blocks", "ln_f"];

impl GeneratorModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self, ConfigError> {
        dims.validate()?;
        let mut init = Initializer::new(derive_seed_str(seed, "generator"));
        let embedding = EmbeddingTable::new(dims.vocab, dims.max_len, dims.d_model, &mut init);
        let blocks = (0..dims.layers)
            .map(|_| TransformerBlock::new(BlockKind::Decoder, dims.d_model, dims.heads, &mut init))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            dims,
            embedding,
            blocks,
            ln_f: LayerNormParams::new(dims.d_model, &mut init),
            lm_head: init.uniform(&[dims.d_model, dims.vocab]),
            cls_head: None,
        })
    }

    /// Adds a freshly initialized two-class head.
    pub fn attach_cls_head(&mut self, seed: u64) {
        let mut init = Initializer::new(derive_seed_str(seed, "generator.cls_head"));
        self.cls_head = Some(ClsHead::new(self.dims.d_model, &mut init));
    }

    fn head(&self) -> Result<&ClsHead, TensorError> {
        self.cls_head
            .as_ref()
            .ok_or_else(|| TensorError::Contract("generator has no classification head".into()))
    }

    /// Hash of the block parameters Θ (embeddings, decoder blocks, final
    /// norm), which warm-up and priori learning must not touch.
    pub fn blocks_hash(&self) -> [u8; 32] {
        struct View<'m>(&'m GeneratorModel);
        impl Params for View<'_> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                self.0.embedding.visit(&format!("{prefix}embedding"), f);
                self.0.blocks.visit(&format!("{prefix}blocks"), f);
                self.0.ln_f.visit(&format!("{prefix}ln_f"), f);
            }
            fn visit_mut<'a>(&'a mut self, _: &str, _: &mut dyn FnMut(String, &'a mut Tensor)) {
                unreachable!("read-only view")
            }
        }
        View(self).param_hash()
    }
}

/// Final hidden states `n×d` over `ids`, causal, optionally windowed.
pub fn hidden_states<'a>(
    tape: &mut Tape<'a>,
    model: &'a GeneratorModel,
    ids: &[usize],
    window: Option<usize>,
) -> Result<Var, TensorError> {
    if ids.is_empty() {
        return Err(TensorError::Contract("empty sequence".into()));
    }
    let mut x = embed(tape, ids, &model.embedding)?;
    for block in &model.blocks {
        x = block_forward(tape, x, block, None, window)?;
    }
    layer_norm(tape, x, &model.ln_f)
}

/// Next-token logits for every position of `seq`. Padding is masked out of
/// attention; rows at padded positions are still produced.
pub fn lm_forward(model: &GeneratorModel, seq: &TokenSeq) -> Result<Tensor, TensorError> {
    if seq.real_len() == 0 {
        return Err(TensorError::Contract("sequence has no real tokens".into()));
    }
    let mut tape = Tape::new();
    let mut x = embed(&mut tape, &seq.ids, &model.embedding)?;
    let pad = seq.pad_mask.iter().any(|&b| !b).then_some(seq.pad_mask.as_slice());
    for block in &model.blocks {
        x = block_forward(&mut tape, x, block, pad, None)?;
    }
    let h = layer_norm(&mut tape, x, &model.ln_f)?;
    let w = tape.param(&model.lm_head);
    let logits = tape.matmul(h, w)?;
    Ok(tape.tensor(logits))
}

/// Logits for the token following `ids`.
pub fn next_token_logits(model: &GeneratorModel, ids: &[usize]) -> Result<Vec<f64>, TensorError> {
    let mut tape = Tape::new();
    let h = hidden_states(&mut tape, model, ids, None)?;
    let d = model.dims.d_model;
    let v = model.dims.vocab;
    let last = &tape.value(h)[(ids.len() - 1) * d..ids.len() * d];
    let w = model.lm_head.data();
    let mut out = vec![0.0; v];
    for (i, &x) in last.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * v..(i + 1) * v]) {
            *o += x * wv;
        }
    }
    Ok(out)
}

/// `log P(t₂…t_N | t₁)`: the sum of per-position conditional log
/// probabilities. The first token is taken as given.
pub fn sequence_log_prob(model: &GeneratorModel, ids: &[usize]) -> Result<f64, TensorError> {
    Ok(token_log_probs(model, ids)?.iter().sum())
}

/// `log P(t_{k+1} | t₁…t_k)` for `k = 1..N-1`.
pub fn token_log_probs(model: &GeneratorModel, ids: &[usize]) -> Result<Vec<f64>, TensorError> {
    if ids.len() < 2 {
        return Err(TensorError::Contract("scoring needs at least two tokens".into()));
    }
    let n = ids.len() - 1;
    let mut tape = Tape::new();
    let h = hidden_states(&mut tape, model, &ids[..n], None)?;
    let w = tape.param(&model.lm_head);
    let logits = tape.matmul(h, w)?;
    let v = model.dims.vocab;
    let vals = tape.value(logits);
    Ok((0..n).map(|t| log_softmax(&vals[t * v..(t + 1) * v])[ids[t + 1]]).collect())
}

/// Mean next-token cross-entropy over `ids` as a tape node, weighted by
/// the number of predicted positions. `None` for sequences shorter than 2.
pub fn lm_loss_node<'a>(
    tape: &mut Tape<'a>,
    model: &'a GeneratorModel,
    ids: &[usize],
    window: Option<usize>,
) -> Result<Option<(Var, f64)>, TensorError> {
    if ids.len() < 2 {
        return Ok(None);
    }
    let n = ids.len() - 1;
    let h = hidden_states(tape, model, &ids[..n], window)?;
    let w = tape.param(&model.lm_head);
    let logits = tape.matmul(h, w)?;
    let loss = tape.cross_entropy(logits, ids[1..].to_vec())?;
    Ok(Some((loss, n as f64)))
}

/// Negative mean log-likelihood per predicted position over a batch, each
/// prediction seeing at most the previous `window` tokens.
pub fn lm_loss(model: &GeneratorModel, batch: &[TokenSeq], window: usize) -> Result<f64, TensorError> {
    let mut total = 0.0;
    let mut count = 0.0;
    for seq in batch {
        let mut tape = Tape::new();
        if let Some((l, w)) = lm_loss_node(&mut tape, model, seq.real_ids(), Some(window))? {
            total += tape.value(l)[0] * w;
            count += w;
        }
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

/// One optimizer step of LM training over `batch` on the currently
/// trainable parameters. Returns the batch loss, or `None` if nothing was
/// scorable.
pub fn lm_train_step(
    model: &mut GeneratorModel,
    batch: &[TokenSeq],
    window: usize,
    opt: &mut Optimizer,
    mode: ExecMode,
) -> Result<Option<f64>, TensorError> {
    let g = batch_gradients(model, batch, mode, |tape, m, seq| {
        lm_loss_node(tape, m, seq.real_ids(), Some(window))
    })?;
    let Some(g) = g else { return Ok(None) };
    let loss = g.loss;
    apply_step(model, g, opt)?;
    Ok(Some(loss))
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Temperature { t: f64 },
    TopK { k: usize, t: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub eot: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn new(max_new_tokens: usize, strategy: Strategy, seed: u64) -> Self {
        Self {
            max_new_tokens,
            eot: EOT,
            strategy,
            seed,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], strategy: Strategy, rng: &mut rng::Rng) -> usize {
    let (t, keep) = match strategy {
        Strategy::Greedy => return argmax(logits),
        Strategy::Temperature { t } => (t, logits.len()),
        Strategy::TopK { k, t } => (t, k.clamp(1, logits.len())),
    };
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if keep < logits.len() {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(keep);
        order.sort_unstable();
    }
    let max = order.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&i, &w) in order.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return i;
        }
    }
    *order.last().expect("non-empty vocabulary")
}

/// Appends up to `max_new_tokens` tokens to `prompt`, stopping before the
/// termination token is appended or when the position table is full.
pub fn generate(model: &GeneratorModel, prompt: &[usize], cfg: &GenerationConfig) -> Result<TokenSeq, TensorError> {
    if prompt.is_empty() {
        return Err(TensorError::Contract("empty prompt".into()));
    }
    if let Strategy::Temperature { t } | Strategy::TopK { t, .. } = cfg.strategy {
        if !(t > 0.0) {
            return Err(TensorError::Contract(format!("temperature {t} must be positive")));
        }
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut ids = prompt.to_vec();
    for _ in 0..cfg.max_new_tokens {
        if ids.len() >= model.dims.max_len {
            break;
        }
        let logits = next_token_logits(model, &ids)?;
        let next = sample(&logits, cfg.strategy, &mut rng);
        if next == cfg.eot {
            break;
        }
        ids.push(next);
    }
    Ok(TokenSeq::from_ids(ids))
}

// ---------------------------------------------------------------------------
// Classification head

/// Class logits through the head; the pad mask selects the real prefix,
/// which is all a causal stack sees.
pub fn cls_node<'a>(tape: &mut Tape<'a>, model: &'a GeneratorModel, seq: &TokenSeq) -> Result<Var, TensorError> {
    let head = model.head()?;
    let ids = seq.real_ids();
    let h = hidden_states(tape, model, ids, None)?;
    cls_logits(tape, h, vec![true; ids.len()], head)
}

/// `[P(label 0), P(label 1)]`.
pub fn classify_with_head(model: &GeneratorModel, seq: &TokenSeq) -> Result<[f64; 2], TensorError> {
    let mut tape = Tape::new();
    let z = cls_node(&mut tape, model, seq)?;
    Ok(softmax2(tape.value(z)))
}

/// One optimizer step of head classification loss over the currently
/// trainable parameters.
pub fn cls_train_step(
    model: &mut GeneratorModel,
    batch: &[(TokenSeq, u8)],
    opt: &mut Optimizer,
    mode: ExecMode,
) -> Result<Option<f64>, TensorError> {
    model.head()?;
    let g = batch_gradients(model, batch, mode, |tape, m, (seq, y)| {
        let z = cls_node(tape, m, seq)?;
        Ok(Some((tape.cross_entropy(z, vec![usize::from(*y)])?, 1.0)))
    })?;
    let Some(g) = g else { return Ok(None) };
    let loss = g.loss;
    apply_step(model, g, opt)?;
    Ok(Some(loss))
}

/// Mean head cross-entropy without updates.
pub fn cls_loss(model: &GeneratorModel, data: &[(TokenSeq, u8)]) -> Result<f64, TensorError> {
    let mut total = 0.0;
    for (seq, y) in data {
        let p = classify_with_head(model, seq)?;
        total -= p[usize::from(*y)].ln();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Restricts training to the named groups for the duration of `f`.
pub fn with_trainable<R>(
    model: &mut GeneratorModel,
    groups: &[&str],
    f: impl FnOnce(&mut GeneratorModel) -> R,
) -> R {
    select_trainable(model, groups);
    let out = f(model);
    model.set_requires_grad(true);
    out
}

/// Trains only the classification head, blocks frozen. Returns the mean
/// training loss of each epoch.
pub fn warmup_head(
    model: &mut GeneratorModel,
    data: &[(TokenSeq, u8)],
    lr: f64,
    epochs: usize,
    minibatch: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<f64>, TensorError> {
    model.head()?;
    let mut opt = Optimizer::adam(lr);
    with_trainable(model, &["cls_head"], |m| {
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::seeded(derive_seed(seed, epoch as u64)));
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(minibatch.max(1)) {
                let batch: Vec<(TokenSeq, u8)> = chunk.iter().map(|&i| data[i].clone()).collect();
                if let Some(l) = cls_train_step(m, &batch, &mut opt, mode)? {
                    sum += l;
                    batches += 1;
                }
            }
            history.push(sum / batches.max(1) as f64);
        }
        Ok(history)
    })
}
