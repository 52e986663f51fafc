//! The bidirectional encoder discriminator with an acceptability head and
//! a masked-token head.

use crate::generator::argmax;
use crate::nn::{
    block_forward, cls_logits, embed, impl_params, layer_norm, softmax2, BlockKind, ClsHead, ConfigError, EmbeddingTable,
    Initializer, LayerNormParams, ModelDims, TransformerBlock,
};
use crate::parallel::ExecMode;
use crate::rng::{self, derive_seed, derive_seed_str, SliceRandom};
use crate::tensor::{Optimizer, Tape, Tensor, TensorError, Var};
use crate::text::{mask_tokens, TokenSeq, MASK};
use crate::train::{apply_step, batch_gradients};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub dims: ModelDims,
    pub embedding: EmbeddingTable,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNormParams,
    pub cls_head: ClsHead,
    pub mlm_head: Tensor,
    pub threshold: f64,
}
impl_params!(DiscriminatorModel { embedding, blocks, ln_f, cls_head, mlm_head });

impl DiscriminatorModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self, ConfigError> {
        dims.validate()?;
        let mut init = Initializer::new(derive_seed_str(seed, "discriminator"));
        let embedding = EmbeddingTable::new(dims.vocab, dims.max_len, dims.d_model, &mut init);
        let blocks = (0..dims.layers)
            .map(|_| TransformerBlock::new(BlockKind::Encoder, dims.d_model, dims.heads, &mut init))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            dims,
            embedding,
            blocks,
            ln_f: LayerNormParams::new(dims.d_model, &mut init),
            cls_head: ClsHead::new(dims.d_model, &mut init),
            mlm_head: init.uniform(&[dims.d_model, dims.vocab]),
            threshold: DEFAULT_THRESHOLD,
        })
    }
}

/// Encoder output `n×d`. Padded keys are masked when the sequence has
/// padding.
pub fn encode_states<'a>(tape: &mut Tape<'a>, model: &'a DiscriminatorModel, seq: &TokenSeq) -> Result<Var, TensorError> {
    if seq.real_len() == 0 {
        return Err(TensorError::Contract("sequence has no real tokens".into()));
    }
    let mut x = embed(tape, &seq.ids, &model.embedding)?;
    let pad = seq.pad_mask.iter().any(|&b| !b).then_some(seq.pad_mask.as_slice());
    for block in &model.blocks {
        x = block_forward(tape, x, block, pad, None)?;
    }
    layer_norm(tape, x, &model.ln_f)
}

fn cls_node<'a>(tape: &mut Tape<'a>, model: &'a DiscriminatorModel, seq: &TokenSeq) -> Result<Var, TensorError> {
    let h = encode_states(tape, model, seq)?;
    cls_logits(tape, h, seq.pad_mask.clone(), &model.cls_head)
}

/// `(label, P(grammatical))`; the label is 1 iff the probability reaches
/// the model's threshold.
pub fn classify(model: &DiscriminatorModel, seq: &TokenSeq) -> Result<(u8, f64), TensorError> {
    let mut tape = Tape::new();
    let z = cls_node(&mut tape, model, seq)?;
    let p = softmax2(tape.value(z))[1];
    Ok((u8::from(p >= model.threshold), p))
}

pub fn cls_train_step(
    model: &mut DiscriminatorModel,
    batch: &[(TokenSeq, u8)],
    opt: &mut Optimizer,
    mode: ExecMode,
) -> Result<Option<f64>, TensorError> {
    let g = batch_gradients(model, batch, mode, |tape, m, (seq, y)| {
        let z = cls_node(tape, m, seq)?;
        Ok(Some((tape.cross_entropy(z, vec![usize::from(*y)])?, 1.0)))
    })?;
    let Some(g) = g else { return Ok(None) };
    let loss = g.loss;
    apply_step(model, g, opt)?;
    Ok(Some(loss))
}

/// Mean classification cross-entropy without updates.
pub fn cls_loss(model: &DiscriminatorModel, data: &[(TokenSeq, u8)]) -> Result<f64, TensorError> {
    let mut total = 0.0;
    for (seq, y) in data {
        let mut tape = Tape::new();
        let z = cls_node(&mut tape, model, seq)?;
        let p = softmax2(tape.value(z));
        total -= p[usize::from(*y)].ln();
    }
    Ok(total / data.len().max(1) as f64)
}

fn mlm_node<'a>(
    tape: &mut Tape<'a>,
    model: &'a DiscriminatorModel,
    masked: &TokenSeq,
    positions: &[usize],
    targets: Vec<usize>,
) -> Result<Var, TensorError> {
    let h = encode_states(tape, model, masked)?;
    let rows = tape.gather_rows(h, positions.to_vec())?;
    let w = tape.param(&model.mlm_head);
    let logits = tape.matmul(rows, w)?;
    tape.cross_entropy(logits, targets)
}

/// Masks each sequence with probability `mask_p` (seeded per sequence),
/// scores cross-entropy at masked positions only and takes one optimizer
/// step. Returns 0 without updating when nothing was masked.
pub fn mlm_pretrain_step(
    model: &mut DiscriminatorModel,
    batch: &[TokenSeq],
    mask_p: f64,
    opt: &mut Optimizer,
    seed: u64,
    mode: ExecMode,
) -> Result<f64, TensorError> {
    let items: Vec<(TokenSeq, Vec<usize>, Vec<usize>)> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, seq)| {
            let (masked, pos) = mask_tokens(seq, mask_p, derive_seed(seed, i as u64));
            let targets = pos.iter().map(|&p| seq.ids[p]).collect();
            (!pos.is_empty()).then_some((masked, pos, targets))
        })
        .collect();
    mlm_step_on(model, &items, opt, mode)
}

/// MLM step on pre-masked items `(masked, positions, original ids)`.
pub fn mlm_step_on(
    model: &mut DiscriminatorModel,
    items: &[(TokenSeq, Vec<usize>, Vec<usize>)],
    opt: &mut Optimizer,
    mode: ExecMode,
) -> Result<f64, TensorError> {
    let g = batch_gradients(model, items, mode, |tape, m, (masked, pos, targets)| {
        if pos.is_empty() {
            return Ok(None);
        }
        let l = mlm_node(tape, m, masked, pos, targets.clone())?;
        Ok(Some((l, pos.len() as f64)))
    })?;
    let Some(g) = g else { return Ok(0.0) };
    let loss = g.loss;
    apply_step(model, g, opt)?;
    Ok(loss)
}

/// Replaces each listed masked position by the most likely token (lowest
/// id on ties); everything else is copied unchanged.
pub fn mlm_fill(model: &DiscriminatorModel, masked: &TokenSeq, positions: &[usize]) -> Result<TokenSeq, TensorError> {
    if let Some(&p) = positions.iter().find(|&&p| masked.ids.get(p) != Some(&MASK)) {
        return Err(TensorError::Contract(format!("position {p} does not hold the mask token")));
    }
    let mut out = masked.clone();
    if positions.is_empty() {
        return Ok(out);
    }
    let mut tape = Tape::new();
    let h = encode_states(&mut tape, model, masked)?;
    let d = model.dims.d_model;
    let v = model.dims.vocab;
    let hv = tape.value(h);
    let w = model.mlm_head.data();
    for &p in positions {
        let row = &hv[p * d..(p + 1) * d];
        let mut logits = vec![0.0; v];
        for (i, &x) in row.iter().enumerate() {
            for (o, &wv) in logits.iter_mut().zip(&w[i * v..(i + 1) * v]) {
                *o += x * wv;
            }
        }
        out.ids[p] = argmax(&logits);
    }
    Ok(out)
}

/// Supervised acceptability training. Returns the validation loss after
/// each epoch (training loss when `validation` is empty).
#[allow(clippy::too_many_arguments)]
pub fn priori_finetune(
    model: &mut DiscriminatorModel,
    data: &[(TokenSeq, u8)],
    validation: &[(TokenSeq, u8)],
    lr: f64,
    epochs: usize,
    minibatch: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<f64>, TensorError> {
    let mut opt = Optimizer::adam(lr);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::seeded(derive_seed(seed, epoch as u64)));
        for chunk in order.chunks(minibatch.max(1)) {
            let batch: Vec<(TokenSeq, u8)> = chunk.iter().map(|&i| data[i].clone()).collect();
            cls_train_step(model, &batch, &mut opt, mode)?;
        }
        let eval = if validation.is_empty() { data } else { validation };
        history.push(cls_loss(model, eval)?);
    }
    Ok(history)
}
