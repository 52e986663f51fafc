//! Transformer building blocks: embeddings, scaled dot-product and
//! multi-head attention, pre-norm encoder/decoder blocks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::derive_seed;
use crate::tensor::{seeded_init, InitScheme, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    IndivisibleHeads { d_model: usize, heads: usize },
    #[error("invalid model configuration: {0}")]
    Invalid(String),
}

/// Walks named parameter tensors in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t| t.set_requires_grad(on));
    }

    /// SHA-256 over names, shapes and value bytes.
    fn param_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.visit("", &mut |n, t| {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        });
        h.finalize().into()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor)) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut $crate::tensor::Tensor)) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

impl Params for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<P: Params> Params for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Hands out deterministic per-tensor seeds.
pub struct Initializer {
    seed: u64,
    counter: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn uniform(&mut self, shape: &[usize]) -> Tensor {
        self.counter += 1;
        seeded_init(shape, InitScheme::UniformScaled, derive_seed(self.seed, self.counter))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        seeded_init(shape, InitScheme::Zeros, 0)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        seeded_init(shape, InitScheme::Ones, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub token: Tensor,
    pub position: Tensor,
}
impl_params!(EmbeddingTable { token, position });

impl EmbeddingTable {
    pub fn new(vocab: usize, max_len: usize, d_model: usize, init: &mut Initializer) -> Self {
        Self {
            token: init.uniform(&[vocab, d_model]),
            position: init.uniform(&[max_len, d_model]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token.rows()
    }

    pub fn max_len(&self) -> usize {
        self.position.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}
impl_params!(HeadParams { w_q, w_k, w_v });

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Tensor,
}
impl_params!(AttentionParams { heads, w_o });

impl AttentionParams {
    pub fn new(d_model: usize, heads: usize, init: &mut Initializer) -> Result<Self, ConfigError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(ConfigError::IndivisibleHeads { d_model, heads });
        }
        let d_k = d_model / heads;
        let heads = (0..heads)
            .map(|_| HeadParams {
                w_q: init.uniform(&[d_model, d_k]),
                w_k: init.uniform(&[d_model, d_k]),
                w_v: init.uniform(&[d_model, d_k]),
            })
            .collect();
        Ok(Self {
            heads,
            w_o: init.uniform(&[d_model, d_model]),
        })
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].w_q.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}
impl_params!(LayerNormParams { gain, bias });

impl LayerNormParams {
    pub fn new(d: usize, init: &mut Initializer) -> Self {
        Self {
            gain: init.ones(&[d]),
            bias: init.zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}
impl_params!(MlpParams { w_in, b_in, w_out, b_out });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub kind: BlockKind,
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}
impl_params!(TransformerBlock { ln1, attn, ln2, mlp });

impl TransformerBlock {
    pub fn new(kind: BlockKind, d_model: usize, heads: usize, init: &mut Initializer) -> Result<Self, ConfigError> {
        let hidden = 4 * d_model;
        Ok(Self {
            kind,
            ln1: LayerNormParams::new(d_model, init),
            attn: AttentionParams::new(d_model, heads, init)?,
            ln2: LayerNormParams::new(d_model, init),
            mlp: MlpParams {
                w_in: init.uniform(&[d_model, hidden]),
                b_in: init.zeros(&[hidden]),
                w_out: init.uniform(&[hidden, d_model]),
                b_out: init.zeros(&[d_model]),
            },
        })
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMask {
    pub causal: bool,
    /// `true` marks real tokens; padded keys are never attended.
    pub pad: Option<Vec<bool>>,
    /// Query `t` only sees keys `j` with `t - j < window`.
    pub window: Option<usize>,
}

impl AttentionMask {
    pub fn causal() -> Self {
        Self {
            causal: true,
            ..Self::default()
        }
    }

    /// Row-major `n×n` allowed matrix, `None` when nothing is masked.
    pub fn allowed(&self, n: usize) -> Option<Vec<bool>> {
        if !self.causal && self.pad.is_none() && self.window.is_none() {
            return None;
        }
        let mut out = vec![true; n * n];
        for t in 0..n {
            for j in 0..n {
                let mut ok = true;
                if self.causal && j > t {
                    ok = false;
                }
                if let Some(pad) = &self.pad {
                    ok &= pad.get(j).copied().unwrap_or(false);
                }
                if let Some(w) = self.window {
                    ok &= t < j || t - j < w;
                }
                out[t * n + j] = ok;
            }
        }
        Some(out)
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` with masked keys excluded.
pub fn scaled_dot_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var, TensorError> {
    let n = tape.shape(q)[0];
    let d_k = tape.shape(q)[1];
    if tape.shape(k) != tape.shape(q) || tape.shape(v)[0] != tape.shape(k)[0] {
        return Err(TensorError::Shape {
            op: "scaled_dot_attention",
            left: tape.shape(q).to_vec(),
            right: tape.shape(k).to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = match mask.allowed(n) {
        Some(a) => tape.masked_softmax_rows(scores, a)?,
        None => tape.softmax_rows(scores)?,
    };
    tape.matmul(weights, v)
}

pub fn multi_head_attention<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    attn: &'a AttentionParams,
    mask: &AttentionMask,
) -> Result<Var, TensorError> {
    let mut outs = Vec::with_capacity(attn.heads.len());
    for head in &attn.heads {
        let wq = tape.param(&head.w_q);
        let wk = tape.param(&head.w_k);
        let wv = tape.param(&head.w_v);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        outs.push(scaled_dot_attention(tape, q, k, v, mask)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let wo = tape.param(&attn.w_o);
    tape.matmul(cat, wo)
}

pub fn layer_norm<'a>(tape: &mut Tape<'a>, x: Var, ln: &'a LayerNormParams) -> Result<Var, TensorError> {
    let g = tape.param(&ln.gain);
    let b = tape.param(&ln.bias);
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `+ MLP(LN(.))`.
/// Decoder blocks always add the causal mask.
pub fn block_forward<'a>(
    tape: &mut Tape<'a>,
    x: Var,
    block: &'a TransformerBlock,
    pad: Option<&[bool]>,
    window: Option<usize>,
) -> Result<Var, TensorError> {
    let mask = AttentionMask {
        causal: block.kind == BlockKind::Decoder,
        pad: pad.map(<[bool]>::to_vec),
        window,
    };
    let h = layer_norm(tape, x, &block.ln1)?;
    let a = multi_head_attention(tape, h, &block.attn, &mask)?;
    let x1 = tape.add(x, a)?;
    let h2 = layer_norm(tape, x1, &block.ln2)?;
    let w_in = tape.param(&block.mlp.w_in);
    let b_in = tape.param(&block.mlp.b_in);
    let w_out = tape.param(&block.mlp.w_out);
    let b_out = tape.param(&block.mlp.b_out);
    let u = tape.matmul(h2, w_in)?;
    let u = tape.add_row(u, b_in)?;
    let u = tape.gelu(u)?;
    let m = tape.matmul(u, w_out)?;
    let m = tape.add_row(m, b_out)?;
    tape.add(x1, m)
}

/// Token row plus position row for each position.
pub fn embed<'a>(tape: &mut Tape<'a>, ids: &[usize], table: &'a EmbeddingTable) -> Result<Var, TensorError> {
    if ids.len() > table.max_len() {
        return Err(TensorError::Contract(format!(
            "sequence of length {} exceeds the maximum {}",
            ids.len(),
            table.max_len()
        )));
    }
    let tok = tape.param(&table.token);
    let pos = tape.param(&table.position);
    let t = tape.gather_rows(tok, ids.to_vec())?;
    let p = tape.gather_rows(pos, (0..ids.len()).collect())?;
    tape.add(t, p)
}

/// Architecture sizes shared by both models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.vocab < 2 || self.d_model == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(ConfigError::Invalid(format!("{self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ConfigError::IndivisibleHeads {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Mean-pool over rows, then a linear map to two classes. Class 1 is
/// "grammatical".
#[derive(Clone, Debug, PartialEq)]
pub struct ClsHead {
    pub w: Tensor,
    pub b: Tensor,
}
impl_params!(ClsHead { w, b });

impl ClsHead {
    pub fn new(d_model: usize, init: &mut Initializer) -> Self {
        Self {
            w: init.uniform(&[d_model, 2]),
            b: init.zeros(&[2]),
        }
    }
}

/// `1×2` class logits from `n×d` hidden states, pooling over `real` rows.
pub fn cls_logits<'a>(tape: &mut Tape<'a>, hidden: Var, real: Vec<bool>, head: &'a ClsHead) -> Result<Var, TensorError> {
    let pooled = tape.mean_rows(hidden, real)?;
    let w = tape.param(&head.w);
    let b = tape.param(&head.b);
    let z = tape.matmul(pooled, w)?;
    tape.add_row(z, b)
}

/// Two-class softmax of a logit pair.
pub fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(kind: BlockKind, d: usize, h: usize, seed: u64) -> TransformerBlock {
        TransformerBlock::new(kind, d, h, &mut Initializer::new(seed)).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut t = seeded_init(shape, InitScheme::UniformScaled, seed);
        t.data_mut().iter_mut().for_each(|x| *x *= 3.0);
        t
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 3], 1));
        let k = tape.constant(random(&[1, 3], 2));
        let v = tape.constant(random(&[1, 3], 3));
        let out = scaled_dot_attention(&mut tape, q, k, v, &AttentionMask::default()).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[2, 2], 1));
        let k = tape.constant(Tensor::from_rows(&[vec![0.3, -0.7], vec![0.3, -0.7]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap());
        let out = scaled_dot_attention(&mut tape, q, k, v, &AttentionMask::default()).unwrap();
        for row in tape.value(out).chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-12 && (row[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let (q, k, v) = (random(&[3, 2], 4), random(&[3, 2], 5), random(&[3, 2], 6));
        // Oracle: explicit exp / normalize / weighted sum.
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (q.row(i)[0] * k.row(j)[0] + q.row(i)[1] * k.row(j)[1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                for c in 0..2 {
                    expected[i * 2 + c] += s[j].exp() / z * v.row(j)[c];
                }
            }
        }
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let out = scaled_dot_attention(&mut tape, qv, kv, vv, &AttentionMask::default()).unwrap();
        for (a, b) in tape.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fully_masked_query_is_an_error() {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[2, 2], 1));
        let mask = AttentionMask {
            pad: Some(vec![false, false]),
            ..Default::default()
        };
        assert!(scaled_dot_attention(&mut tape, q, q, q, &mask).is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert_eq!(
            AttentionParams::new(10, 3, &mut Initializer::new(0)),
            Err(ConfigError::IndivisibleHeads { d_model: 10, heads: 3 })
        );
    }

    #[test]
    fn zeroed_sublayers_are_identity() {
        let mut b = block(BlockKind::Decoder, 8, 2, 3);
        b.attn.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        b.mlp.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        let x = random(&[4, 8], 9);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block_forward(&mut tape, xv, &b, None, None).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn single_head_is_projected_attention() {
        let b = block(BlockKind::Encoder, 4, 1, 11);
        let x = random(&[3, 4], 12);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(&mut tape, xv, &b.attn, &AttentionMask::default()).unwrap();
        let got = tape.value(out).to_vec();

        let mut t2 = Tape::new();
        let xv = t2.constant(x);
        let h = &b.attn.heads[0];
        let (wq, wk, wv, wo) = (t2.param(&h.w_q), t2.param(&h.w_k), t2.param(&h.w_v), t2.param(&b.attn.w_o));
        let q = t2.matmul(xv, wq).unwrap();
        let k = t2.matmul(xv, wk).unwrap();
        let v = t2.matmul(xv, wv).unwrap();
        let a = scaled_dot_attention(&mut t2, q, k, v, &AttentionMask::default()).unwrap();
        let o = t2.matmul(a, wo).unwrap();
        assert_eq!(got, t2.value(o));
    }

    #[test]
    fn two_heads_match_per_head_expansion() {
        let b = block(BlockKind::Encoder, 4, 2, 21);
        let x = random(&[3, 4], 22);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(&mut tape, xv, &b.attn, &AttentionMask::default()).unwrap();

        // Oracle with plain loops.
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| {
            let mut o = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        o[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            o
        };
        let mut cat = vec![0.0; 3 * 4];
        for (hi, h) in b.attn.heads.iter().enumerate() {
            let q = mm(x.data(), h.w_q.data(), 3, 4, 2);
            let k = mm(x.data(), h.w_k.data(), 3, 4, 2);
            let v = mm(x.data(), h.w_v.data(), 3, 4, 2);
            for i in 0..3 {
                let s: Vec<f64> = (0..3)
                    .map(|j| (q[i * 2] * k[j * 2] + q[i * 2 + 1] * k[j * 2 + 1]) / 2f64.sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for j in 0..3 {
                    for c in 0..2 {
                        cat[i * 4 + hi * 2 + c] += (s[j] - mx).exp() / z * v[j * 2 + c];
                    }
                }
            }
        }
        let expected = mm(&cat, b.attn.w_o.data(), 3, 4, 4);
        for (a, e) in tape.value(out).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn causal_row_zero_ignores_future_rows() {
        let b = block(BlockKind::Decoder, 8, 2, 5);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = multi_head_attention(&mut tape, xv, &b.attn, &AttentionMask::causal()).unwrap();
            tape.value(y)[..8].to_vec()
        };
        let mut a = random(&[4, 8], 1);
        let mut z = a.clone();
        z.data_mut()[8..].fill(0.0);
        a.data_mut()[8..].iter_mut().for_each(|x| *x += 1.0);
        assert_eq!(run(a), run(z));
    }

    #[test]
    fn decoder_block_is_causal() {
        let b = block(BlockKind::Decoder, 8, 2, 6);
        let x = random(&[5, 8], 2);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = block_forward(&mut tape, xv, &b, None, None).unwrap();
            tape.value(y).to_vec()
        };
        let base = run(x.clone());
        let mut perturbed = x;
        perturbed.data_mut()[3 * 8..].iter_mut().for_each(|v| *v = -*v * 2.0);
        let other = run(perturbed);
        assert_eq!(base[..3 * 8], other[..3 * 8]);
        assert_ne!(base[3 * 8..], other[3 * 8..]);
    }

    #[test]
    fn encoder_attention_is_permutation_equivariant() {
        let b = block(BlockKind::Encoder, 8, 2, 7);
        let x = random(&[4, 8], 3);
        let perm = [2, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let px = Tensor::from_rows(&rows).unwrap();
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = block_forward(&mut tape, xv, &b, None, None).unwrap();
            tape.tensor(y)
        };
        let (y, py) = (run(x), run(px));
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in py.row(r).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_sums_token_and_position_rows() {
        let mut init = Initializer::new(4);
        let mut table = EmbeddingTable::new(5, 4, 3, &mut init);
        let mut tape = Tape::new();
        let e = embed(&mut tape, &[2], &table).unwrap();
        let expected: Vec<f64> = table.token.row(2).iter().zip(table.position.row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(e), expected.as_slice());
        drop(tape);

        table.position.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let e = embed(&mut tape, &[1, 4, 1], &table).unwrap();
        let expected: Vec<f64> = [1, 4, 1].iter().flat_map(|&i| table.token.row(i).to_vec()).collect();
        assert_eq!(tape.value(e), expected.as_slice());
        assert!(embed(&mut tape, &[5], &table).is_err());
        assert!(embed(&mut tape, &[0; 5], &table).is_err());
    }

    #[test]
    fn param_names_are_stable() {
        let b = block(BlockKind::Encoder, 4, 2, 1);
        let names: Vec<String> = b.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "ln1.gain");
        assert!(names.contains(&"attn.heads.1.w_v".to_string()));
        assert_eq!(names.last().unwrap(), "mlp.b_out");
    }
}
