//! The desk-scale experiment: synthetic data, pretraining of both models,
//! priori learning, the loop with its ablations, and escalation onto a
//! disjoint new domain.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::discriminator::{classify, mlm_pretrain_step, DiscriminatorModel};
use crate::evo::{
    self_escalation, priori_learning, run_loop, Ablation, EscalationReport, LoopConfig, PrioriReport, PromptPool, RunState,
};
use crate::generator::{generate, lm_train_step, GenerationConfig, GeneratorModel, Strategy};
use crate::grammar::{self, Grammar, GrammarError};
use crate::metrics::{accuracy, oracle_grammaticality, perplexity, ConfusionCounts, MetricError};
use crate::nn::{ConfigError, ModelDims};
use crate::parallel::{self, ExecMode};
use crate::rng::{self, derive_seed, derive_seed_str, SliceRandom};
use crate::tensor::{Optimizer, TensorError};
use crate::text::{build_vocab, decode_ids, encode, split_corpus, CorpusSplit, TextError, TokenSeq, TokenizerMode, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub g_layers: usize,
    pub d_layers: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    /// Old-domain sentences before the 7:1:2 split.
    pub corpus_sentences: usize,
    /// Labeled acceptability examples before the 7:1:2 split.
    pub labeled_size: usize,
    pub new_sentences: usize,
    pub max_words: usize,
    pub g_pretrain_epochs: usize,
    pub g_pretrain_lr: f64,
    pub g_pretrain_batch: usize,
    pub d_mlm_epochs: usize,
    pub d_mlm_lr: f64,
    pub eval_samples: usize,
    pub prompt_top: usize,
    pub loop_cfg: LoopConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            d_model: 64,
            heads: 4,
            g_layers: 4,
            d_layers: 2,
            max_len: 64,
            max_vocab: 200,
            corpus_sentences: 7150,
            labeled_size: 2860,
            new_sentences: 1000,
            max_words: 16,
            g_pretrain_epochs: 1,
            g_pretrain_lr: 1e-3,
            g_pretrain_batch: 16,
            d_mlm_epochs: 6,
            d_mlm_lr: 1e-3,
            eval_samples: 500,
            prompt_top: 16,
            loop_cfg: LoopConfig {
                tau1: 3e-4,
                tau3: 1e-5,
                tau4: 1.5e-5,
                lm_batch: 64,
                seed: 7,
                ..LoopConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    fn dims(&self, vocab: usize, layers: usize) -> ModelDims {
        ModelDims {
            vocab,
            d_model: self.d_model,
            heads: self.heads,
            layers,
            max_len: self.max_len,
        }
    }
}

/// Everything derived from the grammars before any training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub old_grammar: Grammar,
    pub new_grammar: Grammar,
    pub vocab: Vocab,
    pub old: CorpusSplit<TokenSeq>,
    pub new: CorpusSplit<TokenSeq>,
    pub labeled: CorpusSplit<(TokenSeq, u8)>,
    pub pool: PromptPool,
    pub cues: Vec<Vec<usize>>,
}

/// Encodes `text` truncated to `max_len` tokens, without padding.
pub fn encode_unpadded(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let s = encode(text, vocab, max_len);
    let n = s.real_len();
    s.pad_to(n)
}

/// LM form: tokens then `<eot>` when there is room.
pub fn lm_form(seq: &TokenSeq, max_len: usize) -> TokenSeq {
    let mut ids = seq.real_ids().to_vec();
    if ids.len() < max_len {
        ids.push(crate::text::EOT);
    }
    TokenSeq::from_ids(ids)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let old_grammar = grammar::english_like();
    let new_grammar = grammar::new_domain();
    let old_text = old_grammar.sample_corpus(cfg.corpus_sentences, cfg.max_words, derive_seed_str(cfg.seed, "old"))?;
    let new_text = new_grammar.sample_corpus(cfg.new_sentences, cfg.max_words, derive_seed_str(cfg.seed, "new"))?;
    let labeled = grammar::acceptability_set(&old_grammar, cfg.labeled_size, cfg.max_words, derive_seed_str(cfg.seed, "labeled"))?;
    let mut all: Vec<String> = old_text.clone();
    all.extend(new_text.iter().cloned());
    all.extend(labeled.iter().map(|(s, _)| s.clone()));
    let vocab = build_vocab(&all, TokenizerMode::Word, cfg.max_vocab)?;
    let enc = |v: &[String]| v.iter().map(|s| encode_unpadded(s, &vocab, cfg.max_len)).collect::<Vec<_>>();
    let old_split = split_corpus(&enc(&old_text), (7, 1, 2), derive_seed_str(cfg.seed, "split.old"));
    let new_split = split_corpus(&enc(&new_text), (7, 1, 2), derive_seed_str(cfg.seed, "split.new"));
    let labeled_seqs: Vec<(TokenSeq, u8)> = labeled.iter().map(|(s, y)| (encode_unpadded(s, &vocab, cfg.max_len), *y)).collect();
    let labeled_split = split_corpus(&labeled_seqs, (7, 1, 2), derive_seed_str(cfg.seed, "split.labeled"));
    let pool = PromptPool::from_corpus(&old_split.train, cfg.prompt_top);
    let cues = new_grammar.initial_words().iter().map(|w| vec![vocab.id(w)]).collect();
    Ok(Prepared {
        old_grammar,
        new_grammar,
        vocab,
        old: old_split,
        new: new_split,
        labeled: labeled_split,
        pool,
        cues,
    })
}

/// Plain LM training over `corpus` (each sequence followed by `<eot>`).
pub fn pretrain_generator(
    g: &mut GeneratorModel,
    corpus: &[TokenSeq],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<f64>, TensorError> {
    let data: Vec<TokenSeq> = corpus.iter().map(|s| lm_form(s, g.dims.max_len)).collect();
    let window = g.dims.max_len;
    let mut opt = Optimizer::adam(lr);
    let mut history = Vec::new();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::seeded(derive_seed(seed, epoch as u64)));
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(batch.max(1)) {
            let b: Vec<TokenSeq> = chunk.iter().map(|&i| data[i].clone()).collect();
            if let Some(l) = lm_train_step(g, &b, window, &mut opt, mode)? {
                sum += l;
                n += 1;
            }
        }
        history.push(sum / n.max(1) as f64);
    }
    Ok(history)
}

/// Masked-token pretraining of the discriminator.
pub fn pretrain_discriminator(
    d: &mut DiscriminatorModel,
    corpus: &[TokenSeq],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<f64>, TensorError> {
    let mut opt = Optimizer::adam(lr);
    let mut history = Vec::new();
    for epoch in 0..epochs {
        let es = derive_seed(seed, epoch as u64);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng::seeded(es));
        let (mut sum, mut n) = (0.0, 0);
        for (b, chunk) in order.chunks(batch.max(1)).enumerate() {
            let bt: Vec<TokenSeq> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            sum += mlm_pretrain_step(d, &bt, 0.15, &mut opt, derive_seed(es, b as u64 + 1), mode)?;
            n += 1;
        }
        history.push(sum / n.max(1) as f64);
    }
    Ok(history)
}

/// Held-out acceptability accuracy.
pub fn discriminator_accuracy(d: &DiscriminatorModel, data: &[(TokenSeq, u8)]) -> Result<f64, ExperimentError> {
    let mut pairs = Vec::with_capacity(data.len());
    for (s, y) in data {
        pairs.push((classify(d, s)?.0, *y));
    }
    Ok(accuracy(&ConfusionCounts::from_pairs(pairs))?)
}

/// Samples `n` sentences from the generator with prompts from `pool`.
pub fn sample_texts(
    g: &GeneratorModel,
    pool: &PromptPool,
    vocab: &Vocab,
    n: usize,
    max_new_tokens: usize,
    temperature: f64,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<String>, TensorError> {
    let prompts = pool.draw(n, derive_seed(seed, 0));
    parallel::map(mode, &prompts, |i, p| {
        let cfg = GenerationConfig::new(max_new_tokens, Strategy::Temperature { t: temperature }, derive_seed(seed, i as u64 + 1));
        generate(g, p, &cfg).map(|s| decode_ids(&s.ids, vocab))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEval {
    pub grammaticality: f64,
    pub ppl_old: f64,
    pub ppl_new: f64,
}

/// Oracle grammaticality of fresh samples plus test perplexities on both
/// domains. The sampling seed is fixed so runs compare like with like.
pub fn evaluate_generator(
    g: &GeneratorModel,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    mode: ExecMode,
) -> Result<GeneratorEval, ExperimentError> {
    let texts = sample_texts(
        g,
        &prep.pool,
        &prep.vocab,
        cfg.eval_samples,
        cfg.loop_cfg.max_new_tokens,
        cfg.loop_cfg.temperature,
        derive_seed_str(cfg.seed, "eval.samples"),
        mode,
    )?;
    let lm = |c: &[TokenSeq]| c.iter().map(|s| lm_form(s, cfg.max_len)).collect::<Vec<_>>();
    Ok(GeneratorEval {
        grammaticality: oracle_grammaticality(&texts, &prep.old_grammar),
        ppl_old: perplexity(g, &lm(&prep.old.test))?,
        ppl_new: perplexity(g, &lm(&prep.new.test))?,
    })
}

/// Both models after pretraining, before priori learning.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub g: GeneratorModel,
    pub d: DiscriminatorModel,
    pub g_history: Vec<f64>,
    pub d_history: Vec<f64>,
}

pub fn pretrain(prep: &Prepared, cfg: &ExperimentConfig, mode: ExecMode) -> Result<Pretrained, ExperimentError> {
    let v = prep.vocab.len();
    let mut g = GeneratorModel::new(cfg.dims(v, cfg.g_layers), derive_seed_str(cfg.seed, "g.init"))?;
    let mut d = DiscriminatorModel::new(cfg.dims(v, cfg.d_layers), derive_seed_str(cfg.seed, "d.init"))?;
    let g_history = pretrain_generator(
        &mut g,
        &prep.old.train,
        cfg.g_pretrain_epochs,
        cfg.g_pretrain_lr,
        cfg.g_pretrain_batch,
        derive_seed_str(cfg.seed, "g.pretrain"),
        mode,
    )?;
    let d_history = pretrain_discriminator(
        &mut d,
        &prep.old.train,
        cfg.d_mlm_epochs,
        cfg.d_mlm_lr,
        cfg.loop_cfg.minibatch,
        derive_seed_str(cfg.seed, "d.pretrain"),
        mode,
    )?;
    g.attach_cls_head(derive_seed_str(cfg.seed, "g.head"));
    Ok(Pretrained {
        g,
        d,
        g_history,
        d_history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub ablation: Ablation,
    pub d_accuracy: f64,
    pub before: GeneratorEval,
    pub after: GeneratorEval,
    pub priori: PrioriReport,
    pub log: String,
}

/// Priori learning then the loop, from a copy of the pretrained stack.
pub fn run_variant(
    name: &str,
    pre: &Pretrained,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    ablation: Ablation,
    baseline: &GeneratorEval,
    mode: ExecMode,
) -> Result<(VariantResult, GeneratorModel, DiscriminatorModel), ExperimentError> {
    let mut g = pre.g.clone();
    let mut d = pre.d.clone();
    let mut lc = cfg.loop_cfg.clone();
    lc.ablation = ablation;
    let priori = priori_learning(&mut d, &mut g, &prep.labeled.train, &prep.labeled.validation, &lc, mode)?;
    finish_variant(name, g, d, priori, prep, cfg, ablation, baseline, mode)
}

#[allow(clippy::too_many_arguments)]
fn finish_variant(
    name: &str,
    mut g: GeneratorModel,
    d: DiscriminatorModel,
    priori: PrioriReport,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    ablation: Ablation,
    baseline: &GeneratorEval,
    mode: ExecMode,
) -> Result<(VariantResult, GeneratorModel, DiscriminatorModel), ExperimentError> {
    let mut lc = cfg.loop_cfg.clone();
    lc.ablation = ablation;
    let d_accuracy = discriminator_accuracy(&d, &prep.labeled.test)?;
    log::info!("{name}: discriminator accuracy {d_accuracy:.3}");
    let mut state = RunState::new(&lc);
    run_loop(&mut g, &d, &prep.pool, &prep.vocab, &lc, &mut state, mode)?;
    let after = evaluate_generator(&g, prep, cfg, mode)?;
    log::info!("{name}: {after:?}");
    Ok((
        VariantResult {
            name: name.to_string(),
            ablation,
            d_accuracy,
            before: baseline.clone(),
            after,
            priori,
            log: state.log_jsonl(),
        },
        g,
        d,
    ))
}

/// Output of [`run_matrix`], with wall-clock durations kept apart from the
/// deterministic results.
pub struct Matrix {
    pub variants: Vec<(VariantResult, GeneratorModel, DiscriminatorModel)>,
    pub priori_elapsed: Duration,
    /// Loop plus evaluation, per variant.
    pub variant_elapsed: Vec<Duration>,
}

/// Every entry of [`VARIANTS`], equal to calling [`run_variant`] on each.
///
/// Priori learning runs once. Its discriminator steps and head steps never
/// read each other's parameters, so a variant that skips one half starts
/// the loop from the pretrained model for that half and from the shared
/// run for the other.
pub fn run_matrix(
    pre: &Pretrained,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    baseline: &GeneratorEval,
    mode: ExecMode,
) -> Result<Matrix, ExperimentError> {
    let start = Instant::now();
    let (mut g_full, mut d_full) = (pre.g.clone(), pre.d.clone());
    let mut lc = cfg.loop_cfg.clone();
    lc.ablation = Ablation::default();
    let full = priori_learning(&mut d_full, &mut g_full, &prep.labeled.train, &prep.labeled.validation, &lc, mode)?;
    let eval = if prep.labeled.validation.is_empty() {
        &prep.labeled.train
    } else {
        &prep.labeled.validation
    };
    let d_still = vec![crate::discriminator::cls_loss(&pre.d, eval)?; lc.epochs];
    let g_still = vec![crate::generator::cls_loss(&pre.g, eval)?; lc.epochs];
    let priori_elapsed = start.elapsed();
    let mut out = Vec::with_capacity(VARIANTS.len());
    let mut variant_elapsed = Vec::with_capacity(VARIANTS.len());
    for (name, ab) in VARIANTS {
        let start = Instant::now();
        let (d, d_val_loss) = if ab.skip_d_pretrain {
            (pre.d.clone(), d_still.clone())
        } else {
            (d_full.clone(), full.d_val_loss.clone())
        };
        let (g, head_val_loss) = if ab.skip_warmup {
            (pre.g.clone(), g_still.clone())
        } else {
            (g_full.clone(), full.head_val_loss.clone())
        };
        let priori = PrioriReport {
            d_val_loss,
            head_val_loss,
        };
        out.push(finish_variant(name, g, d, priori, prep, cfg, ab, baseline, mode)?);
        variant_elapsed.push(start.elapsed());
    }
    Ok(Matrix {
        variants: out,
        priori_elapsed,
        variant_elapsed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscalationResult {
    pub before: GeneratorEval,
    pub after: GeneratorEval,
    pub report: EscalationReport,
}

pub fn run_escalation(
    g: &mut GeneratorModel,
    d: &mut DiscriminatorModel,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    mode: ExecMode,
) -> Result<EscalationResult, ExperimentError> {
    let before = evaluate_generator(g, prep, cfg, mode)?;
    let report = self_escalation(g, d, &prep.new.train, &prep.cues, &prep.vocab, &cfg.loop_cfg, mode)?;
    let after = evaluate_generator(g, prep, cfg, mode)?;
    Ok(EscalationResult { before, after, report })
}

pub const VARIANTS: [(&str, Ablation); 5] = [
    ("full", Ablation {
        skip_d_pretrain: false,
        skip_warmup: false,
        skip_supervised: false,
        skip_semisupervised: false,
    }),
    ("remove_d_pretraining", Ablation {
        skip_d_pretrain: true,
        skip_warmup: false,
        skip_supervised: false,
        skip_semisupervised: false,
    }),
    ("remove_g_warmup", Ablation {
        skip_d_pretrain: false,
        skip_warmup: true,
        skip_supervised: false,
        skip_semisupervised: false,
    }),
    ("remove_supervised", Ablation {
        skip_d_pretrain: false,
        skip_warmup: false,
        skip_supervised: true,
        skip_semisupervised: false,
    }),
    ("remove_semisupervised", Ablation {
        skip_d_pretrain: false,
        skip_warmup: false,
        skip_supervised: false,
        skip_semisupervised: true,
    }),
];
