//! The co-training loop: priori learning of the discriminator and the
//! generator head, generate → label → fine-tune iterations, and
//! self-escalation onto a new corpus.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::discriminator::{self, classify, mlm_fill, mlm_pretrain_step, DiscriminatorModel};
use crate::generator::{self, generate, lm_train_step, GenerationConfig, GeneratorModel, Strategy, BLOCK_GROUPS};
use crate::nn::Params;
use crate::parallel::{self, ExecMode};
use crate::rng::{self, derive_seed, derive_seed_str, RngExt, SliceRandom};
use crate::tensor::{Optimizer, TensorError};
use crate::text::{decode_ids, mask_tokens, TokenSeq, Vocab, EOT};
use crate::train::select_trainable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub skip_d_pretrain: bool,
    pub skip_warmup: bool,
    pub skip_supervised: bool,
    pub skip_semisupervised: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Discriminator priori learning rate.
    pub tau1: f64,
    /// Generator head warm-up rate.
    pub tau2: f64,
    /// Supervised fine-tuning rate.
    pub tau3: f64,
    /// Semi-supervised fine-tuning rate.
    pub tau4: f64,
    /// Discriminator MLM rate during escalation.
    pub tau_d_escalate: f64,
    /// Generator rate during escalation.
    pub tau_g_escalate: f64,
    /// Priori epochs.
    pub epochs: usize,
    /// Samples generated per iteration; also the priori minibatch.
    pub minibatch: usize,
    /// Minibatch of supervised fine-tuning.
    pub finetune_batch: usize,
    /// Minibatch of semi-supervised LM fine-tuning.
    pub lm_batch: usize,
    pub max_new_tokens: usize,
    pub eot: usize,
    pub mask_p: f64,
    pub window: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub escalation_rounds: usize,
    pub escalation_mlm_epochs: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            tau1: 1e-3,
            tau2: 1e-2,
            tau3: 1e-4,
            tau4: 5e-4,
            tau_d_escalate: 1e-3,
            tau_g_escalate: 5e-4,
            epochs: 10,
            minibatch: 64,
            finetune_batch: 64,
            lm_batch: 16,
            max_new_tokens: 24,
            eot: EOT,
            mask_p: 0.15,
            window: 64,
            iterations: 156,
            temperature: 1.0,
            escalation_rounds: 4,
            escalation_mlm_epochs: 3,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        let rates = [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau3", self.tau3),
            ("tau4", self.tau4),
            ("tau_d_escalate", self.tau_d_escalate),
            ("tau_g_escalate", self.tau_g_escalate),
            ("temperature", self.temperature),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_p) {
            return Err(format!("mask_p must lie in [0, 1], got {}", self.mask_p));
        }
        for (name, v) in [
            ("minibatch", self.minibatch),
            ("finetune_batch", self.finetune_batch),
            ("lm_batch", self.lm_batch),
            ("window", self.window),
            ("max_new_tokens", self.max_new_tokens),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            eot: self.eot,
            strategy: Strategy::Temperature { t: self.temperature },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub prompt: String,
    pub text: String,
    pub ids: Vec<usize>,
    pub label: u8,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub supervised_loss: Option<f64>,
    pub lm_loss: Option<f64>,
    pub label1_fraction: f64,
    /// Logical clock: optimizer steps taken by the generator so far. Wall
    /// time would break byte-identical logs.
    pub timestamp: u64,
}

impl IterationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Loop progress plus the generator's fine-tuning optimizers, which persist
/// across iterations.
#[derive(Clone, Debug)]
pub struct RunState {
    pub iteration: usize,
    pub records: Vec<IterationRecord>,
    pub supervised_opt: Optimizer,
    pub semi_opt: Optimizer,
}

impl RunState {
    pub fn new(cfg: &LoopConfig) -> Self {
        Self {
            iteration: 0,
            records: Vec::new(),
            supervised_opt: Optimizer::adam(cfg.tau3),
            semi_opt: Optimizer::adam(cfg.tau4),
        }
    }

    pub fn log_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }

    fn clock(&self) -> u64 {
        self.supervised_opt.step_count() + self.semi_opt.step_count()
    }
}

// ---------------------------------------------------------------------------
// Priori learning

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrioriReport {
    pub d_val_loss: Vec<f64>,
    pub head_val_loss: Vec<f64>,
}

/// Per minibatch: one discriminator step at τ₁, then one generator-head
/// step at τ₂ with the generator blocks frozen.
pub fn priori_learning(
    d: &mut DiscriminatorModel,
    g: &mut GeneratorModel,
    data: &[(TokenSeq, u8)],
    validation: &[(TokenSeq, u8)],
    cfg: &LoopConfig,
    mode: ExecMode,
) -> Result<PrioriReport, TensorError> {
    if g.cls_head.is_none() {
        return Err(TensorError::Contract("generator head must be attached before priori learning".into()));
    }
    let mut opt_d = Optimizer::adam(cfg.tau1);
    let mut opt_h = Optimizer::adam(cfg.tau2);
    let eval = if validation.is_empty() { data } else { validation };
    let mut report = PrioriReport::default();
    select_trainable(g, &["cls_head"]);
    let result = (|| {
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::seeded(derive_seed(derive_seed_str(cfg.seed, "priori"), epoch as u64)));
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<(TokenSeq, u8)> = chunk.iter().map(|&i| data[i].clone()).collect();
                if !cfg.ablation.skip_d_pretrain {
                    discriminator::cls_train_step(d, &batch, &mut opt_d, mode)?;
                }
                if !cfg.ablation.skip_warmup {
                    generator::cls_train_step(g, &batch, &mut opt_h, mode)?;
                }
            }
            report.d_val_loss.push(discriminator::cls_loss(d, eval)?);
            report.head_val_loss.push(generator::cls_loss(g, eval)?);
        }
        Ok(())
    })();
    g.set_requires_grad(true);
    result.map(|()| report)
}

// ---------------------------------------------------------------------------
// Prompts

/// Sentence-initial tokens weighted by how often they start a corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub tokens: Vec<(usize, usize)>,
}

impl PromptPool {
    /// The `top` most frequent first tokens (ties by id).
    pub fn from_corpus(corpus: &[TokenSeq], top: usize) -> Self {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for s in corpus {
            if let Some(&t) = s.real_ids().first() {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut tokens: Vec<(usize, usize)> = counts.into_iter().collect();
        tokens.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        tokens.truncate(top.max(1));
        Self { tokens }
    }

    pub fn uniform(ids: &[usize]) -> Self {
        Self {
            tokens: ids.iter().map(|&t| (t, 1)).collect(),
        }
    }

    /// `n` single-token prompts, frequency-weighted, deterministic in seed.
    pub fn draw(&self, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let total: usize = self.tokens.iter().map(|t| t.1).sum();
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let mut u = rng.gen_range(0..total);
                for &(t, c) in &self.tokens {
                    if u < c {
                        return vec![t];
                    }
                    u -= c;
                }
                unreachable!("u < total")
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Algorithm 2 stages

/// Generates from each prompt and labels the output with the
/// discriminator. Generation runs in parallel with results kept in prompt
/// order.
pub fn build_training_dataset(
    g: &GeneratorModel,
    d: &DiscriminatorModel,
    prompts: &[Vec<usize>],
    vocab: &Vocab,
    cfg: &LoopConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<GeneratedSample>, TensorError> {
    if prompts.is_empty() {
        return Err(TensorError::Contract("no prompts".into()));
    }
    parallel::map(mode, prompts, |i, prompt| {
        let out = generate(g, prompt, &cfg.generation(derive_seed(seed, i as u64)))?;
        let (label, prob) = classify(d, &out)?;
        Ok(GeneratedSample {
            prompt: decode_ids(prompt, vocab),
            text: decode_ids(&out.ids, vocab),
            ids: out.ids,
            label,
            prob,
        })
    })
    .into_iter()
    .collect()
}

/// One epoch of head classification over the samples' labels with the
/// blocks and the head trainable. Returns the mean minibatch loss, 0 when
/// there is nothing to train on.
pub fn supervised_finetune(
    g: &mut GeneratorModel,
    samples: &[GeneratedSample],
    opt: &mut Optimizer,
    cfg: &LoopConfig,
    mode: ExecMode,
) -> Result<f64, TensorError> {
    if g.cls_head.is_none() {
        return Err(TensorError::Contract("supervised fine-tuning needs the generator head".into()));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let data: Vec<(TokenSeq, u8)> = samples.iter().map(|s| (TokenSeq::from_ids(s.ids.clone()), s.label)).collect();
    let mut groups = BLOCK_GROUPS.to_vec();
    groups.push("cls_head");
    generator::with_trainable(g, &groups, |g| {
        let mut sum = 0.0;
        let mut n = 0;
        for batch in data.chunks(cfg.finetune_batch) {
            if let Some(l) = generator::cls_train_step(g, batch, opt, mode)? {
                sum += l;
                n += 1;
            }
        }
        Ok(sum / n.max(1) as f64)
    })
}

/// LM training on the label-1 samples only, each followed by `<eot>`.
/// Returns the mean minibatch loss, or `None` when no sample has label 1.
pub fn semi_supervised_finetune(
    g: &mut GeneratorModel,
    samples: &[GeneratedSample],
    opt: &mut Optimizer,
    cfg: &LoopConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Option<f64>, TensorError> {
    let mut fit: Vec<TokenSeq> = samples
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| {
            let mut ids = s.ids.clone();
            if ids.len() < g.dims.max_len {
                ids.push(cfg.eot);
            }
            TokenSeq::from_ids(ids)
        })
        .collect();
    if fit.is_empty() {
        return Ok(None);
    }
    fit.shuffle(&mut rng::seeded(seed));
    let mut groups = BLOCK_GROUPS.to_vec();
    groups.push("lm_head");
    generator::with_trainable(g, &groups, |g| {
        let mut sum = 0.0;
        let mut n = 0;
        for batch in fit.chunks(cfg.lm_batch) {
            if let Some(l) = lm_train_step(g, batch, cfg.window, opt, mode)? {
                sum += l;
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    })
}

/// One generate → label → supervised → semi-supervised round. The
/// discriminator is only read.
#[allow(clippy::too_many_arguments)]
pub fn evotext_iteration(
    g: &mut GeneratorModel,
    d: &DiscriminatorModel,
    pool: &PromptPool,
    vocab: &Vocab,
    cfg: &LoopConfig,
    state: &mut RunState,
    mode: ExecMode,
) -> Result<Vec<GeneratedSample>, TensorError> {
    let it = state.iteration as u64;
    let base = derive_seed(derive_seed_str(cfg.seed, "loop"), it);
    let prompts = pool.draw(cfg.minibatch, derive_seed(base, 0));
    let samples = build_training_dataset(g, d, &prompts, vocab, cfg, derive_seed(base, 1), mode)?;
    let supervised_loss = if cfg.ablation.skip_supervised {
        None
    } else {
        Some(supervised_finetune(g, &samples, &mut state.supervised_opt, cfg, mode)?)
    };
    let lm_loss = if cfg.ablation.skip_semisupervised {
        None
    } else {
        semi_supervised_finetune(g, &samples, &mut state.semi_opt, cfg, derive_seed(base, 2), mode)?
    };
    let ones = samples.iter().filter(|s| s.label == 1).count();
    state.records.push(IterationRecord {
        iteration: state.iteration,
        supervised_loss,
        lm_loss,
        label1_fraction: ones as f64 / samples.len() as f64,
        timestamp: state.clock(),
    });
    state.iteration += 1;
    Ok(samples)
}

/// Runs `cfg.iterations` loop iterations, logging each record.
pub fn run_loop(
    g: &mut GeneratorModel,
    d: &DiscriminatorModel,
    pool: &PromptPool,
    vocab: &Vocab,
    cfg: &LoopConfig,
    state: &mut RunState,
    mode: ExecMode,
) -> Result<(), TensorError> {
    for _ in 0..cfg.iterations {
        evotext_iteration(g, d, pool, vocab, cfg, state, mode)?;
        let r = state.records.last().expect("just pushed");
        log::info!(
            "iteration {} label1={:.3} sup={:?} lm={:?}",
            r.iteration,
            r.label1_fraction,
            r.supervised_loss,
            r.lm_loss
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Self-escalation

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EscalationReport {
    pub mlm_losses: Vec<f64>,
    /// Raw generations, before masking.
    pub raw: Vec<Vec<usize>>,
    /// Filled sequences as fed to fine-tuning, parallel to `raw`.
    pub fed: Vec<GeneratedSample>,
    pub masked_positions: Vec<Vec<usize>>,
}

/// Retrains the discriminator's MLM on the new corpus, then for each round
/// generates from the cue prompts, masks, lets the discriminator fill, and
/// fine-tunes the generator on the completions labeled 1.
#[allow(clippy::too_many_arguments)]
pub fn self_escalation(
    g: &mut GeneratorModel,
    d: &mut DiscriminatorModel,
    new_corpus: &[TokenSeq],
    cues: &[Vec<usize>],
    vocab: &Vocab,
    cfg: &LoopConfig,
    mode: ExecMode,
) -> Result<EscalationReport, TensorError> {
    if new_corpus.is_empty() {
        return Err(TensorError::Contract("escalation needs a non-empty corpus".into()));
    }
    if cues.is_empty() {
        return Err(TensorError::Contract("escalation needs cue prompts".into()));
    }
    let root = derive_seed_str(cfg.seed, "escalate");
    let mut report = EscalationReport::default();
    let mut opt_d = Optimizer::adam(cfg.tau_d_escalate);
    for epoch in 0..cfg.escalation_mlm_epochs {
        let es = derive_seed(derive_seed(root, 0), epoch as u64);
        let mut order: Vec<usize> = (0..new_corpus.len()).collect();
        order.shuffle(&mut rng::seeded(es));
        let mut sum = 0.0;
        let mut n = 0;
        for (b, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let batch: Vec<TokenSeq> = chunk.iter().map(|&i| new_corpus[i].clone()).collect();
            sum += mlm_pretrain_step(d, &batch, 0.15, &mut opt_d, derive_seed(es, b as u64 + 1), mode)?;
            n += 1;
        }
        report.mlm_losses.push(sum / n.max(1) as f64);
    }

    let mut sup_opt = Optimizer::adam(cfg.tau_g_escalate);
    let mut semi_opt = Optimizer::adam(cfg.tau_g_escalate);
    for round in 0..cfg.escalation_rounds {
        let rs = derive_seed(derive_seed(root, 1), round as u64);
        let prompts: Vec<Vec<usize>> = (0..cfg.minibatch).map(|i| cues[i % cues.len()].clone()).collect();
        let raw: Vec<TokenSeq> = parallel::map(mode, &prompts, |i, p| {
            generate(g, p, &cfg.generation(derive_seed(derive_seed(rs, 1), i as u64)))
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        let d_ref = &*d;
        let fed: Vec<(GeneratedSample, Vec<usize>)> = parallel::map(mode, &raw, |i, seq| {
            let (masked, pos) = mask_tokens(seq, cfg.mask_p, derive_seed(derive_seed(rs, 2), i as u64));
            let filled = mlm_fill(d_ref, &masked, &pos)?;
            Ok((
                GeneratedSample {
                    prompt: decode_ids(&prompts[i], vocab),
                    text: decode_ids(&filled.ids, vocab),
                    ids: filled.ids,
                    label: 1,
                    prob: 1.0,
                },
                pos,
            ))
        })
        .into_iter()
        .collect::<Result<_, TensorError>>()?;
        let (samples, positions): (Vec<_>, Vec<_>) = fed.into_iter().unzip();
        supervised_finetune(g, &samples, &mut sup_opt, cfg, mode)?;
        semi_supervised_finetune(g, &samples, &mut semi_opt, cfg, derive_seed(rs, 3), mode)?;
        report.raw.extend(raw.into_iter().map(|s| s.ids));
        report.fed.extend(samples);
        report.masked_positions.extend(positions);
    }
    Ok(report)
}
