//! Perplexity, accuracy, cloze accuracy, bits per character, oracle
//! grammaticality and the zero-shot report.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{next_token_logits, token_log_probs, GeneratorModel};
use crate::grammar::Grammar;
use crate::nn::Params;
use crate::tensor::{log_softmax, TensorError};
use crate::text::{TokenSeq, TokenizerMode, Vocab};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("accuracy is undefined for zero judgments")]
    NoJudgments,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("bits per character needs a character-level model, got {0} mode")]
    UnitMismatch(TokenizerMode),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Counts from `(predicted, actual)` label pairs; 1 is positive.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Self::default();
        for (p, a) in pairs {
            match (p, a) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64, MetricError> {
    match c.total() {
        0 => Err(MetricError::NoJudgments),
        n => Ok((c.tp + c.tn) as f64 / n as f64),
    }
}

fn nll_parts(model: &GeneratorModel, corpus: &[TokenSeq]) -> Result<Vec<Vec<f64>>, MetricError> {
    corpus
        .iter()
        .map(|s| {
            let ids = s.real_ids();
            if ids.len() < 2 {
                return Err(MetricError::Precondition("perplexity needs sequences of length ≥ 2".into()));
            }
            Ok(token_log_probs(model, ids)?)
        })
        .collect()
}

fn exp_mean_nll(lps: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for lp in lps {
        sum -= lp;
        n += 1;
    }
    let ppl = (sum / n as f64).exp();
    if ppl.is_infinite() {
        log::warn!("a token has zero probability; perplexity is infinite");
    }
    ppl
}

/// Token-weighted corpus perplexity: `exp` of the mean negative
/// log-likelihood over every predicted position.
pub fn perplexity(model: &GeneratorModel, corpus: &[TokenSeq]) -> Result<f64, MetricError> {
    if corpus.is_empty() {
        return Err(MetricError::Precondition("empty corpus".into()));
    }
    Ok(exp_mean_nll(nll_parts(model, corpus)?.into_iter().flatten()))
}

/// Per-sentence perplexities `(∏ 1/p)^{1/m}`.
pub fn sentence_perplexities(model: &GeneratorModel, corpus: &[TokenSeq]) -> Result<Vec<f64>, MetricError> {
    Ok(nll_parts(model, corpus)?.into_iter().map(|lps| exp_mean_nll(lps.into_iter())).collect())
}

/// Macro average of [`sentence_perplexities`].
pub fn mean_sentence_perplexity(model: &GeneratorModel, corpus: &[TokenSeq]) -> Result<f64, MetricError> {
    let p = sentence_perplexities(model, corpus)?;
    if p.is_empty() {
        return Err(MetricError::Precondition("empty corpus".into()));
    }
    Ok(p.iter().sum::<f64>() / p.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeItem {
    pub context: Vec<usize>,
    pub candidates: Vec<usize>,
    pub answer: usize,
}

/// Fraction of items whose answer is the most likely continuation among
/// the candidates (lowest id on ties). Candidates share the context, so
/// comparing `log P(c | context)` ranks them exactly as the full sequence
/// log-probability does.
pub fn cloze_accuracy(model: &GeneratorModel, items: &[ClozeItem]) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Precondition("no cloze items".into()));
    }
    let mut correct = 0usize;
    for item in items {
        if item.context.is_empty() {
            return Err(MetricError::Precondition("cloze item with empty context".into()));
        }
        if item.candidates.len() < 2 || !item.candidates.contains(&item.answer) {
            return Err(MetricError::Precondition(
                "cloze candidates must number at least two and include the answer".into(),
            ));
        }
        let lp = log_softmax(&next_token_logits(model, &item.context)?);
        let mut cands = item.candidates.clone();
        cands.sort_unstable();
        let mut best = cands[0];
        for &c in &cands[1..] {
            if lp[c] > lp[best] {
                best = c;
            }
        }
        correct += usize::from(best == item.answer);
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Mean `−log₂ p` over every predicted character.
pub fn bits_per_char(model: &GeneratorModel, vocab: &Vocab, corpus: &[TokenSeq]) -> Result<f64, MetricError> {
    if vocab.mode() != TokenizerMode::Char {
        return Err(MetricError::UnitMismatch(vocab.mode()));
    }
    let lps: Vec<f64> = nll_parts(model, corpus)?.into_iter().flatten().collect();
    if lps.is_empty() {
        return Err(MetricError::Precondition("empty corpus".into()));
    }
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64 / std::f64::consts::LN_2)
}

/// Fraction of samples the grammar accepts.
pub fn oracle_grammaticality<S: AsRef<str>>(samples: &[S], grammar: &Grammar) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let ok = samples.iter().filter(|s| grammar.recognize_str(s.as_ref())).count();
    ok as f64 / samples.len() as f64
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug)]
pub struct EvalDataset {
    pub name: String,
    pub sequences: Vec<TokenSeq>,
    pub cloze: Vec<ClozeItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub name: String,
    pub ppl: Option<f64>,
    pub acc: Option<f64>,
    pub bpc: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub checkpoint_id: String,
    pub entries: Vec<EvalEntry>,
}

/// Evaluates every applicable metric per dataset without touching the
/// model: PPL always, BPC for character vocabularies, cloze accuracy when
/// items are supplied.
pub fn zero_shot_report(
    model: &GeneratorModel,
    vocab: &Vocab,
    datasets: &[EvalDataset],
    config_fingerprint: &str,
) -> Result<EvalReport, MetricError> {
    let before = model.param_hash();
    let mut entries = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let scorable: Vec<TokenSeq> = ds.sequences.iter().filter(|s| s.real_len() >= 2).cloned().collect();
        let ppl = if scorable.is_empty() {
            None
        } else {
            Some(perplexity(model, &scorable)?)
        };
        let bpc = match (vocab.mode(), scorable.is_empty()) {
            (TokenizerMode::Char, false) => Some(bits_per_char(model, vocab, &scorable)?),
            _ => None,
        };
        let acc = if ds.cloze.is_empty() {
            None
        } else {
            Some(cloze_accuracy(model, &ds.cloze)?)
        };
        entries.push(EvalEntry {
            name: ds.name.clone(),
            ppl,
            acc,
            bpc,
            samples: scorable.len().max(ds.cloze.len()),
        });
    }
    debug_assert_eq!(before, model.param_hash());
    Ok(EvalReport {
        config_fingerprint: config_fingerprint.to_string(),
        checkpoint_id: hex(&before),
        entries,
    })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl EvalReport {
    /// One JSON object per entry, each tagged with the fingerprints.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let v = serde_json::json!({
                "config": self.config_fingerprint,
                "checkpoint": self.checkpoint_id,
                "name": e.name,
                "ppl": e.ppl,
                "acc": e.acc,
                "bpc": e.bpc,
                "samples": e.samples,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "{:<20} {:>12} {:>10} {:>10} {:>8}", "dataset", "ppl", "acc", "bpc", "n")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<20} {:>12} {:>10} {:>10} {:>8}",
                e.name,
                cell(e.ppl),
                cell(e.acc),
                cell(e.bpc),
                e.samples
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        let c = |tp, tn, fp, fn_| ConfusionCounts { tp, tn, fp, fn_ };
        assert_eq!(accuracy(&c(2, 2, 1, 0)).unwrap(), 0.8);
        assert_eq!(accuracy(&c(3, 0, 0, 0)).unwrap(), 1.0);
        assert_eq!(accuracy(&c(3, 2, 1, 4)).unwrap(), 0.5);
        assert!(matches!(accuracy(&c(0, 0, 0, 0)), Err(MetricError::NoJudgments)));
        assert_eq!(ConfusionCounts::from_pairs([(1, 1), (0, 1), (1, 0), (0, 0)]), c(1, 1, 1, 1));
    }

    #[test]
    fn grammaticality_fraction() {
        let g = Grammar::parse("S -> a b").unwrap();
        assert_eq!(oracle_grammaticality(&["a b", "a b"], &g), 1.0);
        assert_eq!(oracle_grammaticality(&["a b", ""], &g), 0.5);
    }
}
