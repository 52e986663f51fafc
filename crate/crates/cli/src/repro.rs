//! The desk-scale experiment matrix: pretraining, every ablation variant,
//! then escalation of the full variant onto the new domain.
//!
//! Everything written is a function of the config alone. Wall-clock
//! timings are returned to the caller but never written.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use evotext::config;
use evotext::evo::Ablation;
use evotext::experiment::{self, ExperimentConfig, GeneratorEval};
use evotext::parallel::ExecMode;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, Model};
use crate::write_effective_config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub ablation: Ablation,
    pub d_accuracy: f64,
    pub before: GeneratorEval,
    pub after: GeneratorEval,
}

impl VariantRow {
    pub fn grammaticality_gain(&self) -> f64 {
        self.after.grammaticality - self.before.grammaticality
    }

    /// Relative change of old-domain test perplexity.
    pub fn ppl_change(&self) -> f64 {
        self.after.ppl_old / self.before.ppl_old - 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscalationRow {
    pub before: GeneratorEval,
    pub after: GeneratorEval,
    pub mlm_losses: Vec<f64>,
    pub fed: usize,
    pub all_label_one: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub seed: u64,
    pub config_fingerprint: String,
    pub g_pretrain_loss: Vec<f64>,
    pub d_pretrain_loss: Vec<f64>,
    pub baseline: GeneratorEval,
    pub variants: Vec<VariantRow>,
    pub escalation: EscalationRow,
}

impl ReproSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantRow> {
        self.variants.iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Timings {
    pub pretrain: Duration,
    /// Pretraining, priori learning, and the full variant's loop and
    /// evaluation: the cost of that variant on its own.
    pub full_variant: Duration,
    pub matrix: Duration,
    pub escalation: Duration,
}

pub struct ReproOutcome {
    pub summary: ReproSummary,
    pub timings: Timings,
}

/// Applies `--seed`: both the data seed and the loop seed.
pub fn seeded_config(base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.loop_cfg.seed = seed;
    cfg
}

pub fn ablation_table(s: &ReproSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<24} {:>8} {:>10} {:>10} {:>9} {:>10} {:>10} {:>9}",
        "variant", "d_acc", "gram_pre", "gram_post", "delta", "ppl_pre", "ppl_post", "ppl_chg"
    );
    for v in &s.variants {
        let _ = writeln!(
            t,
            "{:<24} {:>8.4} {:>10.4} {:>10.4} {:>+9.4} {:>10.4} {:>10.4} {:>+8.2}%",
            v.name,
            v.d_accuracy,
            v.before.grammaticality,
            v.after.grammaticality,
            v.grammaticality_gain(),
            v.before.ppl_old,
            v.after.ppl_old,
            100.0 * v.ppl_change()
        );
    }
    t
}

pub fn escalation_table(s: &ReproSummary) -> String {
    let e = &s.escalation;
    let mut t = String::new();
    let _ = writeln!(t, "{:<10} {:>12} {:>12}", "stage", "ppl_old", "ppl_new");
    let _ = writeln!(t, "{:<10} {:>12.4} {:>12.4}", "before", e.before.ppl_old, e.before.ppl_new);
    let _ = writeln!(t, "{:<10} {:>12.4} {:>12.4}", "after", e.after.ppl_old, e.after.ppl_new);
    let _ = writeln!(
        t,
        "old-domain change {:+.2}%, new-domain change {:+.2}%, {} samples fed",
        100.0 * (e.after.ppl_old / e.before.ppl_old - 1.0),
        100.0 * (e.after.ppl_new / e.before.ppl_new - 1.0),
        e.fed
    );
    t
}

/// Runs the matrix and writes the effective config, per-variant logs,
/// tables, a JSON summary and the final checkpoints into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path, mode: ExecMode, invocation: &str) -> Result<ReproOutcome> {
    fs::create_dir_all(out.join("logs")).with_context(|| format!("creating {}", out.display()))?;
    write_effective_config(out, cfg, invocation)?;
    let fingerprint = config::fingerprint(cfg);
    let mut timings = Timings::default();

    let t = Instant::now();
    let prep = experiment::prepare(cfg)?;
    let pre = experiment::pretrain(&prep, cfg, mode)?;
    let baseline = experiment::evaluate_generator(&pre.g, &prep, cfg, mode)?;
    timings.pretrain = t.elapsed();
    log::info!("pretraining done in {:.1?}: {baseline:?}", timings.pretrain);

    let t = Instant::now();
    let matrix = experiment::run_matrix(&pre, &prep, cfg, &baseline, mode)?;
    timings.matrix = t.elapsed();

    let mut variants = Vec::new();
    let mut full = None;
    for ((r, g, d), elapsed) in matrix.variants.into_iter().zip(matrix.variant_elapsed) {
        fs::write(out.join("logs").join(format!("{}.jsonl", r.name)), &r.log)?;
        variants.push(VariantRow {
            name: r.name.clone(),
            ablation: r.ablation,
            d_accuracy: r.d_accuracy,
            before: r.before.clone(),
            after: r.after.clone(),
        });
        if r.name == "full" {
            timings.full_variant = timings.pretrain + matrix.priori_elapsed + elapsed;
            full = Some((g, d));
        }
    }
    let (mut g, mut d) = full.context("the matrix has no full variant")?;
    let ck = |model: Model| Checkpoint {
        model,
        vocab: prep.vocab.clone(),
        optimizer: None,
        config_fingerprint: fingerprint.clone(),
    };
    save_checkpoint(&ck(Model::Generator(g.clone())), &out.join("generator.loop.ckpt"))?;
    save_checkpoint(&ck(Model::Discriminator(d.clone())), &out.join("discriminator.priori.ckpt"))?;

    let t = Instant::now();
    let esc = experiment::run_escalation(&mut g, &mut d, &prep, cfg, mode)?;
    timings.escalation = t.elapsed();
    save_checkpoint(&ck(Model::Generator(g)), &out.join("generator.ckpt"))?;
    save_checkpoint(&ck(Model::Discriminator(d)), &out.join("discriminator.ckpt"))?;

    let summary = ReproSummary {
        seed: cfg.seed,
        config_fingerprint: fingerprint,
        g_pretrain_loss: pre.g_history.clone(),
        d_pretrain_loss: pre.d_history.clone(),
        baseline,
        variants,
        escalation: EscalationRow {
            before: esc.before.clone(),
            after: esc.after.clone(),
            mlm_losses: esc.report.mlm_losses.clone(),
            fed: esc.report.fed.len(),
            all_label_one: esc.report.fed.iter().all(|s| s.label == 1),
        },
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(out.join("ablation.txt"), ablation_table(&summary))?;
    fs::write(out.join("escalation.txt"), escalation_table(&summary))?;
    let samples: String = esc
        .report
        .fed
        .iter()
        .map(|s| serde_json::to_string(s).map(|l| l + "\n"))
        .collect::<Result<_, _>>()?;
    fs::write(out.join("escalation_samples.jsonl"), samples)?;
    Ok(ReproOutcome { summary, timings })
}
