//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use evotext::discriminator::{classify, mlm_fill, priori_finetune, DiscriminatorModel};
use evotext::evo::{
    evotext_iteration, priori_learning, self_escalation, semi_supervised_finetune, GeneratedSample, LoopConfig, RunState,
};
use evotext::experiment::{prepare, ExperimentConfig};
use evotext::generator::{lm_forward, next_token_logits, sequence_log_prob, GeneratorModel};
use evotext::metrics::{accuracy, bits_per_char, perplexity, ConfusionCounts};
use evotext::nn::{ModelDims, Params};
use evotext::parallel::ExecMode;
use evotext::rng::{self, RngExt};
use evotext::tensor::gradcheck::{check_op, suite, INSTANCES, TOL};
use evotext::tensor::{log_softmax, Tensor};
use evotext::text::{encode_lm, load_lines, mask_tokens, preprocess_text, TokenSeq, TokenizerMode, Vocab, RESERVED};
use evotext_cli::repro::{self, ReproOutcome};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const SEQ: ExecMode = ExecMode::Sequential;
const REPRO_SEED: u64 = 7;

fn dims(vocab: usize, d_model: usize, layers: usize, max_len: usize) -> ModelDims {
    ModelDims {
        vocab,
        d_model,
        heads: 2,
        layers,
        max_len,
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Predicts `softmax(log_probs)` at every position, whatever the context.
fn constant_model(log_probs: &[f64]) -> GeneratorModel {
    let d = 8;
    let mut g = GeneratorModel::new(dims(log_probs.len(), d, 0, 40), 0).expect("valid dims");
    g.ln_f.gain.data_mut().fill(0.0);
    g.ln_f.bias.data_mut().fill(0.0);
    g.ln_f.bias.data_mut()[0] = 1.0;
    let mut w = Tensor::zeros(&[d, log_probs.len()]);
    w.data_mut()[..log_probs.len()].copy_from_slice(log_probs);
    g.lm_head = w;
    g
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let ops = suite();
    let mut worst: f64 = 0.0;
    for op in &ops {
        let e = check_op(op).map_err(err)?;
        ensure!(e < TOL, "{}: relative error {e:e}", op.name);
        worst = worst.max(e);
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:.1?}");
    Ok(format!("{} ops x {INSTANCES} instances, worst {worst:.1e}, {t:.1?}", ops.len()))
}

fn joint_consistency() -> Verdict {
    // Length-3 sequences; the first token is the conditioning context.
    let g = GeneratorModel::new(dims(3, 4, 2, 3), 21).map_err(err)?;
    let mut worst_sum: f64 = 0.0;
    let mut worst_seq: f64 = 0.0;
    for first in 0..3 {
        let mut total = 0.0;
        for code in 0..9 {
            let seq = [first, code / 3, code % 3];
            let mut p = 1.0;
            for k in 1..3 {
                p *= log_softmax(&next_token_logits(&g, &seq[..k]).map_err(err)?)[seq[k]].exp();
            }
            let lp = sequence_log_prob(&g, &seq).map_err(err)?.exp();
            worst_seq = worst_seq.max((lp - p).abs());
            total += lp;
        }
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    ensure!(worst_sum <= 1e-8, "joint sums off by {worst_sum:e}");
    ensure!(worst_seq <= 1e-10, "sequence probability off by {worst_seq:e}");
    Ok(format!("sum error {worst_sum:.1e}, per-sequence error {worst_seq:.1e}"))
}

fn causality() -> Verdict {
    let max_len = 12;
    let v = 9;
    let g = GeneratorModel::new(dims(v, 8, 2, max_len), 17).map_err(err)?;
    let mut r = rng::seeded(99);
    for trial in 0..1000 {
        let n = r.gen_range(2..=max_len);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(1..v)).collect();
        let t = r.gen_range(0..n - 1);
        let mut changed = ids.clone();
        for id in changed.iter_mut().skip(t + 1) {
            *id = r.gen_range(1..v);
        }
        let a = lm_forward(&g, &TokenSeq::from_ids(ids)).map_err(err)?;
        let b = lm_forward(&g, &TokenSeq::from_ids(changed)).map_err(err)?;
        let prefix = |x: &Tensor| x.data()[..(t + 1) * v].iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        ensure!(prefix(&a) == prefix(&b), "decoder trial {trial}: logits at t={t} moved");
    }

    // A discriminator trained to separate {4,5} from {6,7} sequences.
    let mut d = DiscriminatorModel::new(dims(8, 16, 2, 12), 6).map_err(err)?;
    let mut r = rng::seeded(2);
    let data: Vec<(TokenSeq, u8)> = (0..120)
        .map(|i| {
            let base = if i % 2 == 1 { 4 } else { 6 };
            let len = r.gen_range(3..10);
            (TokenSeq::from_ids((0..len).map(|_| base + r.gen_range(0..2)).collect()), (i % 2) as u8)
        })
        .collect();
    priori_finetune(&mut d, &data, &[], 1e-3, 3, 16, 0, SEQ).map_err(err)?;
    let mut r = rng::seeded(3);
    let mut found = 0;
    for _ in 0..50 {
        let n = r.gen_range(2..10);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(4..8)).collect();
        let mut flipped = ids.clone();
        flipped[n - 1] = if ids[n - 1] == 4 { 7 } else { 4 };
        let p = |ids: Vec<usize>| classify(&d, &TokenSeq::from_ids(ids)).map(|x| x.1.to_bits());
        found += usize::from(p(ids).map_err(err)? != p(flipped).map_err(err)?);
    }
    ensure!(found >= 1, "no encoder counterexample");
    Ok(format!("1000 decoder trials bit-identical; {found}/50 encoder counterexamples"))
}

fn metric_identities() -> Verdict {
    let v = 16;
    let uniform = constant_model(&vec![0.0; v]);
    let corpus: Vec<TokenSeq> = [vec![4, 5, 6, 7], vec![9, 15], vec![3, 3, 3, 3, 3]]
        .into_iter()
        .map(TokenSeq::from_ids)
        .collect();
    let ppl = perplexity(&uniform, &corpus).map_err(err)?;
    ensure!((ppl - v as f64).abs() <= 1e-9, "uniform PPL {ppl}");

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..60).map(|i| char::from_u32(0x100 + i).expect("valid char").to_string()));
    let chars = Vocab::from_tokens(TokenizerMode::Char, tokens).map_err(err)?;
    let cv = chars.len();
    let text: String = (0..30).map(|i| char::from_u32(0x100 + (i * 7 % 60)).expect("valid char")).collect();
    let half: String = text.chars().take(15).collect();
    let char_corpus = vec![encode_lm(&text, &chars, 40), encode_lm(&half, &chars, 40)];
    let bpc = bits_per_char(&constant_model(&vec![0.0; cv]), &chars, &char_corpus).map_err(err)?;
    ensure!((bpc - (cv as f64).log2()).abs() <= 1e-9, "uniform BPC {bpc}");

    let c = |tp, tn, fp, fn_| ConfusionCounts { tp, tn, fp, fn_ };
    for (counts, want) in [(c(2, 2, 1, 0), 0.8), (c(3, 2, 1, 4), 0.5), (c(7, 0, 0, 0), 1.0), (c(1, 0, 0, 3), 0.25)] {
        let a = accuracy(&counts).map_err(err)?;
        ensure!(a == want, "accuracy {a} for {counts:?}");
    }

    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let g = GeneratorModel::new(dims(cv, 8, 1, 40), seed).map_err(err)?;
        let b = bits_per_char(&g, &chars, &char_corpus).map_err(err)?;
        let p = perplexity(&g, &char_corpus).map_err(err)?;
        worst = worst.max((b - p.log2()).abs());
    }
    ensure!(worst <= 1e-9, "BPC vs log2 PPL off by {worst:e}");
    Ok(format!("PPL {ppl}, BPC {bpc:.6} = log2 {cv}, BPC/PPL gap {worst:.1e}"))
}

fn preprocessing() -> Verdict {
    let text = std::fs::read_to_string(fixture("preprocess_pairs.tsv")).map_err(err)?;
    let mut pairs = 0;
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (raw, want) = line.split_once('\t').ok_or("pair without a tab")?;
        let got = preprocess_text(raw);
        ensure!(got == want, "{raw:?} gave {got:?}, want {want:?}");
        pairs += 1;
    }
    ensure!(pairs == 10, "{pairs} pairs");
    let lines = load_lines(&fixture("raw_corpus.txt")).map_err(err)?;
    for l in &lines {
        let once = preprocess_text(l);
        ensure!(preprocess_text(&once) == once, "not idempotent on {l:?}");
    }
    Ok(format!("{pairs} reference pairs exact, idempotent over {} lines", lines.len()))
}

fn stage_isolation() -> Verdict {
    let cfg = ExperimentConfig {
        corpus_sentences: 300,
        labeled_size: 200,
        new_sentences: 50,
        max_len: 16,
        ..ExperimentConfig::default()
    };
    let prep = prepare(&cfg).map_err(err)?;
    let v = prep.vocab.len();
    let mut g = GeneratorModel::new(dims(v, 16, 2, 16), 1).map_err(err)?;
    g.attach_cls_head(2);
    let mut d = DiscriminatorModel::new(dims(v, 16, 1, 16), 3).map_err(err)?;
    let lc = LoopConfig {
        epochs: 2,
        minibatch: 16,
        finetune_batch: 8,
        lm_batch: 4,
        window: 16,
        max_new_tokens: 8,
        ..LoopConfig::default()
    };
    let blocks = g.blocks_hash();
    priori_learning(&mut d, &mut g, &prep.labeled.train, &[], &lc, SEQ).map_err(err)?;
    ensure!(g.blocks_hash() == blocks, "priori learning moved the generator blocks");

    let d_hash = d.param_hash();
    let mut state = RunState::new(&lc);
    let mut generated: Vec<GeneratedSample> = Vec::new();
    for _ in 0..3 {
        generated.extend(evotext_iteration(&mut g, &d, &prep.pool, &prep.vocab, &lc, &mut state, SEQ).map_err(err)?);
    }
    ensure!(d.param_hash() == d_hash, "iterations moved the discriminator");

    let mut mixed = generated.clone();
    for (i, s) in mixed.iter_mut().enumerate() {
        s.label = u8::from(i % 3 != 0);
    }
    let ones: Vec<GeneratedSample> = mixed.iter().filter(|s| s.label == 1).cloned().collect();
    let (mut a, mut b) = (g.clone(), g.clone());
    let la = semi_supervised_finetune(&mut a, &mixed, &mut evotext::tensor::Optimizer::adam(1e-3), &lc, 5, SEQ).map_err(err)?;
    let lb = semi_supervised_finetune(&mut b, &ones, &mut evotext::tensor::Optimizer::adam(1e-3), &lc, 5, SEQ).map_err(err)?;
    ensure!(la.map(f64::to_bits) == lb.map(f64::to_bits), "losses differ");
    ensure!(a.param_hash() == b.param_hash(), "deleting label-0 samples changed the result");
    Ok(format!("blocks, discriminator and label-0 deletion all bit-identical ({} generated samples)", generated.len()))
}

fn masking_contract() -> Verdict {
    let mut r = rng::seeded(4);
    let mut masked = 0usize;
    let mut total = 0usize;
    let mut seed = 0;
    while total < 10_000 {
        let n = 50.min(10_000 - total);
        let seq = TokenSeq::from_ids((0..n).map(|_| r.gen_range(4..20)).collect());
        masked += mask_tokens(&seq, 0.15, seed).1.len();
        total += n;
        seed += 1;
    }
    let sigma = (10_000.0f64 * 0.15 * 0.85).sqrt();
    ensure!((masked as f64 - 1500.0).abs() <= 3.0 * sigma, "{masked} masked, 3σ = {:.1}", 3.0 * sigma);

    let d = DiscriminatorModel::new(dims(20, 16, 1, 24), 8).map_err(err)?;
    for s in 0..100 {
        let seq = TokenSeq::from_ids((0..r.gen_range(2..24)).map(|_| r.gen_range(4..20)).collect());
        let (m, pos) = mask_tokens(&seq, 0.3, s);
        let filled = mlm_fill(&d, &m, &pos).map_err(err)?;
        for i in 0..seq.len() {
            ensure!(pos.contains(&i) || filled.ids[i] == seq.ids[i], "fill moved unmasked position {i}");
        }
    }

    let cfg = ExperimentConfig {
        corpus_sentences: 100,
        labeled_size: 50,
        new_sentences: 60,
        max_len: 16,
        ..ExperimentConfig::default()
    };
    let prep = prepare(&cfg).map_err(err)?;
    let v = prep.vocab.len();
    let mut g = GeneratorModel::new(dims(v, 16, 1, 16), 1).map_err(err)?;
    g.attach_cls_head(2);
    let mut d = DiscriminatorModel::new(dims(v, 16, 1, 16), 3).map_err(err)?;
    let lc = LoopConfig {
        minibatch: 16,
        finetune_batch: 8,
        lm_batch: 4,
        window: 16,
        max_new_tokens: 8,
        escalation_rounds: 2,
        escalation_mlm_epochs: 1,
        ..LoopConfig::default()
    };
    let report = self_escalation(&mut g, &mut d, &prep.new.train, &prep.cues, &prep.vocab, &lc, SEQ).map_err(err)?;
    ensure!(!report.fed.is_empty() && report.fed.iter().all(|s| s.label == 1), "escalation fed a label other than 1");
    Ok(format!("{masked}/10000 masked (3σ = {:.0}), fills local, {} fed samples all label 1", 3.0 * sigma, report.fed.len()))
}

fn end_to_end(cfg: &ExperimentConfig, o: &ReproOutcome) -> Verdict {
    let s = &o.summary;
    let prep = prepare(cfg).map_err(err)?;
    let (train, vocab, labeled) = (prep.old.train.len(), prep.vocab.len(), cfg.labeled_size);
    ensure!((4500..=5500).contains(&train), "{train} training sentences");
    ensure!(vocab <= 200, "vocabulary {vocab}");
    ensure!(cfg.loop_cfg.iterations == 156 && cfg.eval_samples == 500, "budget differs");
    let full = s.variant("full").ok_or("no full variant")?;
    ensure!(full.d_accuracy >= 0.9, "discriminator held-out accuracy {:.3}", full.d_accuracy);
    let gain = full.grammaticality_gain();
    ensure!(gain >= 0.05, "grammaticality gain {:+.1}pp", 100.0 * gain);
    let dppl = full.ppl_change();
    ensure!(dppl <= 0.02, "PPL worsened by {:.2}%", 100.0 * dppl);
    let t = o.timings.full_variant;
    ensure!(t < Duration::from_secs(15 * 60), "took {t:.1?}");
    Ok(format!(
        "{train} train sentences, vocab {vocab}, {labeled} labeled; D acc {:.3}; grammaticality {:.3} -> {:.3} ({:+.1}pp); PPL {:+.2}%; {t:.0?}",
        full.d_accuracy,
        full.before.grammaticality,
        full.after.grammaticality,
        100.0 * gain,
        100.0 * dppl
    ))
}

fn escalation(o: &ReproOutcome) -> Verdict {
    let e = &o.summary.escalation;
    ensure!(e.all_label_one && e.fed > 0, "fed samples not all label 1");
    ensure!(e.after.ppl_new < e.before.ppl_new, "new-domain PPL {:.2} -> {:.2}", e.before.ppl_new, e.after.ppl_new);
    let old = e.after.ppl_old / e.before.ppl_old - 1.0;
    ensure!(old < 0.05, "old-domain PPL worsened by {:.2}%", 100.0 * old);
    let t = o.timings.escalation;
    ensure!(t < Duration::from_secs(5 * 60), "took {t:.1?}");
    Ok(format!(
        "new-domain PPL {:.2} -> {:.2}; old-domain {:+.2}%; {t:.0?}",
        e.before.ppl_new,
        e.after.ppl_new,
        100.0 * old
    ))
}

fn ablations(o: &ReproOutcome, out: &Path) -> Verdict {
    let s = &o.summary;
    let full = s.variant("full").ok_or("no full variant")?.after.grammaticality;
    let names = ["remove_d_pretraining", "remove_g_warmup", "remove_supervised", "remove_semisupervised"];
    let mut rows = Vec::new();
    for n in names {
        rows.push((n, s.variant(n).ok_or(format!("no {n} variant"))?.after.grammaticality));
    }
    let listing = rows.iter().map(|(n, g)| format!("{n} {g:.3}")).collect::<Vec<_>>().join(", ");
    let table = std::fs::read_to_string(out.join("ablation.txt")).map_err(err)?;
    ensure!(names.iter().all(|n| table.contains(n)), "ablation table incomplete");
    for (n, g) in &rows {
        ensure!(*g <= full, "{n} {g:.3} exceeds full {full:.3} ({listing})");
    }
    let sup = rows[2].1;
    let (worst, lowest) = rows.iter().fold(("", f64::INFINITY), |acc, (n, g)| if *g < acc.1 { (n, *g) } else { acc });
    ensure!(sup <= lowest, "largest drop is {worst}, not remove_supervised (full {full:.3}; {listing})");
    Ok(format!("full {full:.3}; {listing}"))
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable output dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).expect("readable output file");
                out.insert(p.strip_prefix(dir).expect("inside dir").to_path_buf(), bytes);
            }
        }
    }
    out
}

fn reproducibility(first: &Path, second: &Path) -> Verdict {
    let status = Command::new(env!("CARGO_BIN_EXE_evotext"))
        .args(["--out", second.to_str().ok_or("non-UTF-8 path")?, "repro", "--seed", &REPRO_SEED.to_string()])
        .status()
        .map_err(err)?;
    ensure!(status.success(), "second repro run exited with {status}");
    let (a, b) = (files(first), files(second));
    ensure!(a.keys().eq(b.keys()), "file sets differ: {:?} vs {:?}", a.keys(), b.keys());
    for (name, bytes) in &a {
        ensure!(b[name] == *bytes, "{} differs", name.display());
    }
    let ckpts = a.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    ensure!(ckpts >= 2, "no final checkpoints");
    Ok(format!("{} files byte-identical, {ckpts} checkpoints", a.len()))
}

fn main() -> ExitCode {
    // Extra arguments from `cargo test` (filters, --nocapture) are ignored;
    // the suite always runs in full.
    let _ = env_logger::builder().is_test(true).try_init();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let tag = if v.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &v {
            Ok(s) | Err(s) => s,
        };
        println!("criterion {n:>2} {name}: {tag} ({detail})");
        results.push((n, name, v));
    };

    record(1, "gradient suite", &mut gradient_suite);
    record(2, "joint distribution consistency", &mut joint_consistency);
    record(3, "causality", &mut causality);
    record(4, "metric identities", &mut metric_identities);
    record(5, "preprocessing", &mut preprocessing);
    record(6, "stage isolation", &mut stage_isolation);
    record(7, "masking contract", &mut masking_contract);

    let dir = tempfile::tempdir().expect("temp dir");
    let first = dir.path().join("first");
    let cfg = repro::seeded_config(&ExperimentConfig::default(), REPRO_SEED);
    let invocation = format!("evotext repro --seed {REPRO_SEED}");
    println!("running the experiment matrix (seed {REPRO_SEED}) ...");
    match repro::run(&cfg, &first, ExecMode::default(), &invocation) {
        Ok(outcome) => {
            print!("{}", repro::ablation_table(&outcome.summary));
            print!("{}", repro::escalation_table(&outcome.summary));
            record(8, "end-to-end improvement", &mut || end_to_end(&cfg, &outcome));
            record(9, "self-escalation", &mut || escalation(&outcome));
            record(10, "ablations", &mut || ablations(&outcome, &first));
            record(11, "reproducibility", &mut || reproducibility(&first, &dir.path().join("second")));
        }
        Err(e) => {
            for (n, name) in [(8, "end-to-end improvement"), (9, "self-escalation"), (10, "ablations"), (11, "reproducibility")] {
                record(n, name, &mut || Err(format!("repro failed: {e:#}")));
            }
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
