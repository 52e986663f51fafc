use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use evotext::config;
use evotext::discriminator::DiscriminatorModel;
use evotext::evo::{priori_learning, run_loop, self_escalation, PromptPool, RunState};
use evotext::experiment::{encode_unpadded, lm_form, pretrain_discriminator, pretrain_generator, ExperimentConfig};
use evotext::generator::{generate, GenerationConfig, GeneratorModel, Strategy};
use evotext::metrics::{zero_shot_report, ClozeItem, EvalDataset};
use evotext::nn::ModelDims;
use evotext::parallel::ExecMode;
use evotext::rng::{derive_seed, derive_seed_str};
use evotext::text::{build_vocab, decode_ids, load_labeled_tsv, load_lines, preprocess_text, TokenSeq, TokenizerMode, Vocab};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::{repro, write_effective_config, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "evotext", version, about = "Generator/discriminator co-training for micro transformer language models")]
pub struct Cli {
    /// Output directory; defaults to $EVOTEXT_OUT, then ./evotext-out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base configuration file of key=value lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, e.g. --set loop_cfg.tau4=2e-5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Execution mode for batch work.
    #[arg(long, global = true, default_value_t = ExecMode::default())]
    pub exec: ExecMode,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a raw corpus line by line.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to <out>/preprocessed.txt.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Language-model pretraining of a fresh generator.
    PretrainG(PretrainArgs),
    /// Masked-token pretraining of a fresh discriminator.
    PretrainD(PretrainArgs),
    /// Discriminator fine-tuning and generator head warm-up on labeled data.
    Priori {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        discriminator: PathBuf,
        /// Labeled TSV: text<TAB>label.
        #[arg(long)]
        labeled: PathBuf,
        /// Held-out labeled TSV for the per-epoch losses.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        skip_d_pretrain: bool,
        #[arg(long)]
        skip_warmup: bool,
    },
    /// Generate, label and fine-tune iterations.
    Loop {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        discriminator: PathBuf,
        /// Corpus whose most frequent sentence-initial tokens are the prompts.
        #[arg(long)]
        prompts_from: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        skip_supervised: bool,
        #[arg(long)]
        skip_semisupervised: bool,
    },
    /// Retrain the discriminator on a new corpus and feed filled
    /// generations back to the generator.
    Escalate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        discriminator: PathBuf,
        #[arg(long)]
        new_corpus: PathBuf,
        /// Cue words; defaults to the new corpus's most frequent first words.
        #[arg(long, value_delimiter = ',')]
        cues: Vec<String>,
    },
    /// Zero-shot report over corpus files and cloze sets.
    Eval {
        #[arg(long)]
        generator: PathBuf,
        /// NAME=PATH of a corpus file, one sample per line. Repeatable.
        #[arg(long, value_name = "NAME=PATH")]
        dataset: Vec<String>,
        /// NAME=PATH of a cloze TSV: context<TAB>candidates<TAB>answer.
        #[arg(long, value_name = "NAME=PATH")]
        cloze: Vec<String>,
    },
    /// Batch sampling from a generator.
    Generate {
        #[arg(long)]
        generator: PathBuf,
        /// Prompt text. Repeatable.
        #[arg(long, required = true)]
        prompt: Vec<String>,
        /// Samples per prompt.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value = "temperature")]
        strategy: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// The full synthetic experiment matrix with its report tables.
    Repro {
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Existing vocabulary file; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

/// Effective configuration of a run: the experiment settings plus the
/// tokenizer mode used for user corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tokenizer: TokenizerMode,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerMode::Word,
            experiment: ExperimentConfig::default(),
        }
    }
}

pub fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("evotext-out"))
}

/// Base config, then the `--config` file, then `--set` overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg = config::from_kv(&cfg, &text).with_context(|| format!("in config {}", path.display()))?;
    }
    let mut pairs = Vec::new();
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    cfg = config::apply(&cfg, pairs)?;
    cfg.experiment.loop_cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

fn dims(cfg: &ExperimentConfig, vocab: usize, layers: usize) -> ModelDims {
    ModelDims {
        vocab,
        d_model: cfg.d_model,
        heads: cfg.heads,
        layers,
        max_len: cfg.max_len,
    }
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let lines = load_lines(path)?;
    ensure!(!lines.is_empty(), "{}: corpus is empty", path.display());
    Ok(lines)
}

fn encode_all(lines: &[String], vocab: &Vocab, max_len: usize) -> Vec<TokenSeq> {
    lines
        .iter()
        .map(|l| encode_unpadded(l, vocab, max_len))
        .filter(|s| s.real_len() > 0)
        .collect()
}

fn vocab_for(args: &PretrainArgs, lines: &[String], cfg: &RunConfig) -> Result<Vocab> {
    match &args.vocab {
        Some(p) => Ok(Vocab::load(p, cfg.tokenizer)?),
        None => Ok(build_vocab(lines, cfg.tokenizer, cfg.experiment.max_vocab)?),
    }
}

fn load_generator(path: &Path) -> Result<(GeneratorModel, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let g = ck
        .generator()
        .cloned()
        .with_context(|| format!("{} holds a {}, not a generator", path.display(), ck.model.kind_name()))?;
    Ok((g, ck))
}

fn load_discriminator(path: &Path) -> Result<(DiscriminatorModel, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let d = ck
        .discriminator()
        .cloned()
        .with_context(|| format!("{} holds a {}, not a discriminator", path.display(), ck.model.kind_name()))?;
    Ok((d, ck))
}

fn same_vocab(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    ensure!(a.vocab == b.vocab, "generator and discriminator checkpoints use different vocabularies");
    Ok(())
}

fn save(out: &Path, name: &str, model: Model, vocab: &Vocab, optimizer: Option<evotext::tensor::Optimizer>, cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint {
        model,
        vocab: vocab.clone(),
        optimizer,
        config_fingerprint: config::fingerprint(cfg),
    };
    save_checkpoint(&ck, &out.join(name))?;
    Ok(())
}

fn named_path(spec: &str) -> Result<(String, PathBuf)> {
    let (n, p) = spec.split_once('=').with_context(|| format!("{spec:?} is not NAME=PATH"))?;
    Ok((n.to_string(), PathBuf::from(p)))
}

fn tokens(text: &str, vocab: &Vocab) -> Vec<usize> {
    vocab.split(text).iter().map(|t| vocab.id(t)).collect()
}

fn load_cloze(path: &Path, vocab: &Vocab) -> Result<Vec<ClozeItem>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        ensure!(parts.len() == 3, "{}:{}: expected context<TAB>candidates<TAB>answer", path.display(), i + 1);
        let answer = tokens(parts[2], vocab);
        ensure!(answer.len() == 1, "{}:{}: the answer must be a single token", path.display(), i + 1);
        items.push(ClozeItem {
            context: tokens(parts[0], vocab),
            candidates: tokens(parts[1], vocab),
            answer: answer[0],
        });
    }
    Ok(items)
}

/// Runs a parsed command line. `invocation` is recorded in the effective
/// config written beside the outputs.
pub fn run(cli: Cli, invocation: &str) -> Result<()> {
    let out = out_dir(&cli);
    let cfg = resolve_config(&cli)?;
    let mode = cli.exec;
    let ex = &cfg.experiment;
    match &cli.command {
        Command::Preprocess { input, output } => {
            let raw = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let text: String = raw.lines().map(|l| preprocess_text(l) + "\n").collect();
            let target = output.clone().unwrap_or_else(|| out.join("preprocessed.txt"));
            if let Some(dir) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&target, text).with_context(|| format!("writing {}", target.display()))?;
            write_effective_config(&out, &cfg, invocation)?;
        }
        Command::PretrainG(args) => {
            let lines = read_corpus(&args.corpus)?;
            let vocab = vocab_for(args, &lines, &cfg)?;
            let corpus = encode_all(&lines, &vocab, ex.max_len);
            let mut g = GeneratorModel::new(dims(ex, vocab.len(), ex.g_layers), derive_seed_str(ex.seed, "g.init"))?;
            let hist = pretrain_generator(
                &mut g,
                &corpus,
                ex.g_pretrain_epochs,
                ex.g_pretrain_lr,
                ex.g_pretrain_batch,
                derive_seed_str(ex.seed, "g.pretrain"),
                mode,
            )?;
            g.attach_cls_head(derive_seed_str(ex.seed, "g.head"));
            write_effective_config(&out, &cfg, invocation)?;
            vocab.save(&out.join("vocab.txt"))?;
            fs::write(out.join("pretrain-g.jsonl"), history_jsonl(&hist))?;
            save(&out, "generator.ckpt", Model::Generator(g), &vocab, None, &cfg)?;
        }
        Command::PretrainD(args) => {
            let lines = read_corpus(&args.corpus)?;
            let vocab = vocab_for(args, &lines, &cfg)?;
            let corpus = encode_all(&lines, &vocab, ex.max_len);
            let mut d = DiscriminatorModel::new(dims(ex, vocab.len(), ex.d_layers), derive_seed_str(ex.seed, "d.init"))?;
            let hist = pretrain_discriminator(
                &mut d,
                &corpus,
                ex.d_mlm_epochs,
                ex.d_mlm_lr,
                ex.loop_cfg.minibatch,
                derive_seed_str(ex.seed, "d.pretrain"),
                mode,
            )?;
            write_effective_config(&out, &cfg, invocation)?;
            vocab.save(&out.join("vocab.txt"))?;
            fs::write(out.join("pretrain-d.jsonl"), history_jsonl(&hist))?;
            save(&out, "discriminator.ckpt", Model::Discriminator(d), &vocab, None, &cfg)?;
        }
        Command::Priori {
            generator,
            discriminator,
            labeled,
            validation,
            skip_d_pretrain,
            skip_warmup,
        } => {
            let (mut g, gck) = load_generator(generator)?;
            let (mut d, dck) = load_discriminator(discriminator)?;
            same_vocab(&gck, &dck)?;
            let vocab = gck.vocab;
            let read = |p: &Path| -> Result<Vec<(TokenSeq, u8)>> {
                Ok(load_labeled_tsv(p)?
                    .into_iter()
                    .map(|s| (encode_unpadded(&s.text, &vocab, g.dims.max_len), s.label))
                    .filter(|(s, _)| s.real_len() > 0)
                    .collect())
            };
            let data = read(labeled)?;
            ensure!(!data.is_empty(), "{}: no labeled samples", labeled.display());
            let val = match validation {
                Some(p) => read(p)?,
                None => Vec::new(),
            };
            if g.cls_head.is_none() {
                g.attach_cls_head(derive_seed_str(ex.seed, "g.head"));
            }
            let mut lc = ex.loop_cfg.clone();
            lc.ablation.skip_d_pretrain = *skip_d_pretrain;
            lc.ablation.skip_warmup = *skip_warmup;
            let report = priori_learning(&mut d, &mut g, &data, &val, &lc, mode)?;
            write_effective_config(&out, &cfg, invocation)?;
            fs::write(out.join("priori.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            save(&out, "generator.ckpt", Model::Generator(g), &vocab, None, &cfg)?;
            save(&out, "discriminator.ckpt", Model::Discriminator(d), &vocab, None, &cfg)?;
        }
        Command::Loop {
            generator,
            discriminator,
            prompts_from,
            iterations,
            skip_supervised,
            skip_semisupervised,
        } => {
            let (mut g, gck) = load_generator(generator)?;
            let (d, dck) = load_discriminator(discriminator)?;
            same_vocab(&gck, &dck)?;
            let vocab = gck.vocab;
            let prompts = encode_all(&read_corpus(prompts_from)?, &vocab, g.dims.max_len);
            let pool = PromptPool::from_corpus(&prompts, ex.prompt_top);
            let mut lc = ex.loop_cfg.clone();
            if let Some(n) = iterations {
                lc.iterations = *n;
            }
            lc.ablation.skip_supervised = *skip_supervised;
            lc.ablation.skip_semisupervised = *skip_semisupervised;
            if g.cls_head.is_none() && !lc.ablation.skip_supervised && lc.iterations > 0 {
                bail!("{}: supervised fine-tuning needs a generator with a classification head; run priori first", generator.display());
            }
            let mut state = RunState::new(&lc);
            run_loop(&mut g, &d, &pool, &vocab, &lc, &mut state, mode)?;
            let mut eff = cfg.clone();
            eff.experiment.loop_cfg = lc;
            write_effective_config(&out, &eff, invocation)?;
            fs::write(out.join("loop.jsonl"), state.log_jsonl())?;
            save(&out, "generator.ckpt", Model::Generator(g), &vocab, Some(state.semi_opt), &eff)?;
        }
        Command::Escalate {
            generator,
            discriminator,
            new_corpus,
            cues,
        } => {
            let (mut g, gck) = load_generator(generator)?;
            let (mut d, dck) = load_discriminator(discriminator)?;
            same_vocab(&gck, &dck)?;
            let vocab = gck.vocab;
            ensure!(g.cls_head.is_some(), "{}: escalation needs a generator with a classification head", generator.display());
            let corpus = encode_all(&read_corpus(new_corpus)?, &vocab, g.dims.max_len);
            let cue_ids: Vec<Vec<usize>> = if cues.is_empty() {
                PromptPool::from_corpus(&corpus, ex.prompt_top).tokens.iter().map(|&(t, _)| vec![t]).collect()
            } else {
                cues.iter().map(|c| tokens(c, &vocab)).filter(|t| !t.is_empty()).collect()
            };
            let report = self_escalation(&mut g, &mut d, &corpus, &cue_ids, &vocab, &ex.loop_cfg, mode)?;
            write_effective_config(&out, &cfg, invocation)?;
            let fed: String = report
                .fed
                .iter()
                .map(|s| serde_json::to_string(s).map(|l| l + "\n"))
                .collect::<Result<_, _>>()?;
            fs::write(out.join("escalation.jsonl"), fed)?;
            fs::write(out.join("escalation-mlm.jsonl"), history_jsonl(&report.mlm_losses))?;
            save(&out, "generator.ckpt", Model::Generator(g), &vocab, None, &cfg)?;
            save(&out, "discriminator.ckpt", Model::Discriminator(d), &vocab, None, &cfg)?;
        }
        Command::Eval { generator, dataset, cloze } => {
            let (g, ck) = load_generator(generator)?;
            let mut datasets: Vec<EvalDataset> = Vec::new();
            for spec in dataset {
                let (name, path) = named_path(spec)?;
                let sequences = encode_all(&read_corpus(&path)?, &ck.vocab, g.dims.max_len)
                    .iter()
                    .map(|s| lm_form(s, g.dims.max_len))
                    .collect();
                datasets.push(EvalDataset {
                    name,
                    sequences,
                    cloze: Vec::new(),
                });
            }
            for spec in cloze {
                let (name, path) = named_path(spec)?;
                datasets.push(EvalDataset {
                    name,
                    sequences: Vec::new(),
                    cloze: load_cloze(&path, &ck.vocab)?,
                });
            }
            ensure!(!datasets.is_empty(), "eval needs at least one --dataset or --cloze");
            let report = zero_shot_report(&g, &ck.vocab, &datasets, &config::fingerprint(&cfg))?;
            write_effective_config(&out, &cfg, invocation)?;
            fs::write(out.join("report.jsonl"), report.to_jsonl())?;
            fs::write(out.join("report.txt"), report.to_string())?;
            print!("{report}");
        }
        Command::Generate {
            generator,
            prompt,
            n,
            strategy,
            temperature,
            top_k,
            max_new_tokens,
            seed,
        } => {
            let (g, ck) = load_generator(generator)?;
            let strategy = match strategy.as_str() {
                "greedy" => Strategy::Greedy,
                "temperature" => Strategy::Temperature { t: *temperature },
                "top-k" => Strategy::TopK { k: *top_k, t: *temperature },
                other => bail!("unknown strategy {other:?}; expected greedy, temperature or top-k"),
            };
            ensure!(*temperature > 0.0, "temperature must be positive");
            let max_new = max_new_tokens.unwrap_or(ex.loop_cfg.max_new_tokens);
            let mut lines = String::new();
            for (pi, p) in prompt.iter().enumerate() {
                let ids = tokens(p, &ck.vocab);
                ensure!(!ids.is_empty(), "prompt {p:?} has no tokens");
                for k in 0..*n {
                    let gc = GenerationConfig::new(max_new, strategy, derive_seed(derive_seed(*seed, pi as u64), k as u64));
                    let s = generate(&g, &ids, &gc)?;
                    lines.push_str(&format!("{p}\t{}\n", decode_ids(&s.ids, &ck.vocab)));
                }
            }
            write_effective_config(&out, &cfg, invocation)?;
            fs::write(out.join("samples.tsv"), &lines)?;
            print!("{lines}");
        }
        Command::Repro { seed } => {
            let ecfg = match seed {
                Some(s) => repro::seeded_config(ex, *s),
                None => ex.clone(),
            };
            let outcome = repro::run(&ecfg, &out, mode, invocation)?;
            print!("{}", repro::ablation_table(&outcome.summary));
            print!("{}", repro::escalation_table(&outcome.summary));
        }
    }
    Ok(())
}

fn history_jsonl(values: &[f64]) -> String {
    values
        .iter()
        .enumerate()
        .map(|(epoch, loss)| format!("{}\n", serde_json::json!({ "epoch": epoch, "loss": loss })))
        .collect()
}
