use evotext::discriminator::DiscriminatorModel;
use evotext::evo::{
    build_training_dataset, evotext_iteration, priori_learning, run_loop, self_escalation, semi_supervised_finetune,
    supervised_finetune, Ablation, GeneratedSample, LoopConfig, PromptPool, RunState,
};
use evotext::experiment::{prepare, ExperimentConfig, Prepared};
use evotext::generator::{self, lm_train_step, with_trainable, GeneratorModel, BLOCK_GROUPS};
use evotext::nn::{ModelDims, Params};
use evotext::parallel::ExecMode;
use evotext::rng::{self, SliceRandom};
use evotext::tensor::Optimizer;
use evotext::text::{TokenSeq, EOT};

const SEQ: ExecMode = ExecMode::Sequential;

fn tiny_prep() -> Prepared {
    let cfg = ExperimentConfig {
        corpus_sentences: 200,
        labeled_size: 600,
        new_sentences: 60,
        max_words: 10,
        max_len: 16,
        ..ExperimentConfig::default()
    };
    prepare(&cfg).unwrap()
}

fn dims(vocab: usize) -> ModelDims {
    ModelDims {
        vocab,
        d_model: 16,
        heads: 2,
        layers: 1,
        max_len: 16,
    }
}

fn models(prep: &Prepared) -> (GeneratorModel, DiscriminatorModel) {
    let mut g = GeneratorModel::new(dims(prep.vocab.len()), 1).unwrap();
    g.attach_cls_head(2);
    let d = DiscriminatorModel::new(dims(prep.vocab.len()), 3).unwrap();
    (g, d)
}

fn small_cfg() -> LoopConfig {
    LoopConfig {
        epochs: 4,
        minibatch: 16,
        finetune_batch: 8,
        lm_batch: 4,
        max_new_tokens: 8,
        window: 16,
        iterations: 2,
        escalation_rounds: 2,
        escalation_mlm_epochs: 2,
        ..LoopConfig::default()
    }
}

fn samples(prep: &Prepared, labels: &[u8]) -> Vec<GeneratedSample> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let seq = &prep.old.train[i % prep.old.train.len()];
            GeneratedSample {
                prompt: String::new(),
                text: String::new(),
                ids: seq.real_ids().to_vec(),
                label,
                prob: f64::from(label),
            }
        })
        .collect()
}

fn bits(g: &GeneratorModel) -> Vec<u64> {
    let mut out = Vec::new();
    g.visit("", &mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn priori_learning_trains_the_head_only_and_lowers_validation_loss() {
    let prep = tiny_prep();
    let (mut g, mut d) = models(&prep);
    let cfg = LoopConfig {
        tau1: 3e-4,
        ..small_cfg()
    };

    let (g0, d0) = (g.param_hash(), d.param_hash());
    let none = LoopConfig { epochs: 0, ..cfg.clone() };
    let report = priori_learning(&mut d, &mut g, &prep.labeled.train, &prep.labeled.validation, &none, SEQ).unwrap();
    assert!(report.d_val_loss.is_empty() && report.head_val_loss.is_empty());
    assert_eq!((g.param_hash(), d.param_hash()), (g0, d0));

    let blocks = g.blocks_hash();
    let lm_head = g.lm_head.clone();
    let report = priori_learning(&mut d, &mut g, &prep.labeled.train, &prep.labeled.validation, &cfg, SEQ).unwrap();
    assert_eq!(g.blocks_hash(), blocks);
    assert_eq!(g.lm_head, lm_head);
    assert_ne!(d.param_hash(), d0);
    assert_eq!(report.d_val_loss.len(), cfg.epochs);
    assert!(report.d_val_loss.last().unwrap() < &report.d_val_loss[0], "{:?}", report.d_val_loss);
    assert!(report.head_val_loss.last().unwrap() < &report.head_val_loss[0], "{:?}", report.head_val_loss);

    let mut headless = GeneratorModel::new(dims(prep.vocab.len()), 1).unwrap();
    assert!(priori_learning(&mut d, &mut headless, &prep.labeled.train, &[], &cfg, SEQ).is_err());
}

#[test]
fn priori_ablations_leave_their_half_untouched() {
    let prep = tiny_prep();
    let (g0, d0) = models(&prep);
    let mut cfg = small_cfg();
    cfg.epochs = 1;
    cfg.ablation.skip_d_pretrain = true;
    let (mut g, mut d) = (g0.clone(), d0.clone());
    priori_learning(&mut d, &mut g, &prep.labeled.train, &[], &cfg, SEQ).unwrap();
    assert_eq!(d.param_hash(), d0.param_hash());
    assert_ne!(g.param_hash(), g0.param_hash());

    cfg.ablation = Ablation {
        skip_warmup: true,
        ..Ablation::default()
    };
    let (mut g, mut d) = (g0.clone(), d0.clone());
    priori_learning(&mut d, &mut g, &prep.labeled.train, &[], &cfg, SEQ).unwrap();
    assert_eq!(g.param_hash(), g0.param_hash());
    assert_ne!(d.param_hash(), d0.param_hash());
}

#[test]
fn training_dataset_has_one_labeled_sample_per_prompt() {
    let prep = tiny_prep();
    let (g, mut d) = models(&prep);
    let cfg = small_cfg();
    let prompts = prep.pool.draw(10, 4);
    let out = build_training_dataset(&g, &d, &prompts, &prep.vocab, &cfg, 5, SEQ).unwrap();
    assert_eq!(out.len(), 10);
    for (s, p) in out.iter().zip(&prompts) {
        assert!(s.label <= 1);
        assert!(s.ids.starts_with(p));
        assert!(s.ids.len() <= p.len() + cfg.max_new_tokens);
    }
    assert_eq!(build_training_dataset(&g, &d, &prompts, &prep.vocab, &cfg, 5, ExecMode::Parallel).unwrap(), out);

    // A zero head scores every sequence at exactly one half, which meets
    // the default threshold.
    d.cls_head.w.data_mut().fill(0.0);
    d.cls_head.b.data_mut().fill(0.0);
    let out = build_training_dataset(&g, &d, &prompts, &prep.vocab, &cfg, 5, SEQ).unwrap();
    assert!(out.iter().all(|s| s.label == 1 && s.prob == 0.5));
    assert!(build_training_dataset(&g, &d, &[], &prep.vocab, &cfg, 5, SEQ).is_err());
}

#[test]
fn supervised_finetune_is_a_fixpoint_on_certain_labels() {
    let prep = tiny_prep();
    let (mut g, _) = models(&prep);
    let head = g.cls_head.as_mut().unwrap();
    head.w.data_mut().fill(0.0);
    head.b.data_mut().copy_from_slice(&[-1e3, 1e3]);
    let before = bits(&g);
    let mut opt = Optimizer::adam(1e-2);
    supervised_finetune(&mut g, &samples(&prep, &[1; 20]), &mut opt, &small_cfg(), SEQ).unwrap();
    for (a, b) in before.iter().zip(bits(&g)) {
        assert!((f64::from_bits(*a) - f64::from_bits(b)).abs() <= 1e-12);
    }
}

#[test]
fn supervised_finetune_steps_and_loss() {
    let prep = tiny_prep();
    let (mut g, _) = models(&prep);
    let cfg = LoopConfig {
        finetune_batch: 64,
        ..small_cfg()
    };
    let mut opt = Optimizer::adam(1e-3);
    assert_eq!(supervised_finetune(&mut g, &[], &mut opt, &cfg, SEQ).unwrap(), 0.0);
    assert_eq!(opt.step_count(), 0);

    let labels: Vec<u8> = (0..130).map(|i| (i % 3 == 0) as u8).collect();
    let data = samples(&prep, &labels);
    supervised_finetune(&mut g, &data, &mut opt, &cfg, SEQ).unwrap();
    assert_eq!(opt.step_count(), 3);

    let data = &data[..128];
    let pairs: Vec<(TokenSeq, u8)> = data.iter().map(|s| (TokenSeq::from_ids(s.ids.clone()), s.label)).collect();
    let before = generator::cls_loss(&g, &pairs).unwrap();
    let lm_head = g.lm_head.clone();
    supervised_finetune(&mut g, data, &mut opt, &cfg, SEQ).unwrap();
    assert!(generator::cls_loss(&g, &pairs).unwrap() <= before);
    assert_eq!(g.lm_head, lm_head);

    let mut headless = GeneratorModel::new(dims(prep.vocab.len()), 1).unwrap();
    assert!(supervised_finetune(&mut headless, data, &mut opt, &cfg, SEQ).is_err());
}

#[test]
fn semi_supervised_ignores_label_zero() {
    let prep = tiny_prep();
    let (g0, _) = models(&prep);
    let cfg = small_cfg();

    let mut g = g0.clone();
    let mut opt = Optimizer::adam(1e-3);
    assert_eq!(semi_supervised_finetune(&mut g, &samples(&prep, &[0; 12]), &mut opt, &cfg, 9, SEQ).unwrap(), None);
    assert_eq!(bits(&g), bits(&g0));
    assert_eq!(opt.step_count(), 0);

    let mixed = samples(&prep, &[1, 0, 0, 1, 1, 0, 1, 0, 1, 1, 0, 1]);
    let ones: Vec<GeneratedSample> = mixed.iter().filter(|s| s.label == 1).cloned().collect();
    let mut a = g0.clone();
    let mut b = g0.clone();
    let la = semi_supervised_finetune(&mut a, &mixed, &mut Optimizer::adam(1e-3), &cfg, 9, SEQ).unwrap();
    let lb = semi_supervised_finetune(&mut b, &ones, &mut Optimizer::adam(1e-3), &cfg, 9, SEQ).unwrap();
    assert!(la.is_some());
    assert_eq!(la.map(f64::to_bits), lb.map(f64::to_bits));
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.cls_head, g0.cls_head);
}

#[test]
fn semi_supervised_on_all_positive_is_plain_lm_finetuning() {
    let prep = tiny_prep();
    let (g0, _) = models(&prep);
    let cfg = small_cfg();
    let data = samples(&prep, &[1; 10]);

    let mut a = g0.clone();
    semi_supervised_finetune(&mut a, &data, &mut Optimizer::adam(1e-3), &cfg, 11, SEQ).unwrap();

    let mut corpus: Vec<TokenSeq> = data
        .iter()
        .map(|s| {
            let mut ids = s.ids.clone();
            if ids.len() < 16 {
                ids.push(EOT);
            }
            TokenSeq::from_ids(ids)
        })
        .collect();
    corpus.shuffle(&mut rng::seeded(11));
    let mut b = g0.clone();
    let mut opt = Optimizer::adam(1e-3);
    let mut groups = BLOCK_GROUPS.to_vec();
    groups.push("lm_head");
    with_trainable(&mut b, &groups, |b| {
        for batch in corpus.chunks(cfg.lm_batch) {
            lm_train_step(b, batch, cfg.window, &mut opt, SEQ).unwrap();
        }
    });
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn iterations_read_the_discriminator_only() {
    let prep = tiny_prep();
    let (g0, d) = models(&prep);
    let cfg = small_cfg();
    let d_hash = d.param_hash();

    let mut g = g0.clone();
    let mut state = RunState::new(&cfg);
    run_loop(&mut g, &d, &prep.pool, &prep.vocab, &cfg, &mut state, SEQ).unwrap();
    assert_eq!(d.param_hash(), d_hash);
    assert_ne!(g.param_hash(), g0.param_hash());
    assert_eq!(state.records.len(), cfg.iterations);
    assert_eq!(state.log_jsonl().lines().count(), cfg.iterations);
    assert!(state.records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    for (i, r) in state.records.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert!((0.0..=1.0).contains(&r.label1_fraction));
        assert!(r.supervised_loss.is_some());
    }

    let mut still = cfg.clone();
    still.ablation.skip_supervised = true;
    still.ablation.skip_semisupervised = true;
    let mut g = g0.clone();
    let mut state = RunState::new(&still);
    for _ in 0..2 {
        let out = evotext_iteration(&mut g, &d, &prep.pool, &prep.vocab, &still, &mut state, SEQ).unwrap();
        assert_eq!(out.len(), still.minibatch);
    }
    assert_eq!(bits(&g), bits(&g0));
    assert!(state.records.iter().all(|r| r.supervised_loss.is_none() && r.lm_loss.is_none() && r.timestamp == 0));

    let none = LoopConfig { iterations: 0, ..cfg };
    let mut g = g0.clone();
    run_loop(&mut g, &d, &prep.pool, &prep.vocab, &none, &mut RunState::new(&none), SEQ).unwrap();
    assert_eq!(bits(&g), bits(&g0));
}

#[test]
fn loop_is_deterministic_across_execution_modes() {
    let prep = tiny_prep();
    let (g0, d) = models(&prep);
    let cfg = small_cfg();
    let run = |mode| {
        let mut g = g0.clone();
        let mut state = RunState::new(&cfg);
        run_loop(&mut g, &d, &prep.pool, &prep.vocab, &cfg, &mut state, mode).unwrap();
        (bits(&g), state.log_jsonl())
    };
    let a = run(SEQ);
    assert_eq!(run(SEQ), a);
    assert_eq!(run(ExecMode::Parallel), a);
}

#[test]
fn prompt_pool_counts_first_tokens() {
    let corpus: Vec<TokenSeq> = [vec![5, 6], vec![5], vec![7, 5], vec![8], vec![7]]
        .into_iter()
        .map(TokenSeq::from_ids)
        .collect();
    let pool = PromptPool::from_corpus(&corpus, 2);
    assert_eq!(pool.tokens, vec![(5, 2), (7, 2)]);
    assert_eq!(pool.draw(20, 3), pool.draw(20, 3));
    assert!(pool.draw(50, 1).iter().all(|p| p == &[5] || p == &[7]));
    assert_eq!(PromptPool::uniform(&[9, 4]).tokens, vec![(9, 1), (4, 1)]);
}

#[test]
fn escalation_feeds_raw_generations_when_nothing_is_masked() {
    let prep = tiny_prep();
    let (mut g, mut d) = models(&prep);
    let cfg = LoopConfig {
        mask_p: 0.0,
        ..small_cfg()
    };
    let r = self_escalation(&mut g, &mut d, &prep.new.train, &prep.cues, &prep.vocab, &cfg, SEQ).unwrap();
    assert_eq!(r.mlm_losses.len(), cfg.escalation_mlm_epochs);
    assert_eq!(r.raw.len(), cfg.escalation_rounds * cfg.minibatch);
    assert_eq!(r.fed.len(), r.raw.len());
    for ((raw, fed), pos) in r.raw.iter().zip(&r.fed).zip(&r.masked_positions) {
        assert_eq!(&fed.ids, raw);
        assert_eq!(fed.label, 1);
        assert!(pos.is_empty());
    }
}

#[test]
fn escalation_fills_only_masked_positions() {
    let prep = tiny_prep();
    let (g0, d0) = models(&prep);
    let cfg = LoopConfig {
        mask_p: 0.4,
        ..small_cfg()
    };
    let (mut g, mut d) = (g0.clone(), d0.clone());
    let r = self_escalation(&mut g, &mut d, &prep.new.train, &prep.cues, &prep.vocab, &cfg, SEQ).unwrap();
    assert!(r.masked_positions.iter().any(|p| !p.is_empty()));
    for ((raw, fed), pos) in r.raw.iter().zip(&r.fed).zip(&r.masked_positions) {
        assert_eq!(fed.ids.len(), raw.len());
        for i in 0..raw.len() {
            if !pos.contains(&i) {
                assert_eq!(fed.ids[i], raw[i]);
            }
        }
        assert!(prep.cues.iter().any(|c| raw.starts_with(c)));
    }

    let (mut g2, mut d2) = (g0.clone(), d0.clone());
    let again = self_escalation(&mut g2, &mut d2, &prep.new.train, &prep.cues, &prep.vocab, &cfg, ExecMode::Parallel).unwrap();
    assert_eq!(again, r);
    assert_eq!(bits(&g2), bits(&g));

    let (mut g3, mut d3) = (g0.clone(), d0.clone());
    assert!(self_escalation(&mut g3, &mut d3, &[], &prep.cues, &prep.vocab, &cfg, SEQ).is_err());
    assert!(self_escalation(&mut g3, &mut d3, &prep.new.train, &[], &prep.vocab, &cfg, SEQ).is_err());
}
