use benh_core::checkpoint::Model;
use benh_core::corpus::{
    generate_synthetic, load_corpus, save_corpus, Corpus, LoadOptions, OptLevel, Split, SynthConfig,
};
use benh_core::embed::ProviderConfig;
use benh_core::encode::{raw_embeddings, EncodedCorpus};
use benh_core::eval::{inlining_decline, run_pool_eval, EvalConfig, ScorerKind};
use benh_core::simcombine::cosine;
use benh_core::train::{init_model, train, train_with_progress, TrainConfig};

fn small_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 16,
        epochs: 2,
        lr: 5e-3,
        seed,
        d_t: 16,
        ..TrainConfig::default()
    };
    cfg.model.function_provider = ProviderConfig::toy_function(24, 11);
    cfg.model.string_provider = ProviderConfig::toy_string(24, 12);
    cfg
}

fn corpus(seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig {
        n_projects: 4,
        funcs_per_project: 8,
        split_ratio: (1, 0, 1),
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn corpus_file_round_trip() {
    let c = corpus(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bcf.json");
    save_corpus(&c, &path).unwrap();
    assert_eq!(load_corpus(&path, LoadOptions::default()).unwrap(), c);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let c = corpus(2);
    let mut cfg = small_config(2);
    cfg.lr = 0.0;
    let out = train(&c, &cfg).unwrap();
    let init = init_model(&c.with_split(Split::Train), &cfg.model_config().unwrap()).unwrap();
    assert!(!out.log.is_empty());
    assert_eq!(out.model.params, init.params);
}

#[test]
fn training_reduces_loss() {
    let c = corpus(3);
    let mut cfg = small_config(3);
    cfg.epochs = 100;
    let mut seen = Vec::new();
    let out = train_with_progress(&c, &cfg, |s| seen.push(s.loss)).unwrap();
    assert!(out.log.len() >= 200);
    assert_eq!(seen.len(), out.log.len());
    let first = out.log[0].loss;
    let at_200 = out.log[199].loss;
    assert!(at_200 < first, "step 200 loss {at_200} vs step 1 {first}");
    let head: f64 = out.log[..10].iter().map(|s| s.loss).sum();
    let tail: f64 = out.log[190..200].iter().map(|s| s.loss).sum();
    assert!(tail < head);
}

#[test]
fn training_leaves_whitening_and_providers_alone() {
    let c = corpus(4);
    let cfg = small_config(4);
    let model_cfg = cfg.model_config().unwrap();
    let init = init_model(&c.with_split(Split::Train), &model_cfg).unwrap();
    let trained = train(&c, &cfg).unwrap().model;
    assert_eq!(trained.func_whitening, init.func_whitening);
    assert_eq!(trained.string_whitening, init.string_whitening);
    assert_eq!(trained.config, model_cfg);
    assert_ne!(trained.params, init.params);
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let c = corpus(5);
    let model = train(&c, &small_config(5)).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    let ecfg = EvalConfig {
        pool_sizes: vec![2, 32],
        n_queries: Some(50),
        seed: 5,
    };
    let a = run_pool_eval(&model, &c, &ecfg, ScorerKind::Enhanced).unwrap();
    let b = run_pool_eval(&back, &c, &ecfg, ScorerKind::Enhanced).unwrap();
    assert_eq!(a.payload(), b.payload());
    assert_eq!(a.per_query, b.per_query);
}

#[test]
fn inlining_lowers_raw_cosine() {
    let base = SynthConfig {
        n_projects: 3,
        funcs_per_project: 10,
        split_ratio: (0, 0, 1),
        seed: 6,
        inline_prob_by_opt: [(OptLevel::O2, 0.6), (OptLevel::O3, 0.6)].into(),
        ..SynthConfig::default()
    };
    let norm = generate_synthetic(&base).unwrap();
    let noinline = generate_synthetic(&SynthConfig {
        inline_prob_by_opt: Default::default(),
        ..base
    })
    .unwrap();
    let mcfg = small_config(6).model_config().unwrap();
    let a = raw_embeddings(&norm, &mcfg).unwrap();
    let b = raw_embeddings(&noinline, &mcfg).unwrap();
    let (mut changed, mut unchanged) = (Vec::new(), Vec::new());
    for (g, r) in norm.function_refs().enumerate() {
        let fa = norm.function(r);
        let fb = noinline.function(noinline.find_function(&fa.function_id).unwrap());
        let c = cosine(&a.functions[g], &b.functions[g]).unwrap();
        if fa.tokens != fb.tokens {
            changed.push(c);
        } else {
            unchanged.push(c);
        }
    }
    assert!(!changed.is_empty() && !unchanged.is_empty());
    assert!(unchanged.iter().all(|&c| (c - 1.0).abs() < 1e-12));
    let mean = changed.iter().sum::<f64>() / changed.len() as f64;
    assert!(mean < 0.99, "mean cosine of inlined functions {mean}");
}

#[test]
fn identical_corpora_show_no_decline() {
    let c = corpus(7);
    let model = train(&c, &small_config(7)).unwrap().model;
    let r = inlining_decline(&model, &c, &c.clone(), 32, Some(60), 7).unwrap();
    assert_eq!(r.baseline.decline_ratio, 0.0);
    assert_eq!(r.enhanced.decline_ratio, 0.0);
    assert_eq!(r.baseline.map_ni, r.baseline.map_no);
}

#[test]
fn raw_scorer_ignores_training() {
    let c = corpus(8);
    let ecfg = EvalConfig {
        pool_sizes: vec![2, 16],
        n_queries: Some(40),
        seed: 1,
    };
    let mut cfg = small_config(8);
    let a = train(&c, &cfg).unwrap().model;
    cfg.seed = 99;
    let b = train(&c, &cfg).unwrap().model;
    let ra = run_pool_eval(&a, &c, &ecfg, ScorerKind::Raw).unwrap();
    let rb = run_pool_eval(&b, &c, &ecfg, ScorerKind::Raw).unwrap();
    assert_eq!(ra.map_by_pool, rb.map_by_pool);
    let enc = EncodedCorpus::new(&c.with_split(Split::Test), &a).unwrap();
    assert_eq!(enc.len(), enc.raw.functions.len());
}
