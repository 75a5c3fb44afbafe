use super::*;
use crate::nn::ParamId;
use crate::scene::{build_dataset, SceneConfig, SplitRatios};

fn dataset(n: usize, seed: u64) -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    };
    build_dataset(n, dir.path(), seed, SplitRatios::default(), &scene).unwrap();
    let m = DatasetManifest::load(dir.path()).unwrap();
    (dir, m)
}

/// Smoke config with the oracle-dependent term off.
fn quick() -> TrainConfig {
    TrainConfig {
        c_perc: 0.0,
        max_steps: 2,
        ..TrainConfig::smoke()
    }
}

fn encoders_only(m: &DatasetManifest, cfg: &TrainConfig) -> Model<f64> {
    Model {
        config: cfg.clone(),
        encoders: Encoders::init(cfg, build_vocab(m).unwrap()).unwrap(),
        gan: None,
        oracle: None,
    }
}

#[test]
fn config_parses_flat_files() {
    let cfg = TrainConfig::parse("").unwrap();
    assert_eq!(cfg, TrainConfig::default());
    let cfg = TrainConfig::parse("seed = 7\nbatch_size = 8\nlr_g = 2e-4\n").unwrap();
    assert_eq!((cfg.seed, cfg.batch_size, cfg.lr_g), (7, 8, 2e-4));
    assert!(matches!(TrainConfig::parse("learning_rate = 1"), Err(DtcError::Config(_))));
    assert!(TrainConfig::parse("batch_size = 1").is_err());
    assert!(TrainConfig::parse("resolution = 48").is_err());
    assert!(TrainConfig::parse("lambda1 = -1").is_err());
    let text = TrainConfig::paper().to_text();
    assert_eq!(TrainConfig::parse(&text).unwrap(), TrainConfig::paper());
}

#[test]
fn config_hash_tracks_every_field() {
    let a = TrainConfig::default();
    assert_eq!(a.hash(), TrainConfig::default().hash());
    assert_eq!(a.hash().len(), 64);
    let b = TrainConfig { seed: 1, ..a.clone() };
    let c = TrainConfig { g_ema: true, ..a.clone() };
    assert_ne!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert!(TrainConfig::preset("paper").is_ok());
    assert!(TrainConfig::preset("huge").is_err());
}

#[test]
fn defaults_follow_the_recipe() {
    let c = TrainConfig::default();
    assert_eq!((c.beta1, c.beta2), (0.0, 0.999));
    assert_eq!((c.lambda1, c.lambda2), (0.1, 1.0));
    assert_eq!((c.resolution, c.batch_size, c.gan_epochs, c.m_max), (64, 16, 60, 6));
    assert_eq!((c.lr_g, c.lr_d), (1e-4, 1e-4));
    let p = TrainConfig::paper();
    assert_eq!((p.resolution, p.batch_size, p.gan_epochs, p.m_max), (128, 128, 200, 10));
}

#[test]
fn crop_pairs_cover_regions_and_scenes() {
    let (_d, m) = dataset(6, 1);
    let layouts: Vec<Layout> = m.records.iter().map(|r| r.layout()).collect();
    let regions: usize = layouts.iter().map(|l| l.regions.len()).sum();
    assert_eq!(crop_pairs(&layouts, false).len(), regions);
    let with = crop_pairs(&layouts, true);
    assert_eq!(with.len(), regions + layouts.len());
    assert!(with.iter().filter(|p| p.scene).all(|p| p.bbox == BBox([0.0, 0.0, 1.0, 1.0])));
    let vocab = build_vocab(&m).unwrap();
    for p in &with {
        let t = tokenize(&p.caption, &vocab, T_MAX_SCENE).unwrap();
        assert!(t.unknown.is_empty(), "{:?}", t.unknown);
    }
}

#[test]
fn damsm_pretraining_is_deterministic_and_finite() {
    let (_d, m) = dataset(24, 2);
    let cfg = TrainConfig { max_steps: 3, ..quick() };
    let run = || {
        let mut t = DamsmTrainer::<f64>::new(&m, &cfg).unwrap();
        t.run(None).unwrap();
        (t.history.clone(), t.validation_loss().unwrap())
    };
    let (a, va) = run();
    let (b, vb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(va, vb);
    assert!(a.iter().all(|s| s.loss.is_finite() && s.loss >= 0.0));
    assert!(DamsmTrainer::<f64>::new(&m, &TrainConfig { batch_size: 1000, ..cfg }).is_err());
}

#[test]
fn damsm_resume_matches_straight_run() {
    let (_d, m) = dataset(24, 3);
    let cfg = TrainConfig { max_steps: 3, ..quick() };
    let mut straight = DamsmTrainer::<f64>::new(&m, &cfg).unwrap();
    straight.run(None).unwrap();
    let mut first = DamsmTrainer::<f64>::new(&m, &TrainConfig { max_steps: 3, ..cfg.clone() }).unwrap();
    first.train_step().unwrap();
    first.train_step().unwrap();
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).unwrap();
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut resumed = DamsmTrainer::<f64>::resume(&m, &cfg, &ck).unwrap();
    assert_eq!(resumed.step, 2);
    let next = resumed.train_step().unwrap();
    assert_eq!(next, straight.history[2]);
}

#[test]
fn retrieval_is_bounded_and_seeded() {
    let (_d, m) = dataset(30, 4);
    let cfg = quick();
    let model = encoders_only(&m, &cfg);
    let (images, layouts) = load_split::<f64>(&m, Split::Train).unwrap();
    let a = damsm_retrieval(&model.encoders, &cfg, &images, &layouts, 5, 9).unwrap();
    let b = damsm_retrieval(&model.encoders, &cfg, &images, &layouts, 5, 9).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
    assert!(damsm_retrieval(&model.encoders, &cfg, &images[..1], &layouts[..1], 500, 9).is_err());
}

fn gan(m: &DatasetManifest, cfg: &TrainConfig) -> GanTrainer<f64> {
    GanTrainer::new(m, cfg, &encoders_only(m, cfg)).unwrap()
}

#[test]
fn gan_steps_are_finite_and_deterministic() {
    let (_d, m) = dataset(16, 5);
    let cfg = quick();
    let mut a = gan(&m, &cfg);
    let mut b = gan(&m, &cfg);
    a.run(None).unwrap();
    b.run(None).unwrap();
    assert_eq!(a.history.len(), 2);
    assert_eq!(a.history, b.history);
    for s in &a.history {
        for v in [s.d_image, s.d_region, s.d_total, s.g_adv, s.damsm, s.mmrfm, s.pixel, s.g_total] {
            assert!(v.is_finite());
        }
        assert!(s.d_image >= 0.0 && s.d_region >= 0.0 && s.damsm >= 0.0 && s.mmrfm >= 0.0);
        assert_eq!(s.perceptual, 0.0);
    }
    // Different seeds diverge.
    let mut c = gan(&m, &TrainConfig { seed: 1, ..cfg });
    c.run(None).unwrap();
    assert_ne!(a.history[0].d_total, c.history[0].d_total);
}

#[test]
fn gan_resume_reproduces_the_next_step() {
    let (_d, m) = dataset(16, 6);
    let cfg = TrainConfig { max_steps: 3, ..quick() };
    let mut straight = gan(&m, &cfg);
    straight.run(None).unwrap();

    let mut first = gan(&m, &cfg);
    first.train_step().unwrap();
    first.train_step().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.dtck");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let mut resumed = GanTrainer::<f64>::resume(&m, &cfg, &ck).unwrap();
    assert_eq!(resumed.step, 2);
    assert_eq!(resumed.train_step().unwrap(), straight.history[2]);

    let other = TrainConfig { lr_g: 3e-4, ..cfg };
    assert!(matches!(
        GanTrainer::<f64>::resume(&m, &other, &ck),
        Err(DtcError::ConfigHashMismatch { .. })
    ));
}

#[test]
fn zero_objective_leaves_generator_unchanged() {
    let (_d, m) = dataset(16, 7);
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        c_damsm: 0.0,
        c_mmrfm: 0.0,
        c_pixel: 0.0,
        ..quick()
    };
    let mut t = gan(&m, &cfg);
    let before = t.model.gan.as_ref().unwrap().g_store.params().to_vec();
    let d_before = t.model.gan.as_ref().unwrap().d_store.fingerprint();
    let s = t.train_step().unwrap();
    assert_eq!(s.g_total, 0.0);
    assert_eq!(t.model.gan.as_ref().unwrap().g_store.params(), &before[..]);
    // The discriminator objective does not vanish with the weights.
    assert_ne!(t.model.gan.as_ref().unwrap().d_store.fingerprint(), d_before);
}

#[test]
fn non_finite_loss_aborts_with_the_term() {
    let (_d, m) = dataset(16, 8);
    let poison = |store: &mut crate::nn::ParamStore<f64>| {
        for i in 0..store.len() {
            store.get_mut(ParamId(i)).data_mut().fill(f64::NAN);
        }
    };
    let mut t = gan(&m, &quick());
    poison(&mut t.model.gan.as_mut().unwrap().d_store);
    match t.train_step() {
        Err(DtcError::NonFinite { term }) => assert_eq!(term, "d_image"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    // A NaN generator poisons the fake images, caught before D is touched.
    let mut t = gan(&m, &quick());
    poison(&mut t.model.gan.as_mut().unwrap().g_store);
    let before = t.model.gan.as_ref().unwrap().d_store.params().to_vec();
    assert!(matches!(t.train_step(), Err(DtcError::NonFinite { term }) if term == "d_image"));
    assert_eq!(t.model.gan.as_ref().unwrap().d_store.params(), &before[..]);
    assert_eq!(t.step, 0);
    // Generator-only terms are named too.
    let mut t = gan(&m, &quick());
    poison(&mut t.model.encoders.image_store);
    assert!(matches!(t.train_step(), Err(DtcError::NonFinite { term }) if term == "damsm"));
}

#[test]
fn subselection_is_bounded_and_never_empty() {
    let (_d, m) = dataset(16, 9);
    for m_max in [1, 2, 6] {
        let t = gan(&m, &TrainConfig { m_max, ..quick() });
        for step in 0..6 {
            let b = t.batch(step).unwrap();
            assert!(b.counts.iter().all(|&c| (1..=m_max).contains(&c)));
            assert_eq!(b.captions.len(), b.counts.iter().sum::<usize>());
        }
    }
}

#[test]
fn epoch_order_is_a_permutation() {
    let o = epoch_order(3, 1, 50);
    let mut s = o.clone();
    s.sort_unstable();
    assert_eq!(s, (0..50).collect::<Vec<_>>());
    assert_eq!(o, epoch_order(3, 1, 50));
    assert_ne!(o, epoch_order(3, 2, 50));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_d, m) = dataset(16, 10);
    let cfg = TrainConfig { g_ema: true, ..quick() };
    let mut t = gan(&m, &cfg);
    t.train_step().unwrap();
    let layout = m.records[0].layout();
    let before = t.model.generate_layout(&layout, 42).unwrap();
    let ck = t.checkpoint();
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.model_hash(), ck.model_hash());
    let model = Model::<f64>::from_checkpoint(&back).unwrap();
    let after = model.generate_layout(&layout, 42).unwrap();
    assert_eq!(before.data(), after.data());
    assert!(model.gan().unwrap().ema.is_some());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(DtcError::Checkpoint(_))));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(DtcError::Checkpoint(_))));
}

#[test]
fn f32_checkpoint_round_trip() {
    let (_d, m) = dataset(16, 11);
    let cfg = quick();
    let pre = Model {
        config: cfg.clone(),
        encoders: Encoders::<f32>::init(&cfg, build_vocab(&m).unwrap()).unwrap(),
        gan: None,
        oracle: None,
    };
    let t = GanTrainer::new(&m, &cfg, &pre).unwrap();
    let layout = m.records[1].layout();
    let before = t.model.generate_layout(&layout, 5).unwrap();
    let mut bytes = Vec::new();
    t.checkpoint().write_to(&mut bytes).unwrap();
    let model = Model::<f32>::from_checkpoint(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(before.data(), model.generate_layout(&layout, 5).unwrap().data());
}

#[test]
fn gan_rejects_mismatched_inputs() {
    let (_d, m) = dataset(16, 12);
    let cfg = quick();
    let pre = encoders_only(&m, &cfg);
    let wide = TrainConfig { d_e: 48, ..cfg.clone() };
    assert!(matches!(GanTrainer::new(&m, &wide, &pre), Err(DtcError::Config(_))));
    let perc = TrainConfig { c_perc: 1.0, ..cfg.clone() };
    assert!(matches!(GanTrainer::new(&m, &perc, &pre), Err(DtcError::Config(_))));
    let big = TrainConfig { resolution: 64, ..cfg };
    assert!(GanTrainer::new(&m, &big, &encoders_only(&m, &big)).is_err());
}

#[test]
fn pretraining_and_evaluation_pipeline() {
    let (_d, m) = dataset(40, 13);
    let cfg = TrainConfig { max_steps: 1, ..TrainConfig::smoke() };
    let out = pretrain_damsm::<f32>(&m, &cfg, None, None).unwrap();
    let (pre, report) = (out.model, out.report);
    assert!(out.checkpoint.contains("adam.text.step"));
    let resumed = DamsmTrainer::<f32>::resume(&m, &cfg, &out.checkpoint).unwrap();
    assert_eq!(resumed.step, 1);
    assert_eq!(report.steps, 1);
    assert!(report.val_loss_before.is_finite() && report.val_loss_after.is_finite());
    let validation = pre.oracle().unwrap().validation.unwrap();
    let mut t = GanTrainer::new(&m, &cfg, &pre).unwrap();
    let s = t.train_step().unwrap();
    assert!(s.perceptual.is_finite() && s.perceptual > 0.0);

    let oracle_hash = t.model.oracle().unwrap().store.fingerprint();
    let strict = crate::evaluator::EvalOptions {
        split: Split::Train,
        seed: 3,
        max_images: 12,
        n_candidates: 4,
        oracle_threshold: 1.1,
    };
    assert!(matches!(
        crate::evaluator::evaluate(&t.model, &m, &strict),
        Err(DtcError::Evaluation(_))
    ));
    let opts = crate::evaluator::EvalOptions {
        oracle_threshold: validation.min(),
        ..strict
    };
    let a = crate::evaluator::evaluate(&t.model, &m, &opts).unwrap();
    let b = crate::evaluator::evaluate(&t.model, &m, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.counts.images, 12);
    assert_eq!(a.config_hash, cfg.hash());
    assert_eq!(t.model.oracle().unwrap().store.fingerprint(), oracle_hash);
    let json = serde_json::to_string(&a).unwrap();
    let back: crate::evaluator::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}
