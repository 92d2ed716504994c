use super::*;
use crate::data::toy::{self, ToyConfig};
use std::sync::OnceLock;

fn backbone() -> Arc<Backbone> {
    static BB: OnceLock<Arc<Backbone>> = OnceLock::new();
    BB.get_or_init(|| Arc::new(Backbone::load("tiny-random:0", BackboneConfig::tiny()).unwrap())).clone()
}

fn toy_data(colors: usize) -> Dataset {
    toy::dataset(ToyConfig { count: 64, colors, ..ToyConfig::default() })
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(cfg, backbone()).unwrap()
}

fn run_steps(t: &mut Trainer, data: &Dataset, it: &mut BatchIter, n: usize) -> Vec<StepMetrics> {
    (0..n)
        .map(|_| {
            let b = it.next_batch(data);
            let text = t.embed_captions(&b.captions).unwrap();
            t.train_step(&b.images, &text).unwrap()
        })
        .collect()
}

fn values(store: &ParamStore) -> Vec<Tensor> {
    store.params().iter().map(|p| p.value()).collect()
}

fn bit_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

#[test]
fn mismatch_rotates_by_one() {
    let t = Tensor::new(vec![3, 2], vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);
    assert_eq!(make_mismatch(&t).unwrap().to_vec(), vec![2.0, 2.5, 3.0, 3.5, 1.0, 1.5]);
    let m = make_mismatch(&t).unwrap();
    for i in 0..3 {
        assert_ne!(m.narrow(0, i, 1).to_vec(), t.narrow(0, i, 1).to_vec());
    }
    assert!(matches!(make_mismatch(&Tensor::zeros(vec![1, 4])), Err(Error::InvalidArgument(_))));
}

#[test]
fn config_defaults_and_toml() {
    let c = TrainConfig::tiny();
    assert_eq!(c.effective_batch_size(), 8);
    assert_eq!(TrainConfig::full("w.safetensors").effective_batch_size(), 64);
    assert_eq!(c.lr_discriminator, 4.0 * c.lr_generator);
    assert_eq!((c.adam_beta1, c.adam_beta2), (0.0, 0.9));
    let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    let partial = TrainConfig::from_toml("seed = 3\nenable_pp = false\nprompt_layers = [1, 2]\n").unwrap();
    assert_eq!(partial.seed, 3);
    assert_eq!(partial.generator_config().prompt_layers, (1, 2));
    assert!(!partial.generator_config().enable_prompt_predictor);
    assert!(TrainConfig::from_toml("nonsense = 1").is_err());
    assert!(TrainConfig::from_toml("lr_generator = 0.0").is_err());
    assert!(TrainConfig::from_toml("batch_size = 1").is_err());
}

#[test]
fn step_freezes_backbone_and_moves_both_networks() {
    let bb = backbone();
    let before_bb = bb.parameters();
    let mut t = trainer(TrainConfig::tiny());
    let (g0, d0) = (values(t.generator().params()), values(t.discriminator().params()));
    let data = toy_data(4);
    let mut it = BatchIter::new(data.len(), 8, 0).unwrap();
    let m = run_steps(&mut t, &data, &mut it, 1).pop().unwrap();
    assert_eq!(m.step, 1);
    assert!(m.loss_d.is_finite() && m.loss_g.is_finite() && m.magp >= 0.0);
    for ((n, a), (_, b)) in before_bb.iter().zip(bb.parameters()) {
        assert!(a.bit_eq(&b), "backbone parameter {n} changed");
    }
    assert!(!bit_equal(&g0, &values(t.generator().params())));
    assert!(!bit_equal(&d0, &values(t.discriminator().params())));
}

#[test]
fn updates_do_not_leak() {
    let mut t = trainer(TrainConfig::tiny());
    let data = toy_data(4);
    let b = BatchIter::new(data.len(), 4, 1).unwrap().next_batch(&data);
    let text = Var::constant(t.embed_captions(&b.captions).unwrap());
    let mis = Var::constant(make_mismatch(text.value()).unwrap());
    let obj = t.config().objective();
    let noise = Var::constant(t.generator.sample_noise(4, &mut t.rng));
    let fake = t.generator.generate(&noise, &text, Some(&t.backbone)).unwrap();

    let g0 = values(t.generator().params());
    t.update_discriminator(&b.images, &fake, &text, &mis, &obj, true).unwrap();
    assert!(bit_equal(&g0, &values(t.generator().params())));
    let d1 = values(t.discriminator().params());
    t.update_generator(&fake, &text, &obj).unwrap();
    assert!(bit_equal(&d1, &values(t.discriminator().params())));
    assert!(!bit_equal(&g0, &values(t.generator().params())));
}

#[test]
fn optimizer_counters_alternate() {
    let mut t = trainer(TrainConfig::tiny());
    let data = toy_data(4);
    let mut it = BatchIter::new(data.len(), 4, 0).unwrap();
    for _ in 0..3 {
        run_steps(&mut t, &data, &mut it, 1);
        let (g, d) = t.optimizer_steps();
        assert_eq!(g, d);
        assert_eq!(g, t.step());
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let data = toy_data(4);
    let run = || {
        let mut t = trainer(TrainConfig { seed: 5, ..TrainConfig::tiny() });
        let mut it = BatchIter::new(data.len(), 4, 9).unwrap();
        run_steps(&mut t, &data, &mut it, 3)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.loss_d.to_bits(), y.loss_d.to_bits());
        assert_eq!(x.loss_g.to_bits(), y.loss_g.to_bits());
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(4);
    let mut t = trainer(TrainConfig::tiny());
    let mut it = BatchIter::new(data.len(), 4, 0).unwrap();
    run_steps(&mut t, &data, &mut it, 2);
    let path = dir.path().join("state.safetensors");
    t.save(&path, &BTreeMap::new()).unwrap();
    let (mut r, meta) = Trainer::load(&path, Some(backbone())).unwrap();
    assert_eq!(meta["step"], "2");
    assert_eq!(r.step(), 2);
    assert!(bit_equal(&values(t.generator().params()), &values(r.generator().params())));
    assert!(bit_equal(&values(t.discriminator().params()), &values(r.discriminator().params())));
    assert!(bit_equal(t.opt_g.moments().1, r.opt_g.moments().1));
    assert!(bit_equal(t.opt_d.moments().0, r.opt_d.moments().0));
    assert_eq!(t.optimizer_steps(), r.optimizer_steps());

    let mut it2 = it.clone();
    let a = run_steps(&mut t, &data, &mut it, 1);
    let b = run_steps(&mut r, &data, &mut it2, 1);
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_names_a_key() {
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(TrainConfig::tiny());
    let path = dir.path().join("s.safetensors");
    t.save(&path, &BTreeMap::new()).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
    match Trainer::load(&path, Some(backbone())) {
        Err(Error::MissingTensor(name)) => assert!(name.contains('.'), "{name}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("truncated file loaded"),
    }
}

#[test]
fn non_finite_loss_leaves_state_unchanged() {
    let mut t = trainer(TrainConfig::tiny());
    let data = toy_data(4);
    let b = BatchIter::new(data.len(), 4, 0).unwrap().next_batch(&data);
    let text = t.embed_captions(&b.captions).unwrap();
    let bad = b.images.map(|_| f64::NAN);
    let (g0, d0) = (values(t.generator().params()), values(t.discriminator().params()));
    let rng0 = t.rng.clone();
    match t.train_step(&bad, &text) {
        Err(Error::NonFinite { term }) => assert_eq!(term, "hinge"),
        other => panic!("expected a non-finite failure, got {:?}", other.map(|m| m.step)),
    }
    assert_eq!(t.step(), 0);
    assert_eq!(t.optimizer_steps(), (0, 0));
    assert!(bit_equal(&g0, &values(t.generator().params())));
    assert!(bit_equal(&d0, &values(t.discriminator().params())));
    assert_eq!(t.rng, rng0);
}

#[test]
fn ablations_train() {
    let data = toy_data(4);
    for cfg in [
        TrainConfig { enable_cd: false, ..TrainConfig::tiny() },
        TrainConfig { enable_cg: false, ..TrainConfig::tiny() },
        TrainConfig { enable_bfp: false, ..TrainConfig::tiny() },
        TrainConfig { enable_pp: false, ..TrainConfig::tiny() },
        TrainConfig { lambda: 0.0, ..TrainConfig::tiny() },
    ] {
        let mut t = trainer(cfg.clone());
        let (g0, d0) = (values(t.generator().params()), values(t.discriminator().params()));
        let mut it = BatchIter::new(data.len(), 4, 0).unwrap();
        let m = run_steps(&mut t, &data, &mut it, 1).pop().unwrap();
        assert!(m.loss_d.is_finite() && m.loss_g.is_finite(), "{cfg:?}");
        assert!(!bit_equal(&g0, &values(t.generator().params())), "{cfg:?}");
        assert!(!bit_equal(&d0, &values(t.discriminator().params())), "{cfg:?}");
    }
}

#[test]
fn run_directory_layout_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(4);
    let cfg = TrainConfig { max_steps: 3, checkpoint_every: 2, batch_size: Some(4), ..TrainConfig::tiny() };
    let mut t = trainer(cfg.clone());
    let mut it = BatchIter::new(data.len(), 4, 0).unwrap();
    let mut seen = Vec::new();
    let last = run_training(&mut t, &data, &mut it, dir.path(), |m| seen.push(m.step)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(last, checkpoint_path(dir.path(), 3));
    assert!(checkpoint_path(dir.path(), 2).exists());
    assert_eq!(TrainConfig::from_toml(&fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap(), cfg);
    let lines: Vec<MetricRecord> = fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.iter().map(|r| r.metrics.step).collect::<Vec<_>>(), vec![1, 2, 3]);

    // Resuming from step 2 replays step 3 exactly.
    let (mut r, mut rit) = resume_training(&checkpoint_path(dir.path(), 2), data.len()).unwrap();
    let again = run_steps(&mut r, &data, &mut rit, 1).pop().unwrap();
    assert_eq!(again, lines[2].metrics);

    let ck = GeneratorCheckpoint::load(&last).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(ck.id.len(), 12);
    assert!(bit_equal(&values(ck.generator.params()), &values(t.generator().params())));
}

#[test]
fn sampling_ignores_chunking() {
    let t = trainer(TrainConfig::tiny());
    let text = Tensor::randn(vec![5, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let a = t.sample(&text, 3, 5).unwrap();
    let b = t.sample(&text, 3, 2).unwrap();
    assert_eq!(a.shape(), &[5, 3, 32, 32]);
    assert!(a.max_abs_diff(&b) < 1e-12);
}
