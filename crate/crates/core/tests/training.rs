use taxoseq::corpus::synth::{generate, SynthConfig};
use taxoseq::corpus::Dataset;
use taxoseq::label_codec::PAD;
use taxoseq::loss::{compute, LossConfig};
use taxoseq::trainer::{checkpoint, evaluate_loss, EpochRecord, Trainer, BEST_DIR, LAST_DIR, LOG_FILE};
use taxoseq::{Classifier, RunConfig};

fn small_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.d_model = 16;
    c.encoder.layers = 1;
    c.encoder.heads = 2;
    c.encoder.max_len = 10;
    c.encoder.dropout = 0.0;
    c.decoder.d_model = 16;
    c.decoder.n_layers = 1;
    c.decoder.heads = 2;
    c.decoder.dropout = 0.0;
    c.train.micro_batch = 4;
    c.train.accumulation_steps = 1;
    c.train.max_epochs = 4;
    c.train.lr_encoder = 1e-3;
    c.train.lr_decoder = 3e-3;
    c.train.seed = seed;
    c
}

fn dataset() -> Dataset {
    generate(&SynthConfig {
        depth: 2,
        branching: 2,
        vocab_size: 80,
        pool_size: 4,
        docs_per_leaf: 10,
        signal_strength: 3,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn history_without_time(h: &[EpochRecord]) -> Vec<EpochRecord> {
    h.iter()
        .map(|r| EpochRecord {
            wall_time: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn validation_loss_is_repeatable_and_matches_a_recount() {
    let ds = dataset();
    let clf = Classifier::build(&small_config(0), &ds).unwrap();
    let dev = clf.prepare(&ds.dev, 1).unwrap();
    let cfg = clf.config.loss.clone();
    let a = evaluate_loss(&clf.model, &dev, &cfg, 1).unwrap();
    let b = evaluate_loss(&clf.model, &dev, &cfg, 1).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());

    // One-sample windows: the mean of per-sample losses from plain logits.
    let mut total = 0.0;
    for ex in &dev {
        let enc = clf.model.encode(&ex.input).unwrap();
        let (inputs, targets) = ex.teacher_forcing();
        let active = targets.iter().rposition(|&t| t != PAD).unwrap() + 1;
        let logits = clf.model.decoder_logits(&enc, &inputs[..active], None).unwrap();
        total += compute(&logits, &targets[..active], &cfg).unwrap();
    }
    let recount = total / dev.len() as f64;
    assert!((a - recount).abs() <= 1e-5 * recount.abs().max(1.0), "{a} vs {recount}");

    // Plain cross-entropy bounds the focal loss from above.
    let plain = evaluate_loss(&clf.model, &dev, &LossConfig::plain(cfg.smoothing), 1).unwrap();
    assert!(plain >= a);
}

#[test]
fn training_lowers_the_loss() {
    let ds = dataset();
    let mut cfg = small_config(1);
    cfg.train.max_epochs = 12;
    let clf = Classifier::build(&cfg, &ds).unwrap();
    let train = clf.prepare(&ds.train, 0).unwrap();
    let before = evaluate_loss(&clf.model, &train, &clf.config.loss, 4).unwrap();
    let mut t = Trainer::new(clf, &ds, None).unwrap();
    t.run().unwrap();
    let (clf, state) = t.finish();
    let after = evaluate_loss(&clf.model, &train, &clf.config.loss, 4).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    let first = state.history.first().unwrap().train_loss;
    let last = state.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn same_seed_same_log_and_best_is_the_minimum() {
    let ds = dataset();
    let run = |seed| {
        let mut t = Trainer::new(Classifier::build(&small_config(seed), &ds).unwrap(), &ds, None).unwrap();
        t.run().unwrap();
        t.finish()
    };
    let (a_clf, a) = run(3);
    let (b_clf, b) = run(3);
    let (_, c) = run(4);
    assert_eq!(history_without_time(&a.history), history_without_time(&b.history));
    assert_ne!(history_without_time(&a.history), history_without_time(&c.history));
    for ((_, p), (_, q)) in a_clf.model.store.iter().zip(b_clf.model.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }

    let min = a.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val, Some(min));
    let first_min = a.history.iter().find(|r| r.val_loss == min).unwrap().epoch;
    assert_eq!(a.best_epoch, first_min);
    assert_eq!(a.history.len() as u32, a.epoch);
    assert!(a.history.iter().enumerate().all(|(i, r)| r.epoch == i as u32 + 1));
}

#[test]
fn finish_restores_the_best_parameters() {
    let ds = dataset();
    let mut cfg = small_config(5);
    cfg.train.max_epochs = 5;
    let mut t = Trainer::new(Classifier::build(&cfg, &ds).unwrap(), &ds, None).unwrap();
    t.run().unwrap();
    let (clf, state) = t.finish();
    let dev = clf.prepare(&ds.dev, 1).unwrap();
    let val = evaluate_loss(&clf.model, &dev, &clf.config.loss, clf.config.train.window()).unwrap();
    assert_eq!(Some(val), state.best_val);
}

#[test]
fn run_directory_holds_log_and_checkpoints() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(6);
    cfg.train.max_epochs = 3;
    let mut t = Trainer::new(Classifier::build(&cfg, &ds).unwrap(), &ds, Some(dir.path())).unwrap();
    t.run().unwrap();
    let live_state = t.state().clone();
    let live_optim = t.optimizer().clone();
    let live_params: Vec<_> = t
        .classifier()
        .model
        .store
        .iter()
        .map(|(_, p)| p.value.clone())
        .collect();

    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let logged: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logged, live_state.history);

    let last = checkpoint::load(&dir.path().join(LAST_DIR)).unwrap();
    let (state, optim) = last.training.expect("training state saved");
    assert_eq!(state, live_state);
    assert_eq!(optim, live_optim);
    assert_eq!(last.classifier.config, t.classifier().config);
    assert_eq!(last.classifier.hierarchy.to_tsv(), ds.hierarchy.to_tsv());
    for ((_, p), v) in last.classifier.model.store.iter().zip(&live_params) {
        assert_eq!(&p.value, v, "{}", p.name);
    }

    let best = checkpoint::load(&dir.path().join(BEST_DIR)).unwrap();
    let (best_state, _) = best.training.unwrap();
    assert_eq!(best_state.epoch, live_state.best_epoch);
    let (clf, _) = t.finish();
    for ((_, p), (_, q)) in best.classifier.model.store.iter().zip(clf.model.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn inference_checkpoints_cannot_be_resumed() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let clf = Classifier::build(&small_config(7), &ds).unwrap();
    checkpoint::save(dir.path(), &clf, None).unwrap();
    let loaded = checkpoint::load(dir.path()).unwrap();
    assert!(loaded.training.is_none());
    let sample = &ds.test[0];
    assert_eq!(
        loaded.classifier.predict(&sample.id, &sample.text).unwrap(),
        clf.predict(&sample.id, &sample.text).unwrap()
    );
    assert!(Trainer::resume(dir.path(), &ds, None).is_err());
}

#[test]
fn unsupported_or_damaged_checkpoints_are_rejected() {
    let ds = dataset();
    let clf = Classifier::build(&small_config(8), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    checkpoint::save(&ckpt, &clf, None).unwrap();

    let manifest = ckpt.join("manifest");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("format = 1", "format = 99", 1)).unwrap();
    let err = checkpoint::load(&ckpt).err().expect("future format rejected");
    assert!(err.to_string().contains("format 99"), "{err}");
    std::fs::write(&manifest, text).unwrap();
    checkpoint::load(&ckpt).unwrap();

    let blob = std::fs::read_dir(ckpt.join("params"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes.pop();
    std::fs::write(&blob, bytes).unwrap();
    assert!(checkpoint::load(&ckpt).is_err());
}

#[test]
fn empty_dev_split_is_rejected() {
    let mut ds = dataset();
    ds.dev.clear();
    let clf = Classifier::build(&small_config(9), &ds).unwrap();
    assert!(Trainer::new(clf, &ds, None).is_err());
}
