mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taxoseq::corpus::synth::{generate, SynthConfig};
use taxoseq::corpus::{load_jsonl, save_jsonl, Sample};
use taxoseq::eval::micro_macro_f1;
use taxoseq::label_codec::{build_vocab, decode, encode, OrderingStrategy, SEP};
use taxoseq::loss::{compute, LossConfig, LossVariant};
use taxoseq::numerics::ops::{dropout, focal_modulated, layer_norm, softmax};
use taxoseq::numerics::{Array, Tape};
use taxoseq::taxonomy::{LabelHierarchy, LabelId, LabelSet};

/// Random forest on `n` labels: label `k` hangs under an earlier label or
/// at the top.
fn hierarchy(max: usize) -> impl Strategy<Value = LabelHierarchy> {
    (2..=max)
        .prop_flat_map(|n| proptest::collection::vec(proptest::option::weighted(0.8, 0..1000usize), n - 1))
        .prop_map(|parents| {
            let mut text = String::from("ROOT\tL0\n");
            for (i, p) in parents.iter().enumerate() {
                let k = i + 1;
                match p {
                    Some(p) => text.push_str(&format!("L{}\tL{k}\n", p % k)),
                    None => text.push_str(&format!("ROOT\tL{k}\n")),
                }
            }
            LabelHierarchy::parse(&text).expect("forest parses")
        })
}

fn subset(h: &LabelHierarchy, picks: &[usize]) -> LabelSet {
    picks.iter().map(|&p| LabelId((p % h.len()) as u32)).collect()
}

fn hierarchy_and_sets() -> impl Strategy<Value = (LabelHierarchy, LabelSet, LabelSet)> {
    (
        hierarchy(30),
        proptest::collection::vec(0..1000usize, 1..5),
        proptest::collection::vec(0..1000usize, 0..5),
    )
        .prop_map(|(h, a, b)| {
            let s = subset(&h, &a);
            let t: LabelSet = s.union(&subset(&h, &b)).copied().collect();
            (h, s, t)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ancestors_count_is_level_minus_one(h in hierarchy(40)) {
        for l in h.ids() {
            prop_assert_eq!(h.ancestors(l).unwrap().len() as u32, h.level(l) - 1);
        }
    }

    #[test]
    fn closure_is_monotone((h, s, t) in hierarchy_and_sets()) {
        let cs = h.closure(&s).unwrap();
        let ct = h.closure(&t).unwrap();
        prop_assert!(cs.is_subset(&ct));
        prop_assert!(h.is_closed(&cs));
    }

    #[test]
    fn minimize_of_a_single_closure((h, s, _) in hierarchy_and_sets()) {
        for &x in &s {
            let single: LabelSet = [x].into();
            prop_assert_eq!(h.minimize(&h.closure(&single).unwrap()).unwrap(), single);
        }
    }

    #[test]
    fn minimize_gives_an_antichain_that_closes_back((h, s, _) in hierarchy_and_sets()) {
        let closed = h.closure(&s).unwrap();
        let m = h.minimize(&closed).unwrap();
        prop_assert_eq!(h.closure(&m).unwrap(), closed);
        for &a in &m {
            for anc in h.ancestors(a).unwrap() {
                prop_assert!(!m.contains(&anc));
            }
        }
    }

    #[test]
    fn second_parent_is_rejected(h in hierarchy(20), pick in 0..1000usize) {
        let mut text = h.to_tsv();
        let k = pick % h.len();
        let child = h.name(LabelId(k as u32));
        let id = LabelId(k as u32);
        let other = h
            .ids()
            .find(|&p| p != id && Some(p) != h.parent(id))
            .map(|p| h.name(p).to_string())
            .or_else(|| h.parent(id).map(|_| "ROOT".to_string()));
        prop_assume!(other.is_some());
        text.push_str(&format!("{}\t{child}\n", other.unwrap()));
        prop_assert!(LabelHierarchy::parse(&text).is_err());
    }

    #[test]
    fn codec_round_trips((h, s, _) in hierarchy_and_sets(), seed in any::<u64>()) {
        let closed = h.closure(&s).unwrap();
        let vocab = build_vocab(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let capacity = 2 * h.len() + 2;
        for strategy in OrderingStrategy::ALL {
            let seq = encode(&closed, &h, &vocab, strategy, capacity, &mut rng).unwrap();
            prop_assert!(seq.is_well_formed(&vocab));
            let d = decode(seq.ids(), &vocab, &h, strategy);
            prop_assert_eq!(&d.labels, &closed);
            prop_assert!(d.diagnostics.is_clean());
            if !strategy.is_random() {
                // Well-formed sequences survive decode then encode unchanged.
                let again = encode(&d.labels, &h, &vocab, strategy, capacity, &mut rng).unwrap();
                prop_assert_eq!(again.ids(), seq.ids());
            }
        }
    }

    #[test]
    fn separator_counts((h, s, _) in hierarchy_and_sets()) {
        let closed = h.closure(&s).unwrap();
        let minimal = h.minimize(&closed).unwrap();
        let vocab = build_vocab(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let levels = |set: &LabelSet| set.iter().map(|&l| h.level(l)).collect::<BTreeSet<_>>().len();
        let mut seps = |strategy| {
            let seq = encode(&closed, &h, &vocab, strategy, 2 * h.len() + 2, &mut rng).unwrap();
            seq.active().iter().filter(|&&t| t == SEP).count()
        };
        prop_assert_eq!(seps(OrderingStrategy::ChildToParentLevelwise), levels(&closed));
        prop_assert_eq!(seps(OrderingStrategy::ParentToChildLevelwise), levels(&closed));
        prop_assert_eq!(seps(OrderingStrategy::MinimalChildrenLevelwise), levels(&minimal));
        prop_assert_eq!(seps(OrderingStrategy::PathSeparated), minimal.len());
        prop_assert_eq!(seps(OrderingStrategy::ChildToParentNoSep), 0);
        prop_assert_eq!(seps(OrderingStrategy::Shuffled), 0);
    }

    #[test]
    fn level_orders_reverse_each_other((h, s, _) in hierarchy_and_sets()) {
        let closed = h.closure(&s).unwrap();
        let vocab = build_vocab(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut groups = |strategy| {
            let seq = encode(&closed, &h, &vocab, strategy, 2 * h.len() + 2, &mut rng).unwrap();
            decode(seq.ids(), &vocab, &h, strategy).groups
        };
        let mut down = groups(OrderingStrategy::ChildToParentLevelwise);
        down.reverse();
        prop_assert_eq!(down, groups(OrderingStrategy::ParentToChildLevelwise));
    }

    #[test]
    fn shuffled_is_reproducible((h, s, _) in hierarchy_and_sets(), seed in any::<u64>()) {
        let closed = h.closure(&s).unwrap();
        let vocab = build_vocab(&h);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            encode(&closed, &h, &vocab, OrderingStrategy::Shuffled, 2 * h.len() + 2, &mut rng).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1..6usize, cols in 1..12usize, seed in any::<u64>(), scale in 0.1f32..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_array(&mut rng, &[rows, cols], scale);
        let p = softmax(&x, 1).unwrap();
        for r in 0..rows {
            let total: f64 = p.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6, "row {} sums to {}", r, total);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1..5usize, cols in 4..32usize, seed in any::<u64>(), shift in -50.0f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_array(&mut rng, &[rows, cols], 3.0).map(|v| v + shift);
        let spread = (0..rows).all(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f32>() / cols as f32;
            row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / cols as f32 > 0.1
        });
        prop_assume!(spread);
        let y = layer_norm(&x, &Array::full(&[cols], 1.0), &Array::zeros(&[cols]), 1e-5).unwrap();
        for r in 0..rows {
            let row: Vec<f64> = y.row(r).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-5, "mean {}", mean);
            prop_assert!((var - 1.0).abs() < 1e-3, "variance {}", var);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded(seed in any::<u64>(), p in 0.0f32..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_array(&mut rng, &[3, 7], 2.0);
        let eval = dropout(&x, p, false, &mut rng).unwrap();
        prop_assert_eq!(&eval, &x);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let d = tape.dropout(v, p, false, &mut rng).unwrap();
        prop_assert_eq!(tape.value(d), &x);
        let a = dropout(&x, p, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = dropout(&x, p, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn focal_is_bounded_and_monotone(a in 0.0f64..40.0, b in 0.0f64..40.0, gamma in 0.0f64..6.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (flo, fhi) = (focal_modulated(lo, gamma), focal_modulated(hi, gamma));
        prop_assert!(flo >= 0.0 && flo <= lo);
        prop_assert!(fhi >= 0.0 && fhi <= hi);
        if hi - lo > 1e-9 {
            prop_assert!(flo < fhi, "focal({}) = {} !< focal({}) = {}", lo, flo, hi, fhi);
        }
    }

    #[test]
    fn single_token_batch_equals_per_token(seed in any::<u64>(), gamma in 0.0f64..5.0, vocab in 5..20usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = common::random_array(&mut rng, &[1, vocab], 4.0);
        let target = [(seed % vocab as u64) as u32];
        prop_assume!(target[0] != 2);
        let cfg = |variant| LossConfig { variant, gamma, ..LossConfig::default() };
        let batch = compute(&logits, &target, &cfg(LossVariant::FocalBatch)).unwrap();
        let token = compute(&logits, &target, &cfg(LossVariant::FocalPerToken)).unwrap();
        prop_assert!((batch - token).abs() <= 1e-6 * batch.abs().max(1.0));
    }
}

fn label_sets(universe: u32, n: usize) -> impl Strategy<Value = Vec<LabelSet>> {
    proptest::collection::vec(
        proptest::collection::btree_set((0..universe).prop_map(LabelId), 0..5),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f1_is_permutation_invariant(
        (preds, golds, perm) in (1..40usize).prop_flat_map(|n| {
            (label_sets(12, n), label_sets(12, n), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let base = micro_macro_f1(&preds, &golds, None).unwrap();
        let p: Vec<LabelSet> = perm.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<LabelSet> = perm.iter().map(|&i| golds[i].clone()).collect();
        prop_assert_eq!(micro_macro_f1(&p, &g, None).unwrap(), base);
    }

    #[test]
    fn correct_sample_never_lowers_micro(
        (preds, golds, extra) in (1..30usize).prop_flat_map(|n| (label_sets(10, n), label_sets(10, n), label_sets(10, 1)))
    ) {
        let (before, _) = micro_macro_f1(&preds, &golds, None).unwrap();
        let mut p = preds.clone();
        let mut g = golds.clone();
        p.push(extra[0].clone());
        g.push(extra[0].clone());
        let (after, _) = micro_macro_f1(&p, &g, None).unwrap();
        prop_assert!(after >= before - 1e-15, "{} -> {}", before, after);
    }

    #[test]
    fn single_label_micro_is_accuracy(pairs in proptest::collection::vec((0..8u32, 0..8u32), 1..60)) {
        let preds: Vec<LabelSet> = pairs.iter().map(|&(p, _)| [LabelId(p)].into()).collect();
        let golds: Vec<LabelSet> = pairs.iter().map(|&(_, g)| [LabelId(g)].into()).collect();
        let (micro, _) = micro_macro_f1(&preds, &golds, None).unwrap();
        let acc = pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64;
        prop_assert!((micro - acc).abs() < 1e-12, "{} vs {}", micro, acc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loaded_label_sets_are_closed((h, s, t) in hierarchy_and_sets()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.jsonl");
        // Write raw, possibly non-closed sets by hand.
        let lines: String = [&s, &t]
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let names: Vec<&str> = set.iter().map(|&l| h.name(l)).collect();
                format!("{}\n", serde_json::json!({"id": i.to_string(), "text": "w", "labels": names}))
            })
            .collect();
        std::fs::write(&path, lines).unwrap();
        let (samples, report) = load_jsonl(&path, &h, false).unwrap();
        prop_assert_eq!(samples.len(), 2);
        for (sample, raw) in samples.iter().zip([&s, &t]) {
            prop_assert!(h.is_closed(&sample.labels));
            prop_assert_eq!(&sample.labels, &h.closure(raw).unwrap());
        }
        let expected_closed = [&s, &t].iter().filter(|x| !h.is_closed(x)).count();
        prop_assert_eq!(report.auto_closed, expected_closed);
        // A closed set survives a save/load cycle exactly.
        save_jsonl(&path, &samples, &h).unwrap();
        let (again, _) = load_jsonl(&path, &h, true).unwrap();
        prop_assert_eq!(again, samples);
    }

    #[test]
    fn synthetic_splits_are_stratified_and_reproducible(
        depth in 2..4u32,
        branching in 2..4u32,
        docs in 3..12usize,
        seed in any::<u64>(),
    ) {
        let cfg = SynthConfig {
            depth,
            branching,
            docs_per_leaf: docs,
            vocab_size: 800,
            pool_size: 4,
            seed,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let h = &ds.hierarchy;
        let leaf_of = |s: &Sample| *h.deepest_members(&s.labels).iter().next().unwrap();
        let mut per_leaf: BTreeMap<LabelId, [usize; 3]> = BTreeMap::new();
        for (k, split) in [&ds.train, &ds.dev, &ds.test].into_iter().enumerate() {
            for s in split {
                prop_assert_eq!(s.labels.len() as u32, depth);
                per_leaf.entry(leaf_of(s)).or_default()[k] += 1;
            }
        }
        prop_assert_eq!(per_leaf.len(), (branching as usize).pow(depth));
        for counts in per_leaf.values() {
            let total: usize = counts.iter().sum();
            for (k, frac) in [0.70, 0.15, 0.15].into_iter().enumerate() {
                let want = frac * total as f64;
                prop_assert!((counts[k] as f64 - want).abs() <= 1.0, "{:?} of {}", counts, total);
            }
        }
        // Label frequencies recounted from the samples match the leaf counts.
        let mut freq: BTreeMap<LabelId, usize> = BTreeMap::new();
        for s in ds.all_samples() {
            for &l in &s.labels {
                *freq.entry(l).or_default() += 1;
            }
        }
        for (&leaf, counts) in &per_leaf {
            prop_assert_eq!(freq[&leaf], counts.iter().sum::<usize>());
        }
        for l in h.ids().filter(|&l| !h.is_leaf(l)) {
            let below: usize = h.children(l).iter().map(|c| freq[c]).sum();
            prop_assert_eq!(freq[&l], below);
        }

        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        ds.save(a.path()).unwrap();
        generate(&cfg).unwrap().save(b.path()).unwrap();
        for name in ["taxonomy.tsv", "train.jsonl", "dev.jsonl", "test.jsonl"] {
            prop_assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }
}

#[test]
fn every_permutation_of_three_labels_is_reachable() {
    let h = LabelHierarchy::parse("ROOT\ta\nROOT\tb\nROOT\tc\n").unwrap();
    let vocab = build_vocab(&h);
    let all: LabelSet = h.ids().collect();
    let mut seen = BTreeSet::new();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = encode(&all, &h, &vocab, OrderingStrategy::Shuffled, 5, &mut rng).unwrap();
        seen.insert(seq.active().to_vec());
    }
    assert_eq!(seen.len(), 6);
}
