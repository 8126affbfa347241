//! Checkpoint round trips and cross-task weight transfer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidlab::backbone::{build_backbone, stage_of, BackboneConfig};
use reidlab::gate::{GateConfig, ReidModel};
use reidlab::heads::{HeadKind, SourceModel};
use reidlab::weights::{LoadPolicy, WeightStore};
use reidlab::{Graph, Mode, Module, Tensor};

fn cfg() -> BackboneConfig {
    BackboneConfig { input_height: 32, input_width: 16, widths: [4, 4, 8, 8, 16], ..Default::default() }
}

fn names(m: &impl Module) -> Vec<String> {
    m.param_names()
}

#[test]
fn forward_ranges_compose_bitwise() {
    let bb = build_backbone(&cfg(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::from_fn(&[2, 3, 32, 16], |_| rng.gen::<f64>());
    let mut g = Graph::new();
    let x = g.input(&img);
    let direct = bb.forward_range(&mut g, x, 1, 4, Mode::Eval).unwrap();
    let s3 = bb.forward_range(&mut g, x, 1, 3, Mode::Eval).unwrap();
    let s4 = bb.forward_range(&mut g, s3, 4, 4, Mode::Eval).unwrap();
    assert_eq!(g.value(direct), g.value(s4));
    assert_eq!(g.shape(direct), [2, 8, 2, 1]);
}

#[test]
fn stage_shapes_scale_with_input() {
    let bb = build_backbone(&BackboneConfig::default().with_input(64, 32), 0).unwrap();
    assert_eq!(bb.output_shape(4)[1..], [4, 2]);
    let bb = build_backbone(&BackboneConfig::default(), 0).unwrap();
    let spatial: Vec<[usize; 2]> = (1..=5).map(|s| [bb.output_shape(s)[1], bb.output_shape(s)[2]]).collect();
    assert_eq!(spatial, [[32, 16], [32, 16], [16, 8], [8, 4], [4, 2]]);
}

#[test]
fn strict_round_trip_is_bitwise_and_byte_exact() {
    let model = SourceModel::new(build_backbone(&cfg(), 5).unwrap(), HeadKind::Classify, 7, 5).unwrap();
    let store = WeightStore::from_module(&model);
    let bytes = store.to_bytes().unwrap();
    let back = WeightStore::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.rtlw");
    store.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let mut fresh = SourceModel::new(build_backbone(&cfg(), 99).unwrap(), HeadKind::Classify, 7, 99).unwrap();
    WeightStore::load(&path).unwrap().apply(&mut fresh, LoadPolicy::Strict).unwrap();
    for n in names(&model) {
        let (a, b) = (model.find(&n).unwrap(), fresh.find(&n).unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor), "{n}");
    }
}

#[test]
fn classification_checkpoint_fills_exactly_stages_one_to_four() {
    let source = SourceModel::new(build_backbone(&cfg(), 11).unwrap(), HeadKind::Classify, 5, 11).unwrap();
    let store = WeightStore::from_module(&source);
    let bb = build_backbone(&cfg(), 12).unwrap().truncate(4).unwrap();
    let mut reid = ReidModel::new(bb, GateConfig { hidden: 8, ..Default::default() }, 13).unwrap();
    let before = reid.clone();
    let report = store.apply(&mut reid, LoadPolicy::PrefixMatch).unwrap();

    // the oracle: every source tensor in stages 1..=4, by name
    let mut want: Vec<String> = names(&source).into_iter().filter(|n| matches!(stage_of(n), Some(1..=4))).collect();
    let mut copied = report.copied.clone();
    want.sort();
    copied.sort();
    assert_eq!(copied, want);
    assert!(report.skipped.iter().any(|n| n.starts_with("head.")));
    assert!(report.skipped.iter().all(|n| n.starts_with("head.") || stage_of(n) == Some(5)));
    assert!(report.untouched.iter().all(|n| n.starts_with("lstm.")));
    assert!(report.running_stats_transferred);

    for n in names(&reid) {
        let got = &reid.find(&n).unwrap().tensor;
        if n.starts_with("lstm.") {
            assert_eq!(got, &before.find(&n).unwrap().tensor, "{n} should keep its init");
        } else {
            let src = store.tensor(&n).unwrap();
            assert!(got.data().iter().zip(src.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{n}");
        }
    }
}

#[test]
fn truncated_file_leaves_stage_five_fresh() {
    let small = build_backbone(&cfg(), 1).unwrap().truncate(4).unwrap();
    let store = WeightStore::from_module(&small);
    let mut full = SourceModel::new(build_backbone(&cfg(), 2).unwrap(), HeadKind::Attr, 3, 2).unwrap();
    let before = full.clone();
    let report = store.apply(&mut full, LoadPolicy::PrefixMatch).unwrap();
    assert!(!report.copied.is_empty());
    for n in names(&full) {
        if stage_of(&n) == Some(5) || n.starts_with("head.") {
            assert_eq!(full.find(&n), before.find(&n), "{n}");
            assert!(report.untouched.contains(&n));
        }
    }
    assert!(store.apply(&mut full, LoadPolicy::Strict).is_err());
}

#[test]
fn truncation_keeps_prefix_parameters_bitwise() {
    let full = build_backbone(&cfg(), 8).unwrap();
    for keep in 3..=5 {
        let t = full.clone().truncate(keep).unwrap();
        for (n, e) in t.params().iter() {
            assert!(stage_of(n).unwrap() <= keep);
            assert_eq!(&e.tensor, &full.params().get(n).unwrap().tensor);
        }
        let expected = full.params().names().filter(|n| stage_of(n).unwrap() <= keep).count();
        assert_eq!(t.params().len(), expected);
    }
}
