//! Generator statistics, on-disk layout and integrity checks.

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reidlab::data::{
    derive_attributes, identity_latent, load_dataset, render_person_u8, Dataset, DatasetSpec, GeneratorMode,
    IdentityLatent, ViewModel, NUM_PREDICATES, PREDICATE_NAMES,
};
use reidlab::Error;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn counts_follow_the_spec() {
    let spec = DatasetSpec { identities: 64, images_per_view: 4, views: 2, height: 32, width: 16, ..Default::default() };
    let ds = Dataset::generate(&spec).unwrap();
    assert_eq!(ds.len(), 512);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), false).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    assert_eq!(files.keys().filter(|k| k.starts_with("images/")).count(), 512);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 513);
    let attrs = fs::read_to_string(dir.path().join("attributes.csv")).unwrap();
    let rows: Vec<&str> = attrs.lines().skip(1).collect();
    assert_eq!(rows.len(), 64);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + spec.attributes));
    assert!(dir.path().join("images/0063_1_03.png").exists());
}

#[test]
fn same_seed_gives_identical_files() {
    let spec = DatasetSpec { identities: 4, images_per_view: 2, height: 32, width: 16, seed: 9, ..Default::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Dataset::generate(&spec).unwrap().save(a.path(), false).unwrap();
    Dataset::generate(&spec).unwrap().save(b.path(), false).unwrap();
    for entry in fs::read_dir(a.path().join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        let x = fs::read(a.path().join("images").join(&name)).unwrap();
        let y = fs::read(b.path().join("images").join(&name)).unwrap();
        assert_eq!(x, y);
    }
    assert_eq!(fs::read(a.path().join("manifest.json")).unwrap(), fs::read(b.path().join("manifest.json")).unwrap());
}

#[test]
fn view_gain_orders_brightness() {
    let latent = identity_latent(&DatasetSpec::default(), 3);
    let mean = |gain: f64| {
        let view = ViewModel { gain, ..ViewModel::identity() };
        let px = render_person_u8(&latent, &view, 64, 32, &mut ChaCha8Rng::seed_from_u64(1));
        px.iter().map(|&v| f64::from(v)).sum::<f64>() / px.len() as f64
    };
    assert!(mean(0.6) < mean(1.0));
    assert!(mean(1.0) < mean(1.4));
}

#[test]
fn zero_noise_identity_view_is_repeatable() {
    let latent = identity_latent(&DatasetSpec::default(), 0);
    let view = ViewModel::identity();
    let a = render_person_u8(&latent, &view, 32, 16, &mut ChaCha8Rng::seed_from_u64(5));
    let b = render_person_u8(&latent, &view, 32, 16, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn torso_pixels_track_the_latent_torso_color() {
    let spec = DatasetSpec { identities: 100, images_per_view: 1, height: 64, width: 32, seed: 21, ..Default::default() };
    let ds = Dataset::generate(&spec).unwrap();
    let (h, w) = (spec.height, spec.width);
    // rows and columns every torso covers whatever the aspect and jitter
    let (y0, y1) = ((0.30 * h as f64) as usize, (0.55 * h as f64) as usize);
    let (x0, x1) = ((0.44 * w as f64) as usize, (0.56 * w as f64).ceil() as usize);
    let mut measured = [vec![], vec![], vec![]];
    let mut latent = [vec![], vec![], vec![]];
    for rec in ds.images.iter().filter(|r| r.camera == 0) {
        let lat = identity_latent(&spec, rec.person);
        for ch in 0..3 {
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += f64::from(rec.pixels[(y * w + x) * 3 + ch]);
                }
            }
            measured[ch].push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            latent[ch].push(lat.torso[ch]);
        }
    }
    for ch in 0..3 {
        let rho = pearson(&measured[ch], &latent[ch]);
        assert!(rho > 0.9, "channel {ch}: rho {rho}");
    }
}

#[test]
fn attribute_marginals_are_not_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = [0usize; NUM_PREDICATES];
    for _ in 0..1000 {
        let a = derive_attributes(&IdentityLatent::sample(&mut rng), NUM_PREDICATES).unwrap();
        for (c, v) in counts.iter_mut().zip(a) {
            *c += usize::from(v);
        }
    }
    for (name, c) in PREDICATE_NAMES.iter().zip(counts) {
        let p = c as f64 / 1000.0;
        assert!(p > 0.05 && p < 0.95, "{name}: {p}");
    }
}

#[test]
fn attribute_bits_follow_the_latent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lat = IdentityLatent::sample(&mut rng);
    lat.torso = [1.0, 0.0, 0.0];
    lat.carried = true;
    let a = derive_attributes(&lat, NUM_PREDICATES).unwrap();
    let bit = |name: &str| a[PREDICATE_NAMES.iter().position(|n| *n == name).unwrap()];
    assert_eq!(bit("torso_red"), 1);
    assert_eq!(bit("carrying"), 1);
    assert_eq!(bit("torso_green"), 0);
}

#[test]
fn round_trip_preserves_everything() {
    let spec = DatasetSpec { identities: 6, images_per_view: 2, height: 32, width: 16, seed: 4, ..Default::default() };
    let ds = Dataset::generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), false).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    for (id, a) in back.attributes.iter().enumerate() {
        assert_eq!(a, &derive_attributes(&identity_latent(&spec, id), spec.attributes).unwrap());
    }
}

#[test]
fn generic_datasets_round_trip_without_attributes() {
    let spec = DatasetSpec { identities: 5, images_per_view: 1, height: 32, width: 16, mode: GeneratorMode::Generic, ..Default::default() };
    let ds = Dataset::generate(&spec).unwrap();
    assert_eq!(ds.num_attributes(), 0);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), false).unwrap();
    let header = fs::read_to_string(dir.path().join("attributes.csv")).unwrap();
    assert_eq!(header.lines().next(), Some("person_id"));
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn corrupted_image_is_named() {
    let spec = DatasetSpec { identities: 3, images_per_view: 1, height: 32, width: 16, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    Dataset::generate(&spec).unwrap().save(dir.path(), false).unwrap();
    let victim = dir.path().join("images/0001_0_00.png");
    let mut bytes = fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&victim, bytes).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        Error::Dataset { file, .. } => assert_eq!(file, "images/0001_0_00.png"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_empty_output_needs_force() {
    let spec = DatasetSpec { identities: 2, images_per_view: 1, height: 32, width: 16, ..Default::default() };
    let ds = Dataset::generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), false).unwrap();
    assert!(ds.save(dir.path(), false).is_err());
    ds.save(dir.path(), true).unwrap();
}
