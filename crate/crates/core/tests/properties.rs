//! Property tests over configuration, data loading, quantization and metrics.

use jointok_core::autograd::{Graph, Tensor};
use jointok_core::config::{parse_override, resolve};
use jointok_core::evaluator::{frechet_distance, FeatureStatistics};
use jointok_core::quantizer::{code_usage, histogram, quantize_with};
use jointok_core::{BatchSchedule, Dataset};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keys whose every value in the generated ranges passes validation.
fn override_strategy() -> impl Strategy<Value = (String, toml::Value)> {
    prop_oneof![
        (0.0f64..2.0).prop_map(|v| ("lambda_ntp".to_string(), toml::Value::Float(v))),
        (1e-5f64..1e-2).prop_map(|v| ("lr".to_string(), toml::Value::Float(v))),
        (0.0f64..1.0).prop_map(|v| ("nested_dropout".to_string(), toml::Value::Float(v))),
        (0u64..1000).prop_map(|v| ("seed".to_string(), toml::Value::Integer(v as i64))),
        (1usize..64).prop_map(|v| ("steps".to_string(), toml::Value::Integer(v as i64))),
        any::<bool>().prop_map(|v| ("ntp_backprop".to_string(), toml::Value::Boolean(v))),
    ]
}

fn as_file(overrides: &[(String, toml::Value)]) -> String {
    let mut t = toml::Table::new();
    for (k, v) in overrides {
        t.insert(k.clone(), v.clone());
    }
    toml::to_string(&t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_layers_are_associative(a in prop::collection::vec(override_strategy(), 0..6), b in prop::collection::vec(override_strategy(), 0..6)) {
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let flat = resolve("tiny", None, &all).unwrap();
        // (preset < a) as a file, then b
        let layered = resolve("tiny", Some(&as_file(&a)), &b).unwrap();
        prop_assert_eq!(&flat, &layered);
        // a fully resolved config used as a file is a fixed point
        let snapshot = resolve("desk", Some(&flat.to_toml()), &[]).unwrap();
        prop_assert_eq!(&flat, &snapshot);
    }

    #[test]
    fn last_override_wins(a in prop::collection::vec(override_strategy(), 1..8)) {
        let cfg = resolve("tiny", None, &a).unwrap();
        let table = toml::Value::try_from(&cfg).unwrap();
        for (k, _) in &a {
            let last = &a.iter().rev().find(|(k2, _)| k2 == k).unwrap().1;
            prop_assert_eq!(&table[k.as_str()], last);
        }
    }

    #[test]
    fn histogram_conserves_tokens(ids in prop::collection::vec(0usize..16, 1..200)) {
        let h = histogram(&ids, 16).unwrap();
        prop_assert_eq!(h.iter().sum::<u64>(), ids.len() as u64);
        let u = code_usage(&ids, 16).unwrap();
        prop_assert!((0.0..=1.0).contains(&u));
    }

    #[test]
    fn quantized_value_is_a_codebook_row(seed in 0u64..1000, k in 2usize..9, d in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::<f64>::new();
        let z = g.input(Tensor::randn(vec![1, n, d], 1.0, &mut rng));
        let c = g.input(Tensor::randn(vec![k, d], 1.0, &mut rng));
        let q = quantize_with(z, c, 1.0).unwrap();
        let (zq, ind, cb) = (q.z_q.value(), q.ind.value(), c.value());
        for (t, &id) in q.ids.iter().enumerate() {
            prop_assert_eq!(&zq.data()[t * d..(t + 1) * d], &cb.data()[id * d..(id + 1) * d]);
            let row = &ind.data()[t * k..(t + 1) * k];
            let onehot = row.iter().enumerate().all(|(j, &v)| v == f64::from(u8::from(j == id)));
            prop_assert!(onehot);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..500, dim in 1usize..5, shift in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |n: usize, off: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0) + off).collect()).collect()
        };
        let a = FeatureStatistics::from_rows(&rows(40, 0.0)).unwrap();
        let b = FeatureStatistics::from_rows(&rows(50, shift)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn batches_cover_each_epoch_once(len in 1usize..60, batch in 1usize..9, seed in 0u64..100, drop_last in any::<bool>()) {
        let s = BatchSchedule { len, batch_size: batch, drop_last, seed };
        let mut seen: Vec<usize> = s.epoch(0).concat();
        prop_assert!(s.epoch(0).iter().all(|b| b.len() <= batch));
        seen.sort();
        seen.dedup();
        let expect = if drop_last { len / batch * batch } else { len };
        prop_assert_eq!(seen.len(), expect);
    }
}

#[test]
fn override_parsing_reads_toml_literals() {
    assert_eq!(parse_override("lr=3e-4").unwrap().1, toml::Value::Float(3e-4));
    assert_eq!(parse_override("ntp_backprop=false").unwrap().1, toml::Value::Boolean(false));
    assert_eq!(parse_override("dataset=/data/imgs").unwrap().1, toml::Value::String("/data/imgs".into()));
    assert!(parse_override("nokey").is_err());
    let typo = resolve("tiny", None, &[parse_override("lambda_ntpp=1").unwrap()]).unwrap_err().to_string();
    assert!(typo.contains("lambda_ntp`"), "{typo}");
}

#[test]
fn preset_l_carries_published_weights() {
    let cfg = resolve("L", None, &[]).unwrap();
    assert_eq!(cfg.lambda_ntp, 0.1);
    let cfg = resolve("L", None, &[parse_override("nested_dropout=0").unwrap()]).unwrap();
    assert_eq!(cfg.nested_dropout, 0.0);
    assert!(resolve("L", None, &[parse_override("nested_dropout=1.5").unwrap()]).is_err());
}

fn write_image_dir(root: &std::path::Path, per_class: &[usize], size: u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, &n) in per_class.iter().enumerate() {
        let dir = root.join(format!("class_{c}"));
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            let img = image::RgbImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
            img.save(dir.join(format!("{i}.png"))).unwrap();
        }
    }
}

#[test]
fn directory_loader_batches_and_normalizes() {
    let tmp = tempfile::tempdir().unwrap();
    write_image_dir(tmp.path(), &[6, 4], 8);
    let d = Dataset::<f32>::from_dir(tmp.path(), 8).unwrap();
    assert_eq!((d.len(), d.num_classes), (10, 2));
    assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 4);
    let keep = BatchSchedule { len: d.len(), batch_size: 4, drop_last: false, seed: 0 };
    let drop = BatchSchedule { drop_last: true, ..keep.clone() };
    assert_eq!(keep.batches_per_epoch(), 3);
    assert_eq!(drop.batches_per_epoch(), 2);
    for idx in keep.epoch(0) {
        let px = d.gather(&idx).pixels;
        assert!(px.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
    let err = Dataset::<f32>::from_dir(tmp.path(), 16).unwrap_err().to_string();
    assert!(err.contains("resolution"), "{err}");
    assert!(Dataset::<f32>::from_dir(&tmp.path().join("missing"), 8).is_err());
}

#[test]
fn synthetic_corpus_is_seeded() {
    let a = Dataset::<f32>::synthetic(32, 16, 4, 9);
    let b = Dataset::<f32>::synthetic(32, 16, 4, 9);
    let s = BatchSchedule { len: 32, batch_size: 8, drop_last: true, seed: 9 };
    let first = s.for_step(0).unwrap();
    assert_eq!(a.gather(&first).pixels.data(), b.gather(&first).pixels.data());
    assert!(a.images.iter().all(|t| t.data().iter().all(|&v| (-1.0..=1.0).contains(&v))));
    let (train, val) = a.split(8, 9).unwrap();
    let (train2, val2) = b.split(8, 9).unwrap();
    assert_eq!((train.labels, val.labels), (train2.labels, val2.labels));
}
