mod common;

use std::fs;

use avsep::dataset::{build_mix_dataset, draw_gains, entry_rng, read_index, IndexRecord, MixOptions};
use avsep::manifest::{read_manifest, MixManifestEntry};
use avsep::PipelineError;
use avsep_core::dsp::mix_sources;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn manifest_resolves_relative_paths_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let m = common::small_sources(tmp.path(), 2, 0.2, 2, 1);
    let entries = read_manifest(&m).unwrap();
    assert_eq!(entries.len(), 2);
    assert!(entries[0].sources[0].starts_with(tmp.path()));
    assert_eq!(entries[0].duration, 0.2);
    assert!(entries.iter().all(|e| e.validate().is_ok()));

    let mut one = entries[0].clone();
    one.sources.truncate(1);
    one.mouths.truncate(1);
    assert!(one.validate().is_err());
    let mut five = entries[0].clone();
    five.sources = vec![five.sources[0].clone(); 5];
    five.mouths = vec![five.mouths[0].clone(); 5];
    assert!(five.validate().is_err());
    let mut missing = entries[0].clone();
    missing.sources[1] = tmp.path().join("nope.wav");
    assert!(missing.validate().unwrap_err().contains("missing"));

    let line: MixManifestEntry =
        serde_json::from_str(r#"{"utterance_id":"a","sources":["x.wav","y.wav"],"mouths":["x.mroi","y.mroi"]}"#)
            .unwrap();
    assert_eq!(line.duration, 2.0);
    fs::write(tmp.path().join("bad.jsonl"), "{\"utterance_id\": 3}\n").unwrap();
    assert!(matches!(
        read_manifest(tmp.path().join("bad.jsonl")),
        Err(PipelineError::Manifest { line: 1, .. })
    ));
}

#[test]
fn mixing_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let m = common::small_sources(&tmp.path().join("src"), 2, 0.2, 2, 2);
    let entries = read_manifest(&m).unwrap();
    let opts = MixOptions {
        seed: 11,
        ..MixOptions::default()
    };
    build_mix_dataset(&entries, tmp.path().join("a"), &opts).unwrap();
    build_mix_dataset(&entries, tmp.path().join("b"), &opts).unwrap();
    let (a, b) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    assert_eq!(a.len(), 1 + 2 * 5);
    assert_eq!(a, b);
    build_mix_dataset(&entries, tmp.path().join("c"), &MixOptions { seed: 12, ..opts }).unwrap();
    assert_ne!(a, dir_bytes(&tmp.path().join("c")));
}

#[test]
fn zero_range_gives_zero_offsets() {
    let tmp = tempfile::tempdir().unwrap();
    let m = common::small_sources(&tmp.path().join("src"), 3, 0.2, 3, 3);
    let entries = read_manifest(&m).unwrap();
    let opts = MixOptions {
        snr_range: (0.0, 0.0),
        ..MixOptions::default()
    };
    let r = build_mix_dataset(&entries, tmp.path().join("d"), &opts).unwrap();
    assert!(r.written.iter().all(|w| w.gains_db.iter().all(|&g| g == 0.0)));
}

#[test]
fn gain_draws_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..10_000).map(|_| draw_gains(&mut rng, 2, (-5.0, 5.0))[1]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() < 0.1, "{mean}");
    assert!(draws.iter().all(|g| (-5.0..=5.0).contains(g)));
    // variance of U(-5, 5) is 100/12
    let var = draws.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    assert!((var - 100.0 / 12.0).abs() < 0.3, "{var}");
}

#[test]
fn failing_entries_are_recorded_and_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let m = common::small_sources(&tmp.path().join("src"), 2, 0.2, 2, 4);
    let mut entries = read_manifest(&m).unwrap();
    entries[1].mouths[0] = tmp.path().join("gone.mroi");
    let out = tmp.path().join("d");
    let r = build_mix_dataset(&entries, &out, &MixOptions::default()).unwrap();
    assert_eq!((r.written.len(), r.failed.len()), (1, 1));
    let idx = read_index(&out).unwrap();
    assert!(matches!(&idx[1], IndexRecord::Error { utterance_id, .. } if utterance_id == "u1"));
    assert!(!out.join("u1").exists());

    // source too short for the requested duration
    let mut long = entries.clone();
    long.iter_mut().for_each(|e| e.duration = 5.0);
    assert!(matches!(
        build_mix_dataset(&long, tmp.path().join("e"), &MixOptions::default()),
        Err(PipelineError::AllEntriesFailed(2))
    ));
    let bad = MixOptions {
        snr_range: (3.0, -3.0),
        ..MixOptions::default()
    };
    assert!(build_mix_dataset(&entries, tmp.path().join("f"), &bad).is_err());
}

#[test]
fn materialised_mixture_matches_requested_offsets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::small_dataset(tmp.path(), 3, 0.2, 3, 6);
    for ex in &data {
        let p0 = ex.targets[0].power();
        for (t, g) in ex.targets.iter().zip(&ex.record.gains_db) {
            // targets are stored as float32
            assert!((10.0 * (t.power() / p0).log10() - g).abs() < 1e-4);
        }
        let sum: Vec<f64> = (0..ex.mixture.len()).map(|k| ex.targets.iter().map(|t| t.samples[k]).sum()).collect();
        let err = sum.iter().zip(&ex.mixture.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
    }
}

#[test]
fn remix_redraws_gains_over_the_same_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::small_dataset(tmp.path(), 1, 0.2, 2, 7);
    let mut rng = entry_rng(1, 0);
    let r = data[0].remix(&mut rng, (-5.0, 5.0)).unwrap();
    assert_ne!(r.record.gains_db, data[0].record.gains_db);
    let offset = 10.0 * (r.targets[1].power() / r.targets[0].power()).log10();
    assert!((offset - r.record.gains_db[1]).abs() < 1e-9);
    let mix = mix_sources(&r.targets, &[0.0, offset], None).unwrap();
    assert!(mix.mixture.samples.iter().zip(&r.mixture.samples).all(|(a, b)| (a - b).abs() < 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gains_stay_in_range(lo in -20.0f64..20.0, width in 0.0f64..10.0, seed in 0u64..1000, s in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = draw_gains(&mut rng, s, (lo, lo + width));
        prop_assert_eq!(g.len(), s);
        prop_assert_eq!(g[0], 0.0);
        prop_assert!(g[1..].iter().all(|v| *v >= lo && *v <= lo + width));
    }
}
