use std::fs;

use oodkit::store::load_bundle;
use oodkit::synth::{synthesize, SynthSpec};
use oodkit::{fit_on_bundle, DetectorSpec, Method};

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        n_per_class: 50,
        n_test: 60,
        n_ood: 40,
        ..SynthSpec::default()
    }
}

#[test]
fn write_then_load_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = synthesize(&small(3)).unwrap();
    let manifest = bundle.write(tmp.path()).unwrap();
    let loaded = load_bundle(&manifest).unwrap();
    assert_eq!(loaded.id_train, bundle.id_train);
    assert_eq!(loaded.id_test, bundle.id_test);
    assert_eq!(loaded.ood, bundle.ood);
    assert_eq!(loaded.head, bundle.head);
}

#[test]
fn writes_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthesize(&small(4)).unwrap().write(tmp.path().join("a")).unwrap();
    let b = synthesize(&small(4)).unwrap().write(tmp.path().join("b")).unwrap();
    for entry in fs::read_dir(a.parent().unwrap()).unwrap() {
        let entry = entry.unwrap();
        let other = b.parent().unwrap().join(entry.file_name());
        assert_eq!(fs::read(entry.path()).unwrap(), fs::read(other).unwrap());
    }
}

#[test]
fn malformed_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesize(&small(5)).unwrap().write(tmp.path()).unwrap();
    fs::copy(tmp.path().join("head_bias.npy"), tmp.path().join("id_test_features.npy")).unwrap();
    let err = load_bundle(&manifest).unwrap_err().to_string();
    assert!(err.contains("id_test_features.npy"), "{err}");

    fs::write(tmp.path().join("head_weights.npy"), b"not an npy file").unwrap();
    let err = load_bundle(&manifest).unwrap_err().to_string();
    assert!(err.contains("head_weights.npy"), "{err}");
}

#[test]
fn unknown_manifest_version_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthesize(&small(6)).unwrap().write(tmp.path()).unwrap();
    let text = fs::read_to_string(&manifest).unwrap().replace("\"version\": 1", "\"version\": 9");
    fs::write(&manifest, text).unwrap();
    assert!(load_bundle(&manifest).is_err());
}

#[test]
fn detectors_round_trip_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = synthesize(&small(7)).unwrap();
    for method in [Method::Dice, Method::RmdsPca, Method::KnnPca] {
        let det = fit_on_bundle(&DetectorSpec::new(method), &bundle, 0).unwrap();
        let dir = tmp.path().join(method.name());
        oodkit::detectors::save_detector(&det, &dir).unwrap();
        let back = oodkit::detectors::load_detector(&dir).unwrap();
        let x = &bundle.ood[0].set.features;
        assert_eq!(det.score_rows(x).unwrap(), back.score_rows(x).unwrap());
    }
}
