mod common;

use std::fs;
use std::path::Path;

use common::*;
use sts_core::storage::{load_manifest, read_bundle, read_results, write_bundle, write_results, Bundle};
use sts_core::{synthesize, ErrorClass, StsError, SynthSpec};

#[test]
fn round_trips_are_bitwise() {
    let mut r = rng(7);
    let dir = tempfile::tempdir().unwrap();
    for (i, (rows, cols)) in [(1, 1), (1, 7), (3, 3), (64, 512), (10, 64)].into_iter().enumerate() {
        let m = gaussian(&mut r, rows, cols).map(|x| x as f32 as f64);
        let p = dir.path().join(format!("m{i}.stse"));
        write_bundle(&m, &p).unwrap();
        let back = read_bundle(&p).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert!(back.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = fs::read(&p).unwrap();
        assert_eq!(Bundle::decode(&bytes).unwrap().encode(), bytes);
        assert_eq!(bytes.len(), 17 + 4 * rows * cols);
    }
}

#[test]
fn malformed_bundles_are_rejected_with_the_documented_error() {
    let dir = tempfile::tempdir().unwrap();
    for (name, bytes, expected) in malformed_bundles() {
        let err = Bundle::decode(&bytes).unwrap_err();
        assert_eq!(classify(&err), Some(expected), "{name}: {err}");
        assert_eq!(err.class(), ErrorClass::Validation, "{name}");
        let p = dir.path().join("bad.stse");
        fs::write(&p, &bytes).unwrap();
        assert_eq!(classify(&read_bundle(&p).unwrap_err()), Some(expected), "{name} from disk");
    }
}

#[test]
fn missing_bundle_is_an_io_error() {
    let err = read_bundle(Path::new("/nonexistent/dir/x.stse")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

fn small_dataset(dir: &Path) -> serde_json::Value {
    let spec = SynthSpec { num_classes: 3, dim: 8, views_per_sample: 4, samples_per_class: 2, ..Default::default() };
    synthesize(&spec, dir).unwrap();
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn expect_validation(dir: &Path, doc: &serde_json::Value, needle: &str) {
    let p = dir.join("edited.json");
    fs::write(&p, serde_json::to_string(doc).unwrap()).unwrap();
    let err = load_manifest(&p).unwrap_err();
    assert!(matches!(err, StsError::Validation(_)), "{needle}: {err}");
    assert!(err.to_string().contains(needle), "expected `{needle}` in `{err}`");
}

#[test]
fn manifest_negative_cases() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_dataset(dir.path());
    assert!(load_manifest(&dir.path().join("manifest.json")).is_ok());

    let mut doc = base.clone();
    doc["class_names"] = serde_json::json!(["a", "b"]);
    expect_validation(dir.path(), &doc, "rows");

    let mut doc = base.clone();
    doc["samples"][1]["sample_id"] = doc["samples"][0]["sample_id"].clone();
    expect_validation(dir.path(), &doc, "duplicate sample_id");

    let mut doc = base.clone();
    doc["samples"][0]["views"] = serde_json::json!("views/missing.stse");
    expect_validation(dir.path(), &doc, "not found");

    let mut doc = base.clone();
    doc["prototype_bundles"] = serde_json::json!(["prototypes/nope.stse"]);
    expect_validation(dir.path(), &doc, "not found");

    let mut doc = base.clone();
    doc.as_object_mut().unwrap().remove("logit_scale");
    expect_validation(dir.path(), &doc, "logit_scale");

    let mut doc = base.clone();
    doc["surprise"] = serde_json::json!(1);
    expect_validation(dir.path(), &doc, "surprise");

    let mut doc = base.clone();
    doc["schema_version"] = serde_json::json!(99);
    expect_validation(dir.path(), &doc, "schema_version");

    let mut doc = base.clone();
    doc["samples"][0]["label"] = serde_json::json!(3);
    expect_validation(dir.path(), &doc, "label 3");

    let mut doc = base.clone();
    doc["samples"][0]["original_index"] = serde_json::json!(4);
    expect_validation(dir.path(), &doc, "original_index");

    let mut doc = base.clone();
    doc["class_names"] = serde_json::json!(["a", "a", "b"]);
    expect_validation(dir.path(), &doc, "duplicate class name");

    let mut doc = base;
    doc["templates"] = serde_json::json!(["t0", "t1"]);
    expect_validation(dir.path(), &doc, "2 templates but 1");
}

#[test]
fn synthetic_dataset_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { num_classes: 4, dim: 16, views_per_sample: 8, samples_per_class: 2, ..Default::default() };
    let (data, _) = synthesize(&spec, dir.path()).unwrap();
    let loaded = sts_core::Dataset::open(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.fingerprint(), data.dataset.fingerprint());
    assert_eq!(loaded.prototypes.z(), data.dataset.prototypes.z());
}

#[test]
fn results_stream_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { num_classes: 3, dim: 8, views_per_sample: 8, samples_per_class: 2, ..Default::default() };
    let data = sts_core::generate(&spec).unwrap().dataset;
    let cfg = sts_core::AdaptConfig::default();
    let basis = cfg.build_basis(&data.prototypes).unwrap();
    let results = sts_core::run_all(&data, &basis, &cfg, 1).unwrap();
    let p = dir.path().join("out/results.jsonl");
    write_results(&results, &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), results.len());
    let back = read_results(&p).unwrap();
    for (a, b) in results.iter().zip(&back) {
        let mut a = a.clone();
        a.coefficients = None;
        assert_eq!(&a, b);
    }
}
