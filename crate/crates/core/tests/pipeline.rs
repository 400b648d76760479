use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use pareidolia_core::fixture::{self, FixtureSpec};
use pareidolia_core::pipeline::{self, Experiment, PipelineError, RunLock, RunOptions, Stage};

fn committed_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/desk")
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn fresh_fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture::generate(dir.path(), &FixtureSpec::default()).unwrap();
    (dir, f.experiment_manifest)
}

#[test]
fn committed_fixture_matches_generator() {
    let (dir, _) = fresh_fixture();
    let generated = files(dir.path());
    let mut committed = files(&committed_fixture());
    committed.retain(|k, _| !k.starts_with("out") && k != ".gitignore");
    assert_eq!(generated.keys().collect::<Vec<_>>(), committed.keys().collect::<Vec<_>>());
    for (k, v) in &generated {
        assert!(committed[k] == *v, "{k} differs from the generator output");
    }
    assert_eq!(generated.keys().filter(|k| k.ends_with(".png")).count(), 60 * 2 + 20 * 2 + 30 * 3);
}

#[test]
fn all_stages_produce_every_artifact() {
    let (_dir, manifest) = fresh_fixture();
    let exp = Experiment::load(&manifest).unwrap();
    pipeline::run(&exp, Stage::All, RunOptions::default()).unwrap();
    let out = files(&exp.output_dir);
    for name in [
        "train/head.pphd",
        "train/train_report.json",
        "train/train_epochs.csv",
        "behavior/pareidolia.csv",
        "behavior/face_inversion.csv",
        "behavior/object_inversion.csv",
        "behavior/inversion_contrast.csv",
        "behavior/battery.json",
        "psychometrics/psychometric_bins.csv",
        "psychometrics/psychometric_curve.csv",
        "psychometrics/psychometric_fit.json",
        "repspace/unit_map.csv",
        "repspace/unit_map.ppm",
        "repspace/distances.csv",
        "run.json",
    ] {
        assert!(out.contains_key(name), "missing {name}");
    }
    let stamp = format!("manifest_hash={} seed={}", exp.manifest_hash, exp.manifest.seed);
    for (name, bytes) in &out {
        if name.ends_with(".ppfc") {
            continue;
        }
        let text = String::from_utf8_lossy(bytes);
        let json_stamp = format!("\"manifest_hash\":\"{}\"", exp.manifest_hash);
        let compact: String = text.split_whitespace().collect();
        assert!(text.contains(&stamp) || compact.contains(&json_stamp), "{name} carries no provenance");
    }
    let report: serde_json::Value = serde_json::from_slice(&out["train/train_report.json"]).unwrap();
    assert!(report["best_val_acc"].as_f64().unwrap() >= 0.8, "{}", report["best_val_acc"]);
    assert!(!out.contains_key(RunLock::FILE));
}

#[test]
fn partial_stages_follow_dependencies() {
    let (_dir, manifest) = fresh_fixture();
    let exp = Experiment::load(&manifest).unwrap();
    let err = pipeline::run(&exp, Stage::Train, RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { .. }), "{err}");
    pipeline::run(&exp, Stage::Extract, RunOptions::default()).unwrap();
    let err = pipeline::run(&exp, Stage::Behave, RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { stage: "train", .. }), "{err}");
    for s in [Stage::Train, Stage::Behave, Stage::Psycho, Stage::Repspace] {
        pipeline::run(&exp, s, RunOptions::default()).unwrap();
    }
}

#[test]
fn held_lock_blocks_a_second_run() {
    let (_dir, manifest) = fresh_fixture();
    let exp = Experiment::load(&manifest).unwrap();
    let _held = RunLock::acquire(&exp.output_dir).unwrap();
    let err = pipeline::run(&exp, Stage::Extract, RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::Locked(_)));
}

fn cli(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_pareidolia")).args(args).output().unwrap();
    out.status.code().unwrap()
}

#[test]
fn cli_exit_codes() {
    let (dir, manifest) = fresh_fixture();
    let m = manifest.to_str().unwrap();
    assert_eq!(cli(&["run", "--manifest", m, "--stage", "train"]), 3);
    assert_eq!(cli(&["run", "--manifest", m, "--stage", "extract", "--jobs", "2"]), 0);

    // Swap in a backbone with different weights: caches are now stale.
    let model = dir.path().join("desk_backbone.onnx");
    let original = std::fs::read(&model).unwrap();
    std::fs::write(&model, pareidolia_core::backbone::fixtures::desk_backbone(99).encode()).unwrap();
    assert_eq!(cli(&["run", "--manifest", m, "--stage", "train"]), 4);
    assert_eq!(cli(&["run", "--manifest", m, "--stage", "extract"]), 4);
    assert_eq!(cli(&["run", "--manifest", m, "--stage", "extract", "--force"]), 0);
    std::fs::write(&model, original).unwrap();
    assert_eq!(cli(&["run", "--manifest", m, "--stage", "extract", "--force"]), 0);

    let text = std::fs::read_to_string(&manifest).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text.replace("judgments.csv", "nowhere.csv")).unwrap();
    assert_eq!(cli(&["run", "--manifest", bad.to_str().unwrap()]), 2);
    std::fs::write(&bad, format!("{text}\nunknown_key = 1\n")).unwrap();
    assert_eq!(cli(&["run", "--manifest", bad.to_str().unwrap()]), 2);
    // an 8x9 grid cannot hold 64 units; caught when the unit map is built
    std::fs::write(&bad, text.replace("grid_cols = 8", "grid_cols = 9")).unwrap();
    assert_eq!(cli(&["run", "--manifest", bad.to_str().unwrap()]), 2);
    std::fs::write(&bad, text.replace("learning_rate = 0.01", "learning_rate = -1.0")).unwrap();
    assert_eq!(cli(&["run", "--manifest", bad.to_str().unwrap()]), 2);

    let start = text.find("[train.optimizer]").unwrap();
    let end = text.find("[bootstrap]").unwrap();
    let divergent =
        format!("{}[train.optimizer]\nkind = \"sgd\"\nlearning_rate = 1e307\n\n{}", &text[..start], &text[end..]);
    std::fs::write(&bad, divergent).unwrap();
    assert_eq!(cli(&["run", "--manifest", bad.to_str().unwrap(), "--stage", "train"]), 5);
}

#[test]
fn manifest_defaults() {
    let m = pipeline::ExperimentManifest::parse(
        "seed = 3\nmodel = \"m.onnx\"\ndatasets = [\"a.tsv\"]\njudgments = \"j.csv\"\noutput_dir = \"out\"\n",
    )
    .unwrap();
    assert_eq!(m.train.epochs, 40);
    assert_eq!(m.train.batch_size, 64);
    assert_eq!(m.train.optimizer, pareidolia_core::head::Optimizer::default());
    assert_eq!(m.bootstrap.n_resamples, 2000);
    assert_eq!(m.units.alpha, 0.05);
    assert_eq!((m.units.grid_rows, m.units.grid_cols), (None, None));
}
