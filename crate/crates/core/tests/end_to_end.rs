use std::fs;

use csi_djscc::data_gen::{generate_dataset, load_dataset, save_dataset, Split, MANIFEST_FILE};
use csi_djscc::evaluation::{cliff_metric, ResultSet};
use csi_djscc::experiments::{load_results, run_experiment, ExperimentConfig, RunPaths};
use csi_djscc::Error;

#[test]
fn smoke_run_is_complete_and_reproducible() {
    let cfg = ExperimentConfig::load("smoke").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(&cfg, dir.path());
    let r = run_experiment(&cfg, None, &paths).unwrap();

    for e in &cfg.models {
        assert!(r.curves.iter().any(|c| c.label.starts_with(&e.label)), "no curve for {}", e.label);
    }
    for c in &r.curves {
        assert_eq!(c.snr_grid_db, cfg.grid);
        assert!(c.nmse_db.iter().all(|v| v.is_finite()), "{}: {:?}", c.label, c.nmse_db);
        assert!(cliff_metric(c).unwrap() >= 0.0);
    }
    for f in ["results.json", "report.md", "config.resolved.json"] {
        assert!(paths.run.join(f).exists(), "{f}");
    }
    let loaded = load_results(&paths).unwrap();
    assert_eq!(loaded.to_json().unwrap(), r.to_json().unwrap());

    let again = tempfile::tempdir().unwrap();
    let r2 = run_experiment(&cfg, None, &RunPaths::new(&cfg, again.path())).unwrap();
    assert_eq!(r2.to_json().unwrap(), r.to_json().unwrap());
}

#[test]
fn dataset_round_trips_and_rejects_damage() {
    let s = ExperimentConfig::load("smoke").unwrap().scenario();
    let d = generate_dataset(&s, 6, 2, 2, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&d, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.content_hash(), d.content_hash());
    assert_eq!(back.split(Split::Val).len(), 2);

    let manifest = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptManifest { .. })));

    let text = text.replacen("csi-djscc-dataset/1", "csi-djscc-dataset/0", 1);
    fs::write(&manifest, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Version { .. })));

    assert!(matches!(load_dataset(&dir.path().join("absent")), Err(Error::Io { .. })));
}

#[test]
fn results_file_is_validated_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("results.json");
    fs::write(&p, "not json").unwrap();
    assert!(ResultSet::load(&p).is_err());
}
