//! Replays the checked-in fuzz seeds through the same assertions as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use dpzero::harness::{apply_overrides_to_json, parse_trace_csv, trace_to_csv, ExperimentConfig};
use dpzero::problems::Problem;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.display().to_string(), fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn problem_json_seeds_round_trip() {
    for (name, text) in seeds("problem_json") {
        let p = Problem::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let json = p.to_json().unwrap();
        assert_eq!(Problem::from_json(&json).unwrap().to_json().unwrap(), json, "{name}");
    }
}

#[test]
fn experiment_config_seeds_round_trip() {
    for (name, text) in seeds("experiment_config") {
        let cfg = ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let printed = cfg.to_json_pretty();
        assert_eq!(ExperimentConfig::from_json(&printed).unwrap().to_json_pretty(), printed);
    }
}

#[test]
fn trace_csv_seeds_round_trip() {
    for (name, text) in seeds("trace_csv") {
        let t = parse_trace_csv(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(trace_to_csv(&t).unwrap(), text, "{name}");
    }
}

#[test]
fn override_seeds_parse_or_reject() {
    let mut accepted = 0;
    for (_, text) in seeds("overrides") {
        let (doc, rest) = text.split_once('\0').unwrap();
        let sets: Vec<&str> = rest.lines().collect();
        accepted += apply_overrides_to_json(doc, &sets).is_ok() as usize;
    }
    assert!(accepted >= 1);
}
