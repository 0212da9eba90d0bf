use std::path::PathBuf;

use nwflow::experiments::{self, NAMES};
use nwflow::format::matrix_csv;
use nwflow::tasks::{encode_binary_table, parse_binary_table, parse_csv_table, TaskSpec};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut v: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    assert!(!v.is_empty());
    v
}

fn csv_property(data: &[u8]) {
    let Ok(table) = parse_csv_table(data, "fuzz") else {
        return;
    };
    assert!(table.rows.as_slice().iter().all(|v| v.is_finite()));
    assert_eq!(table.columns.len(), table.rows.d());
    let text = matrix_csv(&table.columns, &table.rows).unwrap();
    let again = parse_csv_table(&text, "fuzz").unwrap();
    assert_eq!(again.rows, table.rows);
    assert_eq!(again.columns, table.columns);
}

fn bin_property(data: &[u8]) {
    if let Ok(table) = parse_binary_table(data, "fuzz") {
        assert_eq!(encode_binary_table(&table.rows).unwrap(), data);
    }
}

fn config_property(data: &[u8]) {
    if let Ok(spec) = serde_json::from_slice::<TaskSpec>(data) {
        let _ = spec.validate();
    }
    if let Ok(patch) = serde_json::from_slice::<serde_json::Value>(data) {
        for name in NAMES {
            let mut base = experiments::default_config(name).unwrap();
            let _ = experiments::merge_config(&mut base, &patch);
        }
    }
}

#[test]
fn csv_seeds() {
    let seeds = corpus("feature_csv");
    for (_, data) in &seeds {
        csv_property(data);
    }
    let ok: Vec<&str> = seeds
        .iter()
        .filter(|(_, d)| parse_csv_table(d, "seed").is_ok())
        .map(|(n, _)| n.as_str())
        .collect();
    assert_eq!(ok, ["blank_lines.csv", "header.csv", "no_header.csv", "quoted_header.csv"]);
}

#[test]
fn bin_seeds() {
    let seeds = corpus("feature_bin");
    for (_, data) in &seeds {
        bin_property(data);
    }
    let ok: Vec<&str> = seeds
        .iter()
        .filter(|(_, d)| parse_binary_table(d, "seed").is_ok())
        .map(|(n, _)| n.as_str())
        .collect();
    assert_eq!(ok, ["single.bin", "two_by_two.bin"]);
}

#[test]
fn config_seeds() {
    for (name, data) in corpus("task_config") {
        config_property(&data);
        if name == "gmm.json" || name == "fourier.json" || name == "moons.json" {
            let spec: TaskSpec = serde_json::from_slice(&data).unwrap();
            spec.validate().unwrap();
        }
    }
}

proptest! {
    #[test]
    fn csv_arbitrary(data in proptest::collection::vec(any::<u8>(), 0..256)) {
        csv_property(&data);
    }

    #[test]
    fn csv_textual(text in "[0-9a-z,.\\-\" \n]{0,120}") {
        csv_property(text.as_bytes());
    }

    #[test]
    fn bin_arbitrary(mut data in proptest::collection::vec(any::<u8>(), 0..128), n in 0u32..4, d in 0u32..4) {
        let mut head = b"NWF1".to_vec();
        head.extend(n.to_le_bytes());
        head.extend(d.to_le_bytes());
        head.append(&mut data);
        bin_property(&head);
    }

    #[test]
    fn config_arbitrary(text in "\\{[\"a-z_:0-9,\\[\\] ]{0,60}\\}") {
        config_property(text.as_bytes());
    }
}
