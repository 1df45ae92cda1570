use std::path::PathBuf;

use msan::data::{generate_synthetic, load_dataset, read_dataset, save_dataset, write_dataset, GeneratorConfig};
use msan::Error;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn save_load_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_synthetic(
        &GeneratorConfig {
            num_clips: 120,
            ..Default::default()
        },
        21,
    )
    .unwrap();
    let first = dir.path().join("a.jsonl");
    save_dataset(&records, &first).unwrap();
    let loaded = load_dataset(&first).unwrap();
    assert_eq!(loaded, records);
    let mut again = Vec::new();
    write_dataset(&loaded, &mut again).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), again);
}

#[test]
fn canonical_record_loads() {
    let records = load_dataset(&fixtures().join("canonical.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    records[0].validate(0).unwrap();
}

#[test]
fn malformed_fixtures_name_their_field() {
    let manifest = std::fs::read_to_string(fixtures().join("malformed/expected.tsv")).unwrap();
    let mut seen = 0;
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let (file, field) = line.split_once('\t').unwrap();
        let text = std::fs::read(fixtures().join("malformed").join(file)).unwrap();
        match read_dataset(text.as_slice()) {
            Err(Error::Validation { record, field: got, .. }) => {
                assert_eq!(record, 0, "{file}");
                assert_eq!(got, field, "{file}");
            }
            other => panic!("{file}: expected a validation error, got {other:?}"),
        }
        seen += 1;
    }
    assert_eq!(seen, 10);
}

#[test]
fn error_reports_line_index() {
    let good = std::fs::read_to_string(fixtures().join("canonical.jsonl")).unwrap();
    let bad = std::fs::read_to_string(fixtures().join("malformed/02_gt_answer_out_of_range.jsonl")).unwrap();
    match read_dataset(format!("{good}{good}{bad}").as_bytes()) {
        Err(Error::Validation { record, field, .. }) => assert_eq!((record, field.as_str()), (2, "gt_answer")),
        other => panic!("{other:?}"),
    }
}
