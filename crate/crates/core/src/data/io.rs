//! JSON-lines persistence: one [`ClipRecord`] per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ClipRecord;
use crate::error::{Error, Result};

/// Parses and validates one line. `index` is the zero-based record number.
pub fn parse_record(line: &str, index: usize) -> Result<ClipRecord> {
    let mut de = serde_json::Deserializer::from_str(line);
    let record: ClipRecord = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let message = e.inner().to_string();
        let path = e.path().to_string();
        Error::Validation {
            record: index,
            field: field_name(&path, &message),
            message,
        }
    })?;
    record.validate(index)?;
    Ok(record)
}

/// Best field name for a deserialisation error. Missing fields are reported
/// by serde at the parent path, so the name is recovered from the message.
fn field_name(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, missing) {
        (".", Some(m)) => m.to_string(),
        (p, Some(m)) => format!("{p}.{m}"),
        (".", None) => "<record>".to_string(),
        (p, None) => p.to_string(),
    }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i)?);
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(records: &[ClipRecord], writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Prefixes an I/O error with the path it concerns.
pub fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<Vec<ClipRecord>> {
    read_dataset(File::open(path).map_err(with_path(path))?)
}

pub fn save_dataset(records: &[ClipRecord], path: &Path) -> Result<()> {
    write_dataset(records, File::create(path).map_err(with_path(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};

    fn one_line() -> String {
        let cfg = GeneratorConfig {
            num_clips: 1,
            ..Default::default()
        };
        serde_json::to_string(&generate_synthetic(&cfg, 0).unwrap()[0]).unwrap()
    }

    #[test]
    fn missing_gt_moment_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&one_line()).unwrap();
        v.as_object_mut().unwrap().remove("gt_moment");
        let err = parse_record(&v.to_string(), 3).unwrap_err();
        match err {
            Error::Validation { record, field, .. } => {
                assert_eq!(record, 3);
                assert_eq!(field, "gt_moment");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn nested_type_error_has_path() {
        let mut v: serde_json::Value = serde_json::from_str(&one_line()).unwrap();
        v["shots"][1]["concepts"] = serde_json::json!("oops");
        match parse_record(&v.to_string(), 0).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "shots[1].concepts"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn round_trip() {
        let cfg = GeneratorConfig {
            num_clips: 20,
            ..Default::default()
        };
        let recs = generate_synthetic(&cfg, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&recs, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }
}
