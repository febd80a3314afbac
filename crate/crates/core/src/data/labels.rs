//! Label files: `example_id,<space separated positive classes>` per row, with
//! a JSON sidecar `<file>.json` declaring `n_classes`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabelSet;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    n_classes: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_labels(y: &LabelSet, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for i in 0..y.n_examples() {
        let classes = y
            .positives(i)
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([y.example_ids()[i].as_str(), classes.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&Sidecar {
        n_classes: y.n_classes(),
    })?;
    fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let Sidecar { n_classes } = serde_json::from_str(&text)
        .map_err(|e| Error::format(&sidecar, e.to_string()))?;

    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut ids = Vec::new();
    let mut positives = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::format(path, format!("row {line}: expected 2 fields")));
        }
        let mut classes = Vec::new();
        for tok in record[1].split_whitespace() {
            let c: usize = tok
                .parse()
                .map_err(|_| Error::format(path, format!("row {line}: bad class index {tok:?}")))?;
            if c >= n_classes {
                return Err(Error::ClassOutOfRange { index: c, n_classes });
            }
            classes.push(c as u32);
        }
        ids.push(record[0].to_owned());
        positives.push(classes);
    }
    LabelSet::new(ids, n_classes, positives)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, rows: &str, n_classes: usize) -> PathBuf {
        let path = dir.join("labels.csv");
        fs::write(&path, rows).unwrap();
        fs::write(sidecar_path(&path), format!("{{\"n_classes\": {n_classes}}}")).unwrap();
        path
    }

    #[test]
    fn parses_positive_lists() {
        let dir = tempfile::tempdir().unwrap();
        let y = load_labels(&write(dir.path(), "vid1,3 17\nvid2,\n", 20)).unwrap();
        assert_eq!(y.positives(0), &[3, 17]);
        assert!(y.positives(1).is_empty());
        assert_eq!(y.example_ids(), &["vid1".to_string(), "vid2".to_string()]);
    }

    #[test]
    fn class_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_labels(&write(dir.path(), "vid1,20\n", 20)),
            Err(Error::ClassOutOfRange { index: 20, n_classes: 20 })
        ));
    }

    #[test]
    fn duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_labels(&write(dir.path(), "a,1\na,2\n", 5)),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        let y = LabelSet::new(
            vec!["a".into(), "b,c".into(), "d".into()],
            9,
            vec![vec![0, 8], vec![], vec![4]],
        )
        .unwrap();
        save_labels(&y, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), y);
    }
}
