//! Newline-delimited JSON dataset manifests.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, VolumeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub volume_path: PathBuf,
    pub organ: String,
    pub modality: String,
    pub description: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Resolves relative volume paths against `base` and checks each exists.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        for r in &mut self.records {
            if r.volume_path.is_relative() {
                r.volume_path = base.join(&r.volume_path);
            }
            if !r.volume_path.exists() {
                return Err(VolumeError::Invalid(format!(
                    "record `{}`: volume {} does not exist",
                    r.id,
                    r.volume_path.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, r) in m.records.iter().enumerate() {
        if r.id.is_empty() {
            return Err(VolumeError::ManifestParse { line: i + 1, msg: "empty id".into() });
        }
        if !seen.insert(r.id.as_str()) {
            return Err(VolumeError::DuplicateId(r.id.clone()));
        }
        if r.volume_path.as_os_str().is_empty() {
            return Err(VolumeError::ManifestParse { line: i + 1, msg: format!("record `{}` has an empty volume_path", r.id) });
        }
    }
    Ok(())
}

/// Parses one record per non-blank line and validates the result.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| VolumeError::ManifestParse { line: i + 1, msg: e.to_string() })?;
        if !seen.insert(rec.id.clone()) {
            return Err(VolumeError::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    let m = DatasetManifest { records };
    validate_manifest(&m)?;
    Ok(m)
}

pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    validate_manifest(m)?;
    let io = |source| VolumeError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    for r in &m.records {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str) -> String {
        format!(
            r#"{{"id":"{id}","volume_path":"{id}.nii","organ":"brain","modality":"T1w","description":"MR T1w; 3.0T","split":"pretrain"}}"#
        )
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, format!("{}\n{}\n", line("a"), line("a"))).unwrap();
        match load_manifest(&p) {
            Err(VolumeError::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn order_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, format!("{}\n{}\n{}\n", line("c"), line("a"), line("b"))).unwrap();
        let m = load_manifest(&p).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        let q = dir.path().join("n.jsonl");
        save_manifest(&m, &q).unwrap();
        assert_eq!(load_manifest(&q).unwrap(), m);
    }

    #[test]
    fn missing_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, format!("{}\n{{\"id\":\"x\"}}\n", line("a"))).unwrap();
        match load_manifest(&p) {
            Err(VolumeError::ManifestParse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("missing field"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
