//! `MANIFEST.json`: every artifact in an output directory with its SHA-256.
//!
//! Commands sharing a directory extend the same manifest. Entries whose
//! file has disappeared are dropped; all remaining files are rehashed.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "MANIFEST.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Keyed by `/`-separated path relative to the output directory.
    pub files: BTreeMap<String, FileEntry>,
}

pub fn hash_file(path: &Path) -> io::Result<FileEntry> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let bytes = io::copy(&mut f, &mut h)?;
    Ok(FileEntry {
        sha256: hex::encode(h.finalize()),
        bytes,
    })
}

fn rel_key(rel: &Path) -> String {
    rel.components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Adds `written` (paths relative to `dir`; directories are walked) to the
/// manifest of `dir` and rewrites it.
pub fn update(dir: &Path, written: &[PathBuf]) -> io::Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let mut keys: Vec<String> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str::<Manifest>(&text)
            .map(|m| m.files.into_keys().collect())
            .unwrap_or_default(),
        Err(_) => Vec::new(),
    };
    for rel in written {
        collect(dir, rel, &mut keys)?;
    }
    let mut m = Manifest::default();
    for k in keys {
        if k == MANIFEST_FILE {
            continue;
        }
        let p = dir.join(&k);
        if p.is_file() {
            m.files.insert(k, hash_file(&p)?);
        }
    }
    let mut text = serde_json::to_string_pretty(&m).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(m)
}

fn collect(dir: &Path, rel: &Path, out: &mut Vec<String>) -> io::Result<()> {
    let full = dir.join(rel);
    if full.is_dir() {
        let mut names: Vec<_> = fs::read_dir(&full)?.collect::<io::Result<Vec<_>>>()?;
        names.sort_by_key(|e| e.file_name());
        for e in names {
            collect(dir, &rel.join(e.file_name()), out)?;
        }
    } else if full.is_file() {
        out.push(rel_key(rel));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        fs::write(&p, "abc").unwrap();
        let e = hash_file(&p).unwrap();
        assert_eq!(
            e.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(e.bytes, 3);
    }

    #[test]
    fn manifests_accumulate_and_walk_directories() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("data")).unwrap();
        fs::write(dir.path().join("data/a.bin"), [1u8, 2]).unwrap();
        fs::write(dir.path().join("data/b.bin"), [3u8]).unwrap();
        update(dir.path(), &["data".into()]).unwrap();
        fs::write(dir.path().join("r.json"), "{}").unwrap();
        let m = update(dir.path(), &["r.json".into()]).unwrap();
        let keys: Vec<&String> = m.files.keys().collect();
        assert_eq!(keys, ["data/a.bin", "data/b.bin", "r.json"]);
        let back: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
