use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_clip_path, ClipMeta, CorpusError, Domain, Split};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub meta: ClipMeta,
}

/// Grouping key for clip counts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub machine_type: String,
    pub section: u8,
    pub domain: Domain,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    root: PathBuf,
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Builds an index, sorting entries by path and rejecting duplicate metas.
    pub fn new(
        root: impl Into<PathBuf>,
        mut entries: Vec<IndexEntry>,
    ) -> Result<Self, CorpusError> {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(&e.meta) {
                return Err(CorpusError::Duplicate(e.path.clone()));
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn abs_path(&self, entry: &IndexEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn machines(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .entries
            .iter()
            .map(|e| e.meta.machine_type.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn sections(&self, machine: &str) -> Vec<u8> {
        let set: BTreeSet<u8> = self
            .entries
            .iter()
            .filter(|e| e.meta.machine_type == machine)
            .map(|e| e.meta.section)
            .collect();
        set.into_iter().collect()
    }

    pub fn select<'a>(
        &'a self,
        machine: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a IndexEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.meta.machine_type == machine && e.meta.split == split)
    }

    pub fn counts(&self) -> BTreeMap<CellKey, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            let key = CellKey {
                machine_type: e.meta.machine_type.clone(),
                section: e.meta.section,
                domain: e.meta.domain,
                split: e.meta.split,
            };
            *counts.entry(key).or_insert(0) += 1;
        }
        counts
    }

    /// Writes `manifest.csv` (`path,machine,section,domain,split,condition`).
    pub fn write_manifest(&self) -> Result<(), CorpusError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut out = String::from("path,machine,section,domain,split,condition\n");
        for e in &self.entries {
            let m = &e.meta;
            out.push_str(&format!(
                "{},{},{:02},{},{},{}\n",
                e.path, m.machine_type, m.section, m.domain, m.split, m.condition
            ));
        }
        fs::write(&path, out).map_err(|e| CorpusError::io(&path, e))
    }

    /// Reads a manifest written by [`DatasetIndex::write_manifest`].
    pub fn read_manifest(root: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let root = root.as_ref();
        let path = root.join(MANIFEST_FILE);
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| CorpusError::Manifest(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| CorpusError::Manifest(e.to_string()))?;
            let rel = row
                .get(0)
                .ok_or_else(|| CorpusError::Manifest("missing path column".into()))?;
            let meta = parse_clip_path(rel)?;
            let consistent = row.get(1) == Some(meta.machine_type.as_str())
                && row.get(2).and_then(|s| s.parse::<u8>().ok()) == Some(meta.section)
                && row.get(3) == Some(meta.domain.as_str())
                && row.get(4) == Some(meta.split.as_str())
                && row.get(5) == Some(meta.condition.as_str());
            if !consistent {
                return Err(CorpusError::Manifest(format!(
                    "row for {rel} disagrees with its path"
                )));
            }
            entries.push(IndexEntry {
                path: rel.to_string(),
                meta,
            });
        }
        Self::new(root, entries)
    }
}

#[derive(Debug, Clone)]
pub struct ScanReport {
    pub index: DatasetIndex,
    /// Files that do not follow the naming convention, relative to the root.
    pub skipped: Vec<PathBuf>,
}

/// Indexes every conformant `<machine>/<clip>.wav` under `root`.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<ScanReport, CorpusError> {
    let root = root.as_ref();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();

    for top in sorted_dir(root)? {
        let name = top.file_name().map(|n| n.to_string_lossy().into_owned());
        if top.is_file() {
            if name.as_deref() != Some(MANIFEST_FILE) {
                skipped.push(relative(root, &top));
            }
            continue;
        }
        if !top.is_dir() {
            skipped.push(relative(root, &top));
            continue;
        }
        for path in sorted_dir(&top)? {
            let rel = relative(root, &path);
            if !path.is_file() {
                skipped.push(rel);
                continue;
            }
            let rel_str = rel.to_string_lossy().replace('\\', "/");
            match parse_clip_path(&rel_str) {
                Ok(meta) => entries.push(IndexEntry {
                    path: rel_str,
                    meta,
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", rel.display());
                    skipped.push(rel);
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(CorpusError::EmptyDataset(root.to_path_buf()));
    }
    Ok(ScanReport {
        index: DatasetIndex::new(root, entries)?,
        skipped,
    })
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CorpusError::io(dir, e))?;
    paths.sort();
    Ok(paths)
}

fn relative(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).unwrap_or(path).to_path_buf()
}
