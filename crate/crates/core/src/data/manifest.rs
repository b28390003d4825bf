use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seeding::{stream_rng, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Binary diagnosis label; the class index is the declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Diseased,
    Healthy,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Diseased, Label::Healthy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Diseased => "diseased",
            Label::Healthy => "healthy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry count per label, indexed by [`Label::index`].
    pub fn counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for e in &self.entries {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Lists `<root>/<domain>/<diseased|healthy>/*.{png,jpg,jpeg}` in sorted path order.
pub fn scan_domain(root: &Path, domain: Domain) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for label in Label::ALL {
        let dir = root.join(domain.dir_name()).join(label.dir_name());
        if !dir.is_dir() {
            return Err(Error::Data {
                path: dir,
                reason: "missing class directory".into(),
            });
        }
        let before = entries.len();
        for item in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = item.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_file() && is_image(&path) {
                entries.push(Entry { path, label });
            }
        }
        if entries.len() == before {
            return Err(Error::Data {
                path: dir,
                reason: "class directory contains no PNG/JPEG images".into(),
            });
        }
    }
    entries.sort();
    Ok(DatasetManifest { domain, entries })
}

/// Scans both domains of a dataset tree, returning `(source, target)`.
pub fn scan_dataset(root: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    Ok((
        scan_domain(root, Domain::Source)?,
        scan_domain(root, Domain::Target)?,
    ))
}

/// Stratified seeded split: per label, shuffle then send the first
/// `⌊train_fraction · count⌋` entries to train. Both halves come back sorted.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut sorted = manifest.entries.clone();
    sorted.sort();
    let labels: Vec<Label> = sorted.iter().map(|e| e.label).collect();
    let (train, test) = split_indices(&labels, train_fraction, seed).map_err(|e| match e {
        Error::InvalidArgument { op, reason } => Error::InvalidArgument {
            op,
            reason: format!("{reason} (in the {} domain)", manifest.domain),
        },
        other => other,
    })?;
    let pick = |idx: Vec<usize>| DatasetManifest {
        domain: manifest.domain,
        entries: idx.into_iter().map(|i| sorted[i].clone()).collect(),
    };
    Ok((pick(train), pick(test)))
}

/// [`split`] over positions: returns ascending `(train, test)` indices into `labels`.
pub fn split_indices(labels: &[Label], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument {
            op: "split",
            reason: format!("train_fraction must lie in (0, 1), got {train_fraction}"),
        });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in Label::ALL {
        let mut group: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if group.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "split",
                reason: format!(
                    "label `{}` has {} entries; stratifying needs at least 2",
                    label.dir_name(),
                    group.len(),
                ),
            });
        }
        group.shuffle(&mut stream_rng(seed, Purpose::Split, label.index() as u64));
        let cut = (train_fraction * group.len() as f64).floor() as usize;
        train.extend_from_slice(&group[..cut]);
        test.extend_from_slice(&group[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
