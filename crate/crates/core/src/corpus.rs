//! Style-labelled image corpus: indexing and few-shot sampling.
//!
//! The on-disk layout is `root/<split>/<style>/<image>` where `<split>` is one
//! of `train`, `val`, `test` and `<style>` is one of the fourteen style names.
//! Record ids are `<split>/<style>/<filename>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitRng;

/// File extensions recognised as images when indexing.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "webp", "bmp", "gif"];

/// Shot counts used by the few-shot protocol.
pub const SHOT_SETTINGS: &[usize] = &[1, 2, 4, 8, 16];

/// Name of the persisted index file.
pub const INDEX_FILE: &str = "dataset.index.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no styles found under {0}")]
    NoStyles(PathBuf),
    #[error("unknown style {0:?}")]
    UnknownStyle(String),
    #[error("n_shot must be one of {SHOT_SETTINGS:?}, got {0}")]
    BadShot(usize),
    #[error("style {style}: need {need}, have {have}")]
    Insufficient {
        style: StyleLabel,
        need: usize,
        have: usize,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid index file: {0}")]
    Json(#[from] serde_json::Error),
}

/// One of the fourteen fashion styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StyleLabel {
    Conservative,
    Dressy,
    Ethnic,
    Fairy,
    Feminine,
    Gal,
    Girlish,
    KireimeCasual,
    Lolita,
    Mode,
    Natural,
    Retro,
    Rock,
    Street,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 14] = [
        StyleLabel::Conservative,
        StyleLabel::Dressy,
        StyleLabel::Ethnic,
        StyleLabel::Fairy,
        StyleLabel::Feminine,
        StyleLabel::Gal,
        StyleLabel::Girlish,
        StyleLabel::KireimeCasual,
        StyleLabel::Lolita,
        StyleLabel::Mode,
        StyleLabel::Natural,
        StyleLabel::Retro,
        StyleLabel::Rock,
        StyleLabel::Street,
    ];

    /// Styles excluded from evaluation by default (no test images).
    pub const DEFAULT_EXCLUDE: [StyleLabel; 1] = [StyleLabel::Girlish];

    pub fn as_str(self) -> &'static str {
        match self {
            StyleLabel::Conservative => "conservative",
            StyleLabel::Dressy => "dressy",
            StyleLabel::Ethnic => "ethnic",
            StyleLabel::Fairy => "fairy",
            StyleLabel::Feminine => "feminine",
            StyleLabel::Gal => "gal",
            StyleLabel::Girlish => "girlish",
            StyleLabel::KireimeCasual => "kireime-casual",
            StyleLabel::Lolita => "lolita",
            StyleLabel::Mode => "mode",
            StyleLabel::Natural => "natural",
            StyleLabel::Retro => "retro",
            StyleLabel::Rock => "rock",
            StyleLabel::Street => "street",
        }
    }

    /// Position in [`StyleLabel::ALL`].
    pub fn ordinal(self) -> usize {
        self as usize
    }

    /// The thirteen styles evaluated by default.
    pub fn evaluated() -> Vec<StyleLabel> {
        Self::ALL
            .into_iter()
            .filter(|s| !Self::DEFAULT_EXCLUDE.contains(s))
            .collect()
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleLabel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == lower)
            .ok_or_else(|| CorpusError::UnknownStyle(s.to_string()))
    }
}

impl TryFrom<String> for StyleLabel {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StyleLabel> for String {
    fn from(l: StyleLabel) -> String {
        l.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: StyleLabel,
    pub split: Split,
}

/// Immutable index of a dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// All kept records, sorted by id.
    pub records: Vec<ImageRecord>,
    /// Styles left out of the run (and removed from the test partition).
    pub excluded: Vec<StyleLabel>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn test(&self) -> Vec<&ImageRecord> {
        self.split(Split::Test).collect()
    }

    /// Styles taking part in a run: present anywhere in the index and not excluded.
    pub fn run_styles(&self) -> Vec<StyleLabel> {
        let set: BTreeSet<StyleLabel> = self
            .records
            .iter()
            .map(|r| r.label)
            .filter(|l| !self.excluded.contains(l))
            .collect();
        set.into_iter().collect()
    }

    /// Train+val candidates for few-shot sampling, grouped by style and sorted by id.
    pub fn pool(&self) -> BTreeMap<StyleLabel, Vec<&ImageRecord>> {
        let mut pool: BTreeMap<StyleLabel, Vec<&ImageRecord>> = BTreeMap::new();
        for style in self.run_styles() {
            pool.insert(style, Vec::new());
        }
        for r in &self.records {
            if r.split == Split::Test {
                continue;
            }
            if let Some(v) = pool.get_mut(&r.label) {
                v.push(r);
            }
        }
        for v in pool.values_mut() {
            v.sort_by(|a, b| a.id.cmp(&b.id));
        }
        pool
    }

    pub fn counts(&self) -> BTreeMap<(Split, StyleLabel), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.split, r.label)).or_insert(0) += 1;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let rd = fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Walks `root/<split>/<style>/` and builds the index.
///
/// `exclude` lists styles left out of evaluation; their test images are dropped
/// and they are skipped by [`sample_few_shot`]. Empty style directories and
/// unknown directory names produce warnings; zero-byte or unreadable files are
/// skipped with a warning.
pub fn load_dataset(root: &Path, exclude: &[StyleLabel]) -> Result<DatasetIndex, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_style = false;

    for split in Split::ALL {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            continue;
        }
        for style_dir in sorted_entries(&split_dir)? {
            if !style_dir.is_dir() {
                continue;
            }
            let name = style_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let label = match name.parse::<StyleLabel>() {
                Ok(l) => l,
                Err(_) => {
                    warnings.push(format!("{}/{}: not a known style, ignored", split.dir_name(), name));
                    continue;
                }
            };
            seen_style = true;
            if split == Split::Test && exclude.contains(&label) {
                continue;
            }
            let mut kept = 0usize;
            for file in sorted_entries(&style_dir)? {
                if !file.is_file() || !is_image(&file) {
                    continue;
                }
                let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let id = format!("{}/{}/{}", split.dir_name(), label, fname);
                match fs::metadata(&file) {
                    Ok(m) if m.len() > 0 => {}
                    Ok(_) => {
                        warnings.push(format!("{id}: empty file, skipped"));
                        continue;
                    }
                    Err(e) => {
                        warnings.push(format!("{id}: unreadable ({e}), skipped"));
                        continue;
                    }
                }
                records.push(ImageRecord {
                    id,
                    path: file,
                    label,
                    split,
                });
                kept += 1;
            }
            if kept == 0 {
                warnings.push(format!("{}/{}: no images", split.dir_name(), label));
            }
        }
    }

    if !seen_style {
        return Err(CorpusError::NoStyles(root.to_path_buf()));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut excluded = exclude.to_vec();
    excluded.sort();
    excluded.dedup();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
        excluded,
        warnings,
    })
}

/// Few-shot training and validation draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub n_shot: usize,
    pub seed: u64,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
}

impl FewShotSplit {
    pub fn styles(&self) -> Vec<StyleLabel> {
        let set: BTreeSet<StyleLabel> = self.train.iter().map(|r| r.label).collect();
        set.into_iter().collect()
    }

    pub fn train_for(&self, style: StyleLabel) -> Vec<&ImageRecord> {
        self.train.iter().filter(|r| r.label == style).collect()
    }
}

/// Draws `n_shot` train and `n_shot` disjoint val images per run style.
///
/// One [`SplitRng`] seeded with `seed` is consumed style by style in label
/// order; each style's id-sorted pool is shuffled and the first `n_shot`
/// entries become train, the next `n_shot` val.
pub fn sample_few_shot(index: &DatasetIndex, n_shot: usize, seed: u64) -> Result<FewShotSplit, CorpusError> {
    if !SHOT_SETTINGS.contains(&n_shot) {
        return Err(CorpusError::BadShot(n_shot));
    }
    let pool = index.pool();
    if pool.is_empty() {
        return Err(CorpusError::NoStyles(index.root.clone()));
    }
    for (style, cands) in &pool {
        if cands.len() < 2 * n_shot {
            return Err(CorpusError::Insufficient {
                style: *style,
                need: 2 * n_shot,
                have: cands.len(),
            });
        }
    }
    let mut rng = SplitRng::new(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for cands in pool.values() {
        let mut order: Vec<&ImageRecord> = cands.clone();
        rng.shuffle(&mut order);
        train.extend(order[..n_shot].iter().map(|r| (*r).clone()));
        val.extend(order[n_shot..2 * n_shot].iter().map(|r| (*r).clone()));
    }
    Ok(FewShotSplit {
        n_shot,
        seed,
        train,
        val,
    })
}
