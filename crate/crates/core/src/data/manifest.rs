//! `NSM1` text manifests.
//!
//! First line `NSM1 C=<int>`, then one tab-separated record per line:
//! `video_id  label  light_path  guiding_path  logits_path  [mask_path]`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::nsf::{read_feature_file, write_feature_file};
use crate::data::{atomic_write, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: usize,
    pub light_path: PathBuf,
    pub guiding_path: PathBuf,
    pub logits_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

/// Loaded records of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub num_classes: usize,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn light_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.light_features.cols())
    }

    pub fn guiding_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.guiding_features.cols())
    }
}

impl DatasetManifest {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format(path, format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty manifest"))?;
        let num_classes = header
            .strip_prefix("NSM1 C=")
            .and_then(|c| c.trim().parse::<usize>().ok())
            .ok_or_else(|| bad(1, "expected header `NSM1 C=<int>`"))?;
        if num_classes == 0 {
            return Err(bad(1, "C must be positive"));
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(5..=6).contains(&cols.len()) {
                return Err(bad(i + 1, "expected 5 or 6 tab-separated fields"));
            }
            let label: usize = cols[1].parse().map_err(|_| bad(i + 1, "bad label"))?;
            if label >= num_classes {
                return Err(bad(i + 1, "label out of range"));
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(bad(i + 1, &format!("duplicate video_id {}", cols[0])));
            }
            entries.push(ManifestEntry {
                video_id: cols[0].to_string(),
                label,
                light_path: cols[2].into(),
                guiding_path: cols[3].into(),
                logits_path: cols[4].into(),
                mask_path: cols.get(5).map(PathBuf::from),
            });
        }
        Ok(DatasetManifest {
            split: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            num_classes,
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn render(&self) -> String {
        let mut out = format!("NSM1 C={}\n", self.num_classes);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}",
                e.video_id,
                e.label,
                e.light_path.display(),
                e.guiding_path.display(),
                e.logits_path.display()
            ));
            if let Some(m) = &e.mask_path {
                out.push_str(&format!("\t{}", m.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.render().as_bytes())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads every referenced file and checks cross-record consistency.
    pub fn load_records(&self) -> Result<Dataset> {
        let records = self
            .entries
            .par_iter()
            .map(|e| {
                let mask = match &e.mask_path {
                    Some(p) => {
                        let m = read_feature_file(&self.resolve(p))?;
                        let n = m.len();
                        Some(m.reshape(vec![n])?)
                    }
                    None => None,
                };
                let record = VideoRecord {
                    video_id: e.video_id.clone(),
                    label: e.label,
                    light_features: read_feature_file(&self.resolve(&e.light_path))?,
                    guiding_features: read_feature_file(&self.resolve(&e.guiding_path))?,
                    recognizer_logits: read_feature_file(&self.resolve(&e.logits_path))?,
                    saliency_mask: mask,
                };
                record.validate()?;
                Ok(record)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = records.first() {
            let dims = |r: &VideoRecord| {
                (
                    r.light_features.cols(),
                    r.guiding_features.cols(),
                    r.num_classes(),
                )
            };
            let want = dims(first);
            if want.2 != self.num_classes {
                return Err(Error::contract(format!(
                    "manifest declares C={} but logits have {} columns",
                    self.num_classes, want.2
                )));
            }
            if let Some(r) = records.iter().find(|r| dims(r) != want) {
                return Err(Error::contract(format!(
                    "video {} disagrees on (D_l, D_g, C): {:?} vs {:?}",
                    r.video_id,
                    dims(r),
                    want
                )));
            }
        }
        Ok(Dataset {
            split: self.split.clone(),
            num_classes: self.num_classes,
            records,
        })
    }
}

/// Writes one NSF1 file per array under `dir/<split>/` and the manifest at
/// `dir/<split>.nsm`; returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let sub = dir.join(&dataset.split);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let entries = dataset
        .records
        .par_iter()
        .map(|r| {
            let rel = |kind: &str| PathBuf::from(&dataset.split).join(format!("{}.{kind}.nsf", r.video_id));
            write_feature_file(&dir.join(rel("light")), &r.light_features)?;
            write_feature_file(&dir.join(rel("guiding")), &r.guiding_features)?;
            write_feature_file(&dir.join(rel("logits")), &r.recognizer_logits)?;
            let mask_path = match &r.saliency_mask {
                Some(m) => {
                    let col = Array::new(vec![m.len(), 1], m.data().to_vec())?;
                    write_feature_file(&dir.join(rel("mask")), &col)?;
                    Some(rel("mask"))
                }
                None => None,
            };
            Ok(ManifestEntry {
                video_id: r.video_id.clone(),
                label: r.label,
                light_path: rel("light"),
                guiding_path: rel("guiding"),
                logits_path: rel("logits"),
                mask_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        split: dataset.split.clone(),
        num_classes: dataset.num_classes,
        entries,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join(format!("{}.nsm", dataset.split));
    manifest.save(&path)?;
    Ok(path)
}
