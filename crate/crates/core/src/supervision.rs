//! Frame-level supervision from the recognizer.
//!
//! Category prototypes are built from confidently and correctly recognized
//! frames. Every frame then gets a guiding saliency score, the softmax over
//! negated Euclidean distances to all prototypes evaluated at the true
//! class, and the score becomes a soft target over `C + 1` classes whose
//! last entry is the non-salient class.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{atomic_write, read_feature_file, write_feature_file, Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Array};

pub const DEFAULT_EPSILON_PERCENT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `[C×D_g]`
    pub prototypes: Array,
    pub epsilon_percent: f64,
}

/// Soft target for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    /// Length `C + 1`.
    pub target: Vec<f64>,
    pub guiding_score: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn top_count(epsilon_percent: f64, count: usize) -> usize {
    ((epsilon_percent / 100.0 * count as f64).ceil() as usize).clamp(1, count.max(1))
}

fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_slice(&mut p);
    p
}

/// Mean guiding feature of one video's most confident correct frames.
///
/// Falls back to ranking all frames when no frame is predicted correctly.
pub fn guiding_video_feature(record: &VideoRecord, epsilon_percent: f64) -> Vec<f64> {
    let c = record.label;
    let conf: Vec<f64> = (0..record.num_frames())
        .map(|i| probabilities(record.recognizer_logits.row(i))[c])
        .collect();
    let mut pool: Vec<usize> = (0..record.num_frames())
        .filter(|&i| argmax(record.recognizer_logits.row(i)) == c)
        .collect();
    if pool.is_empty() {
        pool = (0..record.num_frames()).collect();
    }
    pool.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let keep = top_count(epsilon_percent, pool.len());
    let d = record.guiding_features.cols();
    let mut mean = vec![0.0; d];
    for &i in &pool[..keep] {
        for (m, v) in mean.iter_mut().zip(record.guiding_features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= keep as f64);
    mean
}

pub fn build_prototypes(train: &Dataset, epsilon_percent: f64) -> Result<PrototypeBank> {
    if !(epsilon_percent > 0.0 && epsilon_percent <= 100.0) {
        return Err(Error::contract(format!(
            "epsilon {epsilon_percent} not in (0, 100]"
        )));
    }
    let c = train.num_classes;
    let d = train.guiding_dim();
    let mut per_video: Vec<(&str, usize, Vec<f64>)> = train
        .records
        .par_iter()
        .map(|r| {
            (
                r.video_id.as_str(),
                r.label,
                guiding_video_feature(r, epsilon_percent),
            )
        })
        .collect();
    per_video.sort_by(|a, b| a.0.cmp(b.0));

    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (_, label, feat) in &per_video {
        counts[*label] += 1;
        for (s, v) in sums[*label].iter_mut().zip(feat) {
            *s += v;
        }
    }
    let empty: Vec<String> = (0..c)
        .filter(|&k| counts[k] == 0)
        .map(|k| k.to_string())
        .collect();
    if !empty.is_empty() {
        return Err(Error::contract(format!(
            "categories without training videos: {}",
            empty.join(", ")
        )));
    }
    let rows: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(PrototypeBank {
        prototypes: Array::from_rows(&rows)?,
        epsilon_percent,
    })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}

impl PrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// Stores the bank as NSF1 plus a `.meta` sidecar with epsilon and the
    /// source manifest checksum.
    pub fn save(&self, path: &Path, manifest_sha256: &str) -> Result<()> {
        write_feature_file(path, &self.prototypes)?;
        let meta = format!(
            "epsilon={}\nmanifest_sha256={manifest_sha256}\n",
            self.epsilon_percent
        );
        atomic_write(&meta_path(path), meta.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let prototypes = read_feature_file(path)?;
        let mut epsilon_percent = DEFAULT_EPSILON_PERCENT;
        let meta = meta_path(path);
        if let Ok(text) = fs::read_to_string(&meta) {
            for line in text.lines() {
                if let Some(v) = line.strip_prefix("epsilon=") {
                    epsilon_percent = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::format(&meta, "bad epsilon"))?;
                }
            }
        }
        Ok(PrototypeBank {
            prototypes,
            epsilon_percent,
        })
    }
}

/// `g_i = softmax_j(−‖x_i − p_j‖)[label]` for every frame.
pub fn guiding_saliency_scores(record: &VideoRecord, bank: &PrototypeBank) -> Result<Vec<f64>> {
    let c = bank.num_classes();
    if record.label >= c {
        return Err(Error::contract(format!(
            "label {} out of range for {c} prototypes",
            record.label
        )));
    }
    if record.guiding_features.cols() != bank.prototypes.cols() {
        return Err(Error::Shape {
            op: "guiding_saliency_scores",
            left: record.guiding_features.shape().to_vec(),
            right: bank.prototypes.shape().to_vec(),
        });
    }
    Ok((0..record.num_frames())
        .map(|i| {
            let x = record.guiding_features.row(i);
            let mut sims: Vec<f64> = (0..c)
                .map(|j| {
                    -x.iter()
                        .zip(bank.prototypes.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            softmax_slice(&mut sims);
            sims[record.label]
        })
        .collect())
}

/// Alternative guiding score: the recognizer's softmax response at the
/// true class.
pub fn guiding_scores_response_variant(record: &VideoRecord) -> Vec<f64> {
    (0..record.num_frames())
        .map(|i| probabilities(record.recognizer_logits.row(i))[record.label])
        .collect()
}

const SCORE_TOL: f64 = 1e-9;

/// Per frame: `g` at `label`, `1 − g` at the non-salient slot `C`.
pub fn ns_pseudo_labels(g: &[f64], label: usize, num_classes: usize) -> Result<Vec<PseudoLabel>> {
    if label >= num_classes {
        return Err(Error::contract(format!(
            "label {label} out of range for C={num_classes}"
        )));
    }
    g.iter()
        .map(|&gi| {
            if !(-SCORE_TOL..=1.0 + SCORE_TOL).contains(&gi) {
                return Err(Error::contract(format!("guiding score {gi} outside [0, 1]")));
            }
            let gi = gi.clamp(0.0, 1.0);
            let mut target = vec![0.0; num_classes + 1];
            target[label] = gi;
            target[num_classes] = 1.0 - gi;
            Ok(PseudoLabel {
                target,
                guiding_score: gi,
            })
        })
        .collect()
}

/// Stacks targets into a `[T×(C+1)]` matrix.
pub fn target_matrix(labels: &[PseudoLabel]) -> Result<Array> {
    let rows: Vec<Vec<f64>> = labels.iter().map(|l| l.target.clone()).collect();
    Array::from_rows(&rows)
}

/// Frame targets without non-saliency suppression: every frame carries the
/// video label `[y_v, 0]`.
pub fn hard_video_labels(frames: usize, label: usize, num_classes: usize) -> Result<Vec<PseudoLabel>> {
    ns_pseudo_labels(&vec![1.0; frames], label, num_classes)
}
