//! Combining frame-level and video-level saliency into a K-frame selection.
//!
//! Score modes merge the two saliency vectors arithmetically and take the
//! top K. Index modes work on the two descending rank lists `π_f` and `π_v`
//! and depend only on orderings. Ties always go to the lower frame index.

use std::fmt;
use std::str::FromStr;

use crate::data::VideoRecord;
use crate::error::{Error, Result};
use crate::model::{fsm_saliency, vgm_saliency, SamplerModel};
use crate::numerics::softmax_slice;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    ScoreAdd,
    ScoreMul,
    ScoreMax,
    IndexUnion,
    IndexIntersect,
    IndexJoin,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::ScoreAdd,
        FusionMode::ScoreMul,
        FusionMode::ScoreMax,
        FusionMode::IndexUnion,
        FusionMode::IndexIntersect,
        FusionMode::IndexJoin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::ScoreAdd => "score_add",
            FusionMode::ScoreMul => "score_mul",
            FusionMode::ScoreMax => "score_max",
            FusionMode::IndexUnion => "index_union",
            FusionMode::IndexIntersect => "index_intersect",
            FusionMode::IndexJoin => "index_join",
        }
    }

    pub fn is_score(self) -> bool {
        matches!(
            self,
            FusionMode::ScoreAdd | FusionMode::ScoreMul | FusionMode::ScoreMax
        )
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown fusion mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Weight of the frame-level branch for `score_add` and `index_union`.
    pub ratio: f64,
    pub k: usize,
}

impl FusionConfig {
    pub fn new(k: usize) -> Self {
        FusionConfig {
            mode: FusionMode::IndexUnion,
            ratio: 0.6,
            k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyProfile {
    pub s_f: Vec<f64>,
    pub s_v: Vec<f64>,
    pub selected: Vec<usize>,
    pub fused_scores: Option<Vec<f64>>,
}

/// Frame indices by descending score, ties to the lower index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_k(k: usize, t: usize) -> Result<()> {
    if k == 0 || k > t {
        return Err(Error::contract(format!("K={k} must be in [1, T={t}]")));
    }
    Ok(())
}

fn check_lengths(s_f: &[f64], s_v: &[f64]) -> Result<()> {
    if s_f.len() != s_v.len() {
        return Err(Error::contract(format!(
            "saliency lengths differ: {} vs {}",
            s_f.len(),
            s_v.len()
        )));
    }
    Ok(())
}

pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, scores.len())?;
    let mut order = rank_order(scores);
    order.truncate(k);
    Ok(order)
}

pub fn fuse_scores(s_f: &[f64], s_v: &[f64], mode: FusionMode, ratio: f64) -> Result<Vec<f64>> {
    check_lengths(s_f, s_v)?;
    let combine: Box<dyn Fn(f64, f64) -> f64> = match mode {
        FusionMode::ScoreAdd => Box::new(move |f, v| ratio * f + (1.0 - ratio) * v),
        FusionMode::ScoreMul => Box::new(|f, v| f * v),
        FusionMode::ScoreMax => Box::new(f64::max),
        other => {
            return Err(Error::contract(format!("{other} is not a score fusion mode")));
        }
    };
    Ok(s_f.iter().zip(s_v).map(|(&f, &v)| combine(f, v)).collect())
}

/// Top-K of both lists intersected, then topped up from the remainders of
/// `π_f` and `π_v` in turn, `π_f` first.
pub fn fuse_index_intersect(s_f: &[f64], s_v: &[f64], k: usize) -> Result<Vec<usize>> {
    check_lengths(s_f, s_v)?;
    check_k(k, s_f.len())?;
    let (pf, pv) = (rank_order(s_f), rank_order(s_v));
    let t = s_f.len();
    let mut taken = vec![false; t];
    let top_v = &pv[..k];
    let mut out: Vec<usize> = pf[..k]
        .iter()
        .copied()
        .filter(|i| top_v.contains(i))
        .collect();
    for &i in &out {
        taken[i] = true;
    }
    let (mut next_f, mut next_v) = (pf[k..].iter(), pv[k..].iter());
    let mut from_f = true;
    while out.len() < k {
        let source = if from_f { &mut next_f } else { &mut next_v };
        if let Some(&i) = source.find(|&&i| !taken[i]) {
            taken[i] = true;
            out.push(i);
        }
        from_f = !from_f;
    }
    Ok(out)
}

/// Robust ceiling for `K·ratio`; absorbs representation error such as
/// `5 · (1 − 0.6) = 2.0000000000000004`.
fn ceil_share(k: usize, share: f64) -> usize {
    ((k as f64 * share - 1e-9).ceil().max(0.0) as usize).min(k)
}

/// Union of the top `⌈K·α⌉` of `π_f` and top `⌈K·(1−α)⌉` of `π_v`.
///
/// Short unions are extended from `π_f`; on overshoot the lowest-ranked
/// `π_v`-only members are dropped. Output order: `π_f` members, then `π_v`
/// additions, then extensions.
pub fn fuse_index_union(s_f: &[f64], s_v: &[f64], k: usize, ratio: f64) -> Result<Vec<usize>> {
    check_lengths(s_f, s_v)?;
    check_k(k, s_f.len())?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("ratio {ratio} not in [0, 1]")));
    }
    let (pf, pv) = (rank_order(s_f), rank_order(s_v));
    let n_f = ceil_share(k, ratio);
    let n_v = ceil_share(k, 1.0 - ratio);
    let mut taken = vec![false; s_f.len()];
    let mut out = Vec::with_capacity(k + n_v);
    for &i in &pf[..n_f] {
        taken[i] = true;
        out.push(i);
    }
    for &i in &pv[..n_v] {
        if !taken[i] {
            taken[i] = true;
            out.push(i);
        }
    }
    // only π_v additions sit past n_f
    out.truncate(k);
    for &i in &pf {
        if out.len() == k {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            out.push(i);
        }
    }
    Ok(out)
}

/// Scans the `2T` scores of both branches in descending order and keeps the
/// first K distinct frames.
pub fn fuse_index_join(s_f: &[f64], s_v: &[f64], k: usize) -> Result<Vec<usize>> {
    check_lengths(s_f, s_v)?;
    check_k(k, s_f.len())?;
    let mut entries: Vec<(f64, u8, usize)> = s_f
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, 0u8, i))
        .chain(s_v.iter().enumerate().map(|(i, &s)| (s, 1u8, i)))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; s_f.len()];
    let mut out = Vec::with_capacity(k);
    for (_, _, i) in entries {
        if !taken[i] {
            taken[i] = true;
            out.push(i);
            if out.len() == k {
                break;
            }
        }
    }
    Ok(out)
}

/// Runs the configured fusion and returns the full saliency profile.
pub fn select_frames(s_f: &[f64], s_v: &[f64], cfg: &FusionConfig) -> Result<SaliencyProfile> {
    check_lengths(s_f, s_v)?;
    let (selected, fused_scores) = match cfg.mode {
        m if m.is_score() => {
            let fused = fuse_scores(s_f, s_v, m, cfg.ratio)?;
            (select_topk(&fused, cfg.k)?, Some(fused))
        }
        FusionMode::IndexUnion => (fuse_index_union(s_f, s_v, cfg.k, cfg.ratio)?, None),
        FusionMode::IndexIntersect => (fuse_index_intersect(s_f, s_v, cfg.k)?, None),
        _ => (fuse_index_join(s_f, s_v, cfg.k)?, None),
    };
    Ok(SaliencyProfile {
        s_f: s_f.to_vec(),
        s_v: s_v.to_vec(),
        selected,
        fused_scores,
    })
}

/// Full inference path: saliency from both heads, then fusion.
pub fn sample_frames(
    model: &SamplerModel,
    record: &VideoRecord,
    cfg: &FusionConfig,
) -> Result<SaliencyProfile> {
    let out = model.infer(&record.light_features)?;
    select_frames(&fsm_saliency(&out.fsm_logits), &vgm_saliency(&out.attn), cfg)
}

/// Mean of the recognizer's softmax over the selected frames.
pub fn recognize_video(record: &VideoRecord, selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::contract("cannot recognize a video from zero frames"));
    }
    let c = record.num_classes();
    let mut mean = vec![0.0; c];
    // frame order fixes the summation order, so equal sets give equal bits
    let mut frames = selected.to_vec();
    frames.sort_unstable();
    for &i in &frames {
        if i >= record.num_frames() {
            return Err(Error::contract(format!(
                "frame index {i} out of range for {} frames",
                record.num_frames()
            )));
        }
        let mut p = record.recognizer_logits.row(i).to_vec();
        softmax_slice(&mut p);
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= selected.len() as f64);
    Ok(mean)
}

/// `frame,s_f,s_v,fused,selected` rows for offline plotting; `fused` is
/// empty for index modes.
pub fn saliency_csv(profile: &SaliencyProfile) -> String {
    let mut out = String::from("frame,s_f,s_v,fused,selected\n");
    for i in 0..profile.s_f.len() {
        let fused = profile
            .fused_scores
            .as_ref()
            .map(|f| f[i].to_string())
            .unwrap_or_default();
        let sel = u8::from(profile.selected.contains(&i));
        out.push_str(&format!(
            "{i},{},{},{fused},{sel}\n",
            profile.s_f[i], profile.s_v[i]
        ));
    }
    out
}
