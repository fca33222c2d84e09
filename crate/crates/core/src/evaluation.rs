//! Metrics, FLOPs accounting and the hand-crafted baseline samplers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::data::{presample, Dataset, PresampleConfig, VideoRecord};
use crate::error::{Error, Result};
use crate::fusion::{recognize_video, sample_frames, select_topk, FusionConfig};
use crate::model::SamplerModel;
use crate::numerics::{softmax_slice, Array};
use crate::rng;

/// Per-video cost components in GFLOPs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsBudget {
    pub p_rec: f64,
    pub k: usize,
    pub p_fem: f64,
    pub p_vgm: f64,
    pub p_fsm: f64,
}

impl FlopsBudget {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recognizer", self.p_rec),
            ("embedding", self.p_fem),
            ("vgm", self.p_vgm),
            ("fsm", self.p_fsm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} cost {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

pub fn flops_total(budget: &FlopsBudget) -> f64 {
    budget.p_rec * budget.k as f64 + budget.p_fem + budget.p_vgm + budget.p_fsm
}

/// Per-network costs in GFLOPs, read from `name=gflops` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub recognizer: f64,
    /// Lightweight extractor, per observed frame.
    pub extractor: f64,
    pub encoder: f64,
    pub vgm: f64,
    pub fsm: f64,
}

pub const DEFAULT_COST_TABLE: &str = "\
# GFLOPs per frame for the recognizer and extractor, per video otherwise
recognizer=4.109
extractor=0.320
encoder=0.315
vgm=0.004
fsm=0.002
";

impl Default for CostTable {
    fn default() -> Self {
        CostTable::parse(DEFAULT_COST_TABLE).expect("built-in cost table parses")
    }
}

impl CostTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("cost table line {}: expected name=gflops", n + 1)))?;
            let key = key.trim();
            if !["recognizer", "extractor", "encoder", "vgm", "fsm"].contains(&key) {
                return Err(Error::contract(format!("cost table line {}: unknown entry `{key}`", n + 1)));
            }
            let v: f64 = value.trim().parse().map_err(|_| {
                Error::contract(format!("cost table line {}: `{}` is not a number", n + 1, value.trim()))
            })?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("cost table line {}: negative cost", n + 1)));
            }
            values.insert(key.to_string(), v);
        }
        let get = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| Error::contract(format!("cost table is missing `{k}`")))
        };
        Ok(CostTable {
            recognizer: get("recognizer")?,
            extractor: get("extractor")?,
            encoder: get("encoder")?,
            vgm: get("vgm")?,
            fsm: get("fsm")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CostTable::parse(&text)
    }

    /// Sampler budget for `k` recognized frames out of `t` observed.
    pub fn budget(&self, k: usize, t: usize) -> FlopsBudget {
        FlopsBudget {
            p_rec: self.recognizer,
            k,
            p_fem: self.extractor * t as f64 + self.encoder,
            p_vgm: self.vgm,
            p_fsm: self.fsm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl MapReport {
    pub fn excluded_classes(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&c| self.per_class[c].is_none())
            .collect()
    }
}

/// Average precision at each positive's rank, averaged over classes with at
/// least one positive. Ties keep video order.
pub fn mean_average_precision(scores: &Array, labels: &[usize]) -> Result<MapReport> {
    let (v, c) = (scores.rows(), scores.cols());
    if v == 0 || v != labels.len() {
        return Err(Error::contract(format!(
            "{v} score rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} out of range for C={c}")));
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|class| {
            let col: Vec<f64> = (0..v).map(|i| scores.get(i, class)).collect();
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            let (mut hits, mut sum) = (0usize, 0.0);
            for (rank, &i) in order.iter().enumerate() {
                if labels[i] == class {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            (hits > 0).then(|| sum / hits as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MapReport { per_class, map })
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top1_accuracy(predictions: &Array, labels: &[usize]) -> Result<f64> {
    if predictions.rows() != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.rows(),
            labels.len()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(predictions.row(i)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of planted frames that were selected; `None` without planted
/// frames.
pub fn salient_recall(selected: &[usize], planted: &[usize]) -> Option<f64> {
    if planted.is_empty() {
        return None;
    }
    let hits = planted.iter().filter(|p| selected.contains(p)).count();
    Some(hits as f64 / planted.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    Uniform,
    Random,
    Dense,
    TopkConfidence,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::Uniform,
        BaselineMethod::Random,
        BaselineMethod::Dense,
        BaselineMethod::TopkConfidence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Uniform => "uniform",
            BaselineMethod::Random => "random",
            BaselineMethod::Dense => "dense",
            BaselineMethod::TopkConfidence => "topk_confidence",
        }
    }

    /// GFLOPs per video. Confidence ranking runs the recognizer on every
    /// observed frame, as does dense sampling.
    pub fn gflops(self, costs: &CostTable, k: usize, t: usize) -> f64 {
        match self {
            BaselineMethod::Uniform | BaselineMethod::Random => costs.recognizer * k as f64,
            BaselineMethod::Dense | BaselineMethod::TopkConfidence => costs.recognizer * t as f64,
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown baseline `{s}`")))
    }
}

/// Segment-center indices of `k` equal segments over `t` frames.
pub fn uniform_indices(t: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| (2 * i + 1) * t / (2 * k)).collect()
}

pub fn baseline_sample(
    record: &VideoRecord,
    method: BaselineMethod,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let t = record.num_frames();
    if method == BaselineMethod::Dense {
        return Ok((0..t).collect());
    }
    if k == 0 || k > t {
        return Err(Error::contract(format!("K={k} must be in [1, T={t}]")));
    }
    Ok(match method {
        BaselineMethod::Uniform => uniform_indices(t, k),
        BaselineMethod::Random => {
            let key = rng::fnv1a(record.video_id.as_bytes());
            let mut r = rng::stream(seed, rng::BASELINE, &[key]);
            let mut idx = index::sample(&mut r, t, k).into_vec();
            idx.sort_unstable();
            idx
        }
        BaselineMethod::TopkConfidence => {
            let conf: Vec<f64> = (0..t)
                .map(|i| {
                    let mut p = record.recognizer_logits.row(i).to_vec();
                    softmax_slice(&mut p);
                    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            select_topk(&conf, k)?
        }
        BaselineMethod::Dense => unreachable!(),
    })
}

/// One row of the frontier table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub k: usize,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub top1: f64,
    pub recall: Option<f64>,
    pub gflops: f64,
}

/// Scores every record with the frames chosen by `select`. Records must
/// already be pre-sampled.
pub fn evaluate_selection<F>(
    records: &[VideoRecord],
    method: &str,
    k: usize,
    gflops: f64,
    select: F,
) -> Result<EvalReport>
where
    F: Fn(&VideoRecord) -> Result<Vec<usize>> + Sync,
{
    if records.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let per_video: Vec<(Vec<f64>, Option<f64>)> = records
        .par_iter()
        .map(|r| {
            let sel = select(r)?;
            let probs = recognize_video(r, &sel)?;
            let recall = r.planted().and_then(|p| salient_recall(&sel, &p));
            Ok((probs, recall))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = per_video.iter().map(|(p, _)| p.clone()).collect();
    let scores = Array::from_rows(&rows)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let ap = mean_average_precision(&scores, &labels)?;
    let recalls: Vec<f64> = per_video.iter().filter_map(|(_, r)| *r).collect();
    Ok(EvalReport {
        method: method.to_string(),
        k,
        per_class_ap: ap.per_class,
        map: ap.map,
        top1: top1_accuracy(&scores, &labels)?,
        recall: (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64),
        gflops,
    })
}

/// Pre-samples every record without augmentation.
pub fn presample_dataset(dataset: &Dataset, presample_cfg: &PresampleConfig) -> Vec<VideoRecord> {
    let cfg = PresampleConfig {
        shift_augment: false,
        ..*presample_cfg
    };
    dataset
        .records
        .iter()
        .map(|r| presample::<rand_chacha::ChaCha8Rng>(r, &cfg, None).0)
        .collect()
}

pub fn evaluate_model(
    model: &SamplerModel,
    records: &[VideoRecord],
    fusion: &FusionConfig,
    costs: &CostTable,
) -> Result<EvalReport> {
    let t = records.first().map_or(0, |r| r.num_frames());
    let gflops = flops_total(&costs.budget(fusion.k, t));
    evaluate_selection(records, "nsnet", fusion.k, gflops, |r| {
        Ok(sample_frames(model, r, fusion)?.selected)
    })
}

/// NSNet and every baseline at each K.
pub fn run_comparison(
    dataset: &Dataset,
    model: &SamplerModel,
    fusion: &FusionConfig,
    presample_cfg: &PresampleConfig,
    k_list: &[usize],
    costs: &CostTable,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let records = presample_dataset(dataset, presample_cfg);
    let t = presample_cfg.frames;
    let mut rows = Vec::new();
    for &k in k_list {
        let cfg = FusionConfig { k, ..*fusion };
        rows.push(evaluate_model(model, &records, &cfg, costs)?);
        for method in BaselineMethod::ALL {
            rows.push(evaluate_selection(
                &records,
                method.name(),
                k,
                method.gflops(costs, k, t),
                |r| baseline_sample(r, method, k, seed),
            )?);
        }
    }
    Ok(rows)
}

pub fn frontier_csv(rows: &[EvalReport]) -> String {
    let mut out = String::from("method,K,top1,mAP,recall,gflops\n");
    for r in rows {
        let recall = r.recall.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:.4}\n",
            r.method, r.k, r.top1, r.map, recall, r.gflops
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_budget(k: usize) -> FlopsBudget {
        CostTable::default().budget(k, 16)
    }

    #[test]
    fn flops_worked_example() {
        let total = flops_total(&default_budget(5));
        assert!((total - 25.99).abs() <= 0.01, "{total}");
        assert_eq!(format!("{total:.2}"), "25.99");
    }

    #[test]
    fn flops_boundaries_and_linearity() {
        let b = default_budget(0);
        assert_eq!(flops_total(&b), b.p_fem + b.p_vgm + b.p_fsm);
        let (f5, f10) = (flops_total(&default_budget(5)), flops_total(&default_budget(10)));
        assert!((f10 - f5 - 4.109 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn cost_table_rejects_bad_input() {
        assert!(CostTable::parse("recognizer=1\n").is_err());
        assert!(CostTable::parse(&format!("{DEFAULT_COST_TABLE}gpu=3\n")).is_err());
        assert!(CostTable::parse("recognizer=x").is_err());
        assert!(CostTable::parse(&DEFAULT_COST_TABLE.replace("0.315", "-1")).is_err());
    }

    /// AP straight from the definition: for each positive, count who ranks
    /// at or above it.
    fn brute_ap(col: &[f64], labels: &[usize], class: usize) -> Option<f64> {
        let above = |q: usize, p: usize| col[q] > col[p] || (col[q] == col[p] && q <= p);
        let pos: Vec<usize> = (0..col.len()).filter(|&i| labels[i] == class).collect();
        if pos.is_empty() {
            return None;
        }
        let total: f64 = pos
            .iter()
            .map(|&p| {
                let ranked = (0..col.len()).filter(|&q| above(q, p)).count();
                let hits = pos.iter().filter(|&&q| above(q, p)).count();
                hits as f64 / ranked as f64
            })
            .sum();
        Some(total / pos.len() as f64)
    }

    fn brute_map(scores: &Array, labels: &[usize]) -> f64 {
        let aps: Vec<f64> = (0..scores.cols())
            .filter_map(|c| {
                let col: Vec<f64> = (0..scores.rows()).map(|i| scores.get(i, c)).collect();
                brute_ap(&col, labels, c)
            })
            .collect();
        aps.iter().sum::<f64>() / aps.len() as f64
    }

    #[test]
    fn map_examples() {
        let labels = [0, 1, 2, 1];
        let mut onehot = Array::zeros(&[4, 3]);
        for (i, &l) in labels.iter().enumerate() {
            onehot.data_mut()[i * 3 + l] = 1.0;
        }
        assert_eq!(mean_average_precision(&onehot, &labels).unwrap().map, 1.0);

        let single = Array::from_rows(&[vec![0.1], vec![0.9]]).unwrap();
        let r = mean_average_precision(&single, &[0, 1]);
        assert!(r.is_err());
        // one positive ranked last of two
        let two = Array::from_rows(&[vec![0.1, 0.0], vec![0.9, 1.0]]).unwrap();
        let r = mean_average_precision(&two, &[0, 1]).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
    }

    #[test]
    fn map_reports_classes_without_positives() {
        let s = Array::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        let r = mean_average_precision(&s, &[0, 0]).unwrap();
        assert_eq!(r.excluded_classes(), vec![1, 2]);
        assert_eq!(r.map, r.per_class[0].unwrap());
    }

    #[test]
    fn map_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v = rng.random_range(1..=20);
            let c = rng.random_range(1..=5);
            let coarse = rng.random_bool(0.5);
            let data = (0..v * c)
                .map(|_| if coarse { f64::from(rng.random_range(0..3u8)) } else { rng.random() })
                .collect();
            let scores = Array::new(vec![v, c], data).unwrap();
            let labels: Vec<usize> = (0..v).map(|_| rng.random_range(0..c)).collect();
            let got = mean_average_precision(&scores, &labels).unwrap().map;
            assert!((got - brute_map(&scores, &labels)).abs() < 1e-12);
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn ap_matches_definition_on_all_small_orderings() {
        for v in 1usize..=8 {
            for positives in [1usize, v.div_ceil(2), v] {
                let labels: Vec<usize> = (0..v).map(|i| usize::from(i >= positives)).collect();
                for perm in permutations(v) {
                    let col: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
                    let scores = Array::new(
                        vec![v, 2],
                        col.iter().flat_map(|&x| [x, -x]).collect(),
                    )
                    .unwrap();
                    let got = mean_average_precision(&scores, &labels).unwrap();
                    let want = brute_ap(&col, &labels, 0).unwrap();
                    assert!((got.per_class[0].unwrap() - want).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn map_is_rank_invariant(
            data in proptest::collection::vec(-3.0f64..3.0, 12),
            labels in proptest::collection::vec(0usize..3, 4),
        ) {
            let s = Array::new(vec![4, 3], data.clone()).unwrap();
            let warped = Array::new(vec![4, 3], data.iter().map(|x| x.exp() * 5.0 - 1.0).collect()).unwrap();
            let a = mean_average_precision(&s, &labels).unwrap();
            let b = mean_average_precision(&warped, &labels).unwrap();
            prop_assert_eq!(a.per_class, b.per_class);
        }
    }

    #[test]
    fn top1_examples() {
        let p = Array::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(top1_accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&p, &[1, 0]).unwrap(), 0.0);
        let rows: Vec<Vec<f64>> = (0..10).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let p = Array::from_rows(&rows).unwrap();
        assert_eq!(top1_accuracy(&p, &[0; 10]).unwrap(), 0.5);
    }

    fn zero_noise_record() -> VideoRecord {
        let cfg = SynthConfig {
            num_classes: 4,
            train_per_class: 1,
            val_per_class: 1,
            frames: 20,
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&cfg).unwrap().train.records[2].clone()
    }

    #[test]
    fn baseline_examples() {
        let r = zero_noise_record().gather(&(0..10).collect::<Vec<_>>());
        assert_eq!(baseline_sample(&r, BaselineMethod::Dense, 3, 0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(baseline_sample(&r, BaselineMethod::Uniform, 5, 0).unwrap(), vec![1, 3, 5, 7, 9]);
        let a = baseline_sample(&r, BaselineMethod::Random, 4, 9).unwrap();
        assert_eq!(a, baseline_sample(&r, BaselineMethod::Random, 4, 9).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(baseline_sample(&r, BaselineMethod::Uniform, 11, 0).is_err());
    }

    #[test]
    fn confidence_baseline_finds_planted_frames_without_noise() {
        let r = zero_noise_record();
        let planted = r.planted().unwrap();
        for k in 1..=planted.len() {
            let sel = baseline_sample(&r, BaselineMethod::TopkConfidence, k, 0).unwrap();
            assert!(sel.iter().all(|i| planted.contains(i)), "K={k}: {sel:?} vs {planted:?}");
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(salient_recall(&[0, 1], &[]), None);
        assert_eq!(salient_recall(&[0, 1, 2], &[1, 2]), Some(1.0));
        assert_eq!(salient_recall(&[0], &[1, 2]), Some(0.0));
    }

    fn small_setup() -> (Dataset, SamplerModel) {
        let cfg = SynthConfig {
            num_classes: 3,
            train_per_class: 1,
            val_per_class: 4,
            frames: 12,
            light_dim: 16,
            guiding_dim: 8,
            ..SynthConfig::default()
        };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        let model = SamplerModel::new(crate::model::ModelConfig::new(16, 3), 5).unwrap();
        (data.val, model)
    }

    #[test]
    fn comparison_boundaries() {
        let (val, model) = small_setup();
        let pcfg = PresampleConfig::new(8, false).unwrap();
        let rows = run_comparison(&val, &model, &FusionConfig::new(2), &pcfg, &[2, 4, 8], &CostTable::default(), 3).unwrap();
        assert_eq!(rows.len(), 15);
        let get = |m: &str, k: usize| rows.iter().find(|r| r.method == m && r.k == k).unwrap();
        // K = T: every sampler sees the same frame set
        for m in ["nsnet", "uniform", "random", "topk_confidence"] {
            assert_eq!(get(m, 8).top1, get("dense", 8).top1);
            assert_eq!(get(m, 8).recall, Some(1.0));
        }
        assert_eq!(get("dense", 2).top1, get("dense", 8).top1);
        assert_eq!(get("dense", 2).map, get("dense", 4).map);
        let g: Vec<f64> = [2, 4, 8].iter().map(|&k| get("nsnet", k).gflops).collect();
        assert!(g[0] < g[1] && g[1] < g[2]);
        let csv = frontier_csv(&rows);
        assert!(csv.starts_with("method,K,top1,mAP,recall,gflops\nnsnet,2,"));
        assert_eq!(csv.lines().count(), 16);
    }
}
