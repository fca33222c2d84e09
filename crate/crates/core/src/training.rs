//! Mini-batch SGD over pre-sampled videos with seeded shuffling, shift
//! augmentation and per-epoch checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{atomic_write, presample_indices, Dataset, PresampleConfig, VideoRecord};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, presample_dataset, CostTable};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, SamplerModel};
use crate::numerics::{sgd_step, Array, Gradients, OptimizerState, Tape};
use crate::rng;
use crate::supervision::{
    guiding_saliency_scores, hard_video_labels, ns_pseudo_labels, target_matrix, PrototypeBank,
};

pub const METRICS_HEADER: &str = "epoch,lr,loss,loss_f,loss_cls,loss_ns,val_top1,val_recall";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.nsc";
pub const BEST_CHECKPOINT: &str = "best.nsc";

/// Frame-level targets used for the frame head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supervision {
    /// Soft targets split between the video class and the non-salient class.
    NonSaliency,
    /// Every frame carries the video label.
    HardVideoLabel,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::NonSaliency => "ns",
            Supervision::HardVideoLabel => "hard",
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ns" => Ok(Supervision::NonSaliency),
            "hard" => Ok(Supervision::HardVideoLabel),
            _ => Err(Error::contract(format!(
                "unknown supervision `{s}` (expected ns or hard)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub seed: u64,
    pub presample: PresampleConfig,
    pub supervision: Supervision,
    /// Fusion used for validation and best-checkpoint selection.
    pub eval_fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 64,
            base_lr: 0.01,
            lr_decay_epochs: vec![50, 75],
            decay_factor: 0.1,
            momentum: 0.9,
            seed: 0,
            presample: PresampleConfig {
                frames: 16,
                shift_augment: true,
            },
            supervision: Supervision::NonSaliency,
            eval_fusion: FusionConfig::new(5),
        }
    }
}

impl TrainConfig {
    /// Default recipe shortened to `epochs`, decay points scaled to match.
    pub fn with_epochs(epochs: usize) -> Self {
        let base = TrainConfig::default();
        let decays = scale_decay_epochs(&base.lr_decay_epochs, base.epochs, epochs);
        TrainConfig {
            epochs,
            lr_decay_epochs: decays,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be >= 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract(format!("base_lr {} must be >= 0", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::contract(format!(
                "decay_factor {} not in (0, 1]",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        let d = &self.lr_decay_epochs;
        if d.windows(2).any(|w| w[0] >= w[1]) || d.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::contract(format!(
                "decay epochs {d:?} must be strictly increasing and < {}",
                self.epochs
            )));
        }
        if self.presample.frames == 0 {
            return Err(Error::contract("observation frame count must be >= 1"));
        }
        let k = self.eval_fusion.k;
        if k == 0 || k > self.presample.frames {
            return Err(Error::contract(format!(
                "K={k} must be in [1, T={}]",
                self.presample.frames
            )));
        }
        Ok(())
    }
}

/// Maps decay points onto a schedule of `to` epochs, rounding up. Points
/// that collide or fall past the end are dropped.
pub fn scale_decay_epochs(decays: &[usize], from: usize, to: usize) -> Vec<usize> {
    let mut out: Vec<usize> = decays
        .iter()
        .map(|&e| (e * to).div_ceil(from))
        .filter(|&e| e < to)
        .collect();
    out.dedup();
    out
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    let drops = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.base_lr * cfg.decay_factor.powi(drops as i32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_f: f64,
    pub loss_cls: f64,
    pub loss_ns: f64,
    pub val_top1: Option<f64>,
    pub val_recall: Option<f64>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{},{}",
            self.epoch,
            self.lr,
            self.loss,
            self.loss_f,
            self.loss_cls,
            self.loss_ns,
            opt(self.val_top1),
            opt(self.val_recall)
        )
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in log {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: SamplerModel,
    pub log: Vec<EpochMetrics>,
    /// Epoch whose validation top-1 was highest, earliest on ties.
    pub best_epoch: Option<usize>,
}

/// Guiding scores of every training video over all of its frames; they
/// depend only on frozen prototypes and recognizer features.
pub fn guiding_score_cache(train: &Dataset, bank: &PrototypeBank) -> Result<Vec<Vec<f64>>> {
    train
        .records
        .par_iter()
        .map(|r| guiding_saliency_scores(r, bank))
        .collect()
}

/// Frame targets for the frames at `indices` of one video.
pub fn frame_targets(
    record: &VideoRecord,
    cached_scores: Option<&[f64]>,
    indices: &[usize],
    supervision: Supervision,
) -> Result<Array> {
    let c = record.num_classes();
    let labels = match supervision {
        Supervision::HardVideoLabel => hard_video_labels(indices.len(), record.label, c)?,
        Supervision::NonSaliency => {
            let g = cached_scores
                .ok_or_else(|| Error::contract("non-saliency supervision needs guiding scores"))?;
            let picked: Vec<f64> = indices.iter().map(|&i| g[i]).collect();
            ns_pseudo_labels(&picked, record.label, c)?
        }
    };
    target_matrix(&labels)
}

/// `(validation top-1, salient recall)` through the full inference path.
pub fn evaluate_epoch(
    model: &SamplerModel,
    val: &Dataset,
    presample_cfg: &PresampleConfig,
    fusion: &FusionConfig,
) -> Result<(f64, Option<f64>)> {
    let records = presample_dataset(val, presample_cfg);
    let report = evaluate_model(model, &records, fusion, &CostTable::default())?;
    Ok((report.top1, report.recall))
}

struct VideoStep {
    grads: Gradients,
    total: f64,
    frame: f64,
    cls: f64,
    ns: f64,
}

fn video_step(
    model: &SamplerModel,
    record: &VideoRecord,
    cached: Option<&[f64]>,
    cfg: &TrainConfig,
    key: [u64; 4],
) -> Result<VideoStep> {
    let [epoch, batch, position, video] = key;
    let mut aug = rng::stream(cfg.seed, rng::AUGMENT, &[epoch, video]);
    let idx = presample_indices(record.num_frames(), &cfg.presample, Some(&mut aug));
    let features = record.light_features.gather_rows(&idx);
    let targets = frame_targets(record, cached, &idx, cfg.supervision)?;
    let mut dropout = model
        .config()
        .has_dropout()
        .then(|| rng::stream(cfg.seed, rng::DROPOUT, &[epoch, batch, position]));
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &features, dropout.as_mut())?;
    let losses = model.total_loss(&mut tape, &fwd, targets, record.label)?;
    let item = |n| tape.value(n).item();
    let (total, frame, cls, ns) = (
        item(losses.total),
        item(losses.frame),
        item(losses.cls),
        item(losses.ns),
    );
    let grads = tape.gradients(losses.total)?;
    Ok(VideoStep {
        grads,
        total,
        frame,
        cls,
        ns,
    })
}

fn write_log(dir: &Path, log: &[EpochMetrics]) -> Result<()> {
    atomic_write(&dir.join(METRICS_FILE), metrics_csv(log).as_bytes())
}

/// Trains a fresh model. With `out_dir`, the metrics log and the last and
/// best checkpoints are rewritten after every epoch.
pub fn train(
    train_set: &Dataset,
    val: Option<&Dataset>,
    bank: &PrototypeBank,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.records.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if train_set.light_dim() != model_cfg.light_dim || train_set.num_classes != model_cfg.num_classes {
        return Err(Error::contract(format!(
            "model expects D_l={} C={}, data has D_l={} C={}",
            model_cfg.light_dim,
            model_cfg.num_classes,
            train_set.light_dim(),
            train_set.num_classes
        )));
    }
    if cfg.presample.frames > model_cfg.max_frames {
        return Err(Error::Capacity {
            t: cfg.presample.frames,
            max_t: model_cfg.max_frames,
        });
    }
    let cache = match cfg.supervision {
        Supervision::NonSaliency => {
            if bank.num_classes() != train_set.num_classes {
                return Err(Error::contract(format!(
                    "prototype bank has {} classes, data has {}",
                    bank.num_classes(),
                    train_set.num_classes
                )));
            }
            Some(guiding_score_cache(train_set, bank)?)
        }
        Supervision::HardVideoLabel => None,
    };

    let mut model = SamplerModel::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(model.params(), cfg.base_lr, cfg.momentum)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let n = train_set.records.len();

    for epoch in 0..cfg.epochs {
        opt.learning_rate = lr_at_epoch(cfg, epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, rng::SHUFFLE, &[epoch as u64]));
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let steps: Vec<VideoStep> = chunk
                .par_iter()
                .enumerate()
                .map(|(p, &v)| {
                    video_step(
                        &model,
                        &train_set.records[v],
                        cache.as_ref().map(|c| c[v].as_slice()),
                        cfg,
                        [epoch as u64, b as u64, p as u64, v as u64],
                    )
                })
                .collect::<Result<_>>()?;
            if steps.iter().any(|s| !s.total.is_finite()) {
                let videos = chunk
                    .iter()
                    .map(|&v| train_set.records[v].video_id.as_str())
                    .collect::<Vec<_>>()
                    .join(",");
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    videos,
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            for s in &steps {
                s.grads.accumulate_into(model.params_mut(), scale);
                for (acc, v) in sums.iter_mut().zip([s.total, s.frame, s.cls, s.ns]) {
                    *acc += v;
                }
            }
            sgd_step(model.params_mut(), &mut opt);
        }

        let (val_top1, val_recall) = match val {
            Some(v) => {
                let (t, r) = evaluate_epoch(&model, v, &cfg.presample, &cfg.eval_fusion)?;
                (Some(t), r)
            }
            None => (None, None),
        };
        let improved = match (val_top1, best) {
            (Some(t), Some((_, b))) => t > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((epoch, val_top1.unwrap_or_default()));
        }
        let mean = |s: f64| s / n as f64;
        log.push(EpochMetrics {
            epoch,
            lr: opt.learning_rate,
            loss: mean(sums[0]),
            loss_f: mean(sums[1]),
            loss_cls: mean(sums[2]),
            loss_ns: mean(sums[3]),
            val_top1,
            val_recall,
        });
        if let Some(dir) = out_dir {
            model.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                model.save(&dir.join(BEST_CHECKPOINT))?;
            }
            write_log(dir, &log)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.map(|(e, _)| e),
    })
}

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(LAST_CHECKPOINT), dir.join(BEST_CHECKPOINT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};
    use crate::supervision::build_prototypes;
    use proptest::prelude::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 0.01);
        assert!((lr_at_epoch(&cfg, 49).unwrap() - 0.01).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 50).unwrap() - 0.001).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 75).unwrap() - 0.0001).abs() < 1e-15);
        assert!(lr_at_epoch(&cfg, 120).is_err());
    }

    #[test]
    fn scaled_schedule() {
        assert_eq!(TrainConfig::with_epochs(30).lr_decay_epochs, vec![13, 19]);
        assert_eq!(TrainConfig::with_epochs(120).lr_decay_epochs, vec![50, 75]);
        assert_eq!(TrainConfig::with_epochs(3).lr_decay_epochs, vec![2]);
        assert!(TrainConfig::with_epochs(1).lr_decay_epochs.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.lr_decay_epochs = vec![75, 50];
        assert!(cfg.validate().is_err());
        cfg.lr_decay_epochs = vec![50, 120];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.eval_fusion.k = 17;
        assert!(cfg.validate().is_err());
        assert!("sometimes".parse::<Supervision>().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_piecewise_constant_and_nonincreasing(
            epochs in 2usize..200,
            raw in proptest::collection::btree_set(1usize..200, 0..4),
        ) {
            let decays: Vec<usize> = raw.into_iter().filter(|&e| e < epochs).collect();
            let cfg = TrainConfig { epochs, lr_decay_epochs: decays.clone(), ..TrainConfig::default() };
            let lrs: Vec<f64> = (0..epochs).map(|e| lr_at_epoch(&cfg, e).unwrap()).collect();
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(drops, decays.len());
        }
    }

    struct Fixture {
        data: crate::data::SyntheticData,
        bank: PrototypeBank,
        model_cfg: ModelConfig,
    }

    fn fixture() -> Fixture {
        let synth = SynthConfig {
            num_classes: 4,
            train_per_class: 4,
            val_per_class: 2,
            frames: 12,
            light_dim: 16,
            guiding_dim: 8,
            ..SynthConfig::default()
        };
        let data = generate_synthetic_dataset(&synth).unwrap();
        let bank = build_prototypes(&data.train, 30.0).unwrap();
        let mut model_cfg = ModelConfig::new(16, 4);
        model_cfg.encoder_layers = 1;
        Fixture {
            data,
            bank,
            model_cfg,
        }
    }

    fn short_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 5,
            presample: PresampleConfig::new(8, true).unwrap(),
            eval_fusion: FusionConfig::new(2),
            ..TrainConfig::with_epochs(epochs)
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let f = fixture();
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..short_cfg(1)
        };
        let out = train(&f.data.train, None, &f.bank, &f.model_cfg, &cfg, None).unwrap();
        let init = SamplerModel::new(f.model_cfg.clone(), cfg.seed).unwrap();
        for (a, b) in out.model.params().iter().zip(init.params().iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(out.log[0].loss.is_finite());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let f = fixture();
        let cfg = short_cfg(3);
        let run = || {
            train(&f.data.train, Some(&f.data.val), &f.bank, &f.model_cfg, &cfg, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
        assert_eq!(a.model, b.model);
        let other = train(
            &f.data.train,
            Some(&f.data.val),
            &f.bank,
            &f.model_cfg,
            &TrainConfig { seed: 1, ..cfg },
            None,
        )
        .unwrap();
        assert_ne!(metrics_csv(&a.log), metrics_csv(&other.log));
    }

    #[test]
    fn cached_scores_match_fresh_computation() {
        let f = fixture();
        let cache = guiding_score_cache(&f.data.train, &f.bank).unwrap();
        let pcfg = PresampleConfig::new(8, true).unwrap();
        for epoch in 0..3u64 {
            for (v, r) in f.data.train.records.iter().enumerate() {
                let mut aug = rng::stream(epoch, rng::AUGMENT, &[epoch, v as u64]);
                let idx = presample_indices(r.num_frames(), &pcfg, Some(&mut aug));
                let cached = frame_targets(r, Some(&cache[v]), &idx, Supervision::NonSaliency).unwrap();
                let sub = r.gather(&idx);
                let fresh_g = guiding_saliency_scores(&sub, &f.bank).unwrap();
                let fresh = target_matrix(&ns_pseudo_labels(&fresh_g, r.label, r.num_classes()).unwrap()).unwrap();
                assert_eq!(cached, fresh);
            }
        }
    }

    #[test]
    fn hard_labels_put_all_mass_on_the_video_class() {
        let f = fixture();
        let r = &f.data.train.records[3];
        let t = frame_targets(r, None, &[0, 1, 2], Supervision::HardVideoLabel).unwrap();
        for i in 0..3 {
            assert_eq!(t.get(i, r.label), 1.0);
        }
        assert!(frame_targets(r, None, &[0], Supervision::NonSaliency).is_err());
    }

    #[test]
    fn outputs_written_per_epoch() {
        let f = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = short_cfg(2);
        let out = train(&f.data.train, Some(&f.data.val), &f.bank, &f.model_cfg, &cfg, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 3);
        let (last, best) = checkpoint_paths(dir.path());
        assert_eq!(SamplerModel::load(&last).unwrap().params().len(), out.model.params().len());
        assert!(best.exists());
        assert!(out.best_epoch.is_some());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let f = fixture();
        let cfg = short_cfg(1);
        let wrong = ModelConfig::new(8, 4);
        assert!(train(&f.data.train, None, &f.bank, &wrong, &cfg, None).is_err());
        let mut long = cfg.clone();
        long.presample.frames = 200;
        long.eval_fusion.k = 2;
        assert!(matches!(
            train(&f.data.train, None, &f.bank, &f.model_cfg, &long, None),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let synth = SynthConfig {
            num_classes: 4,
            train_per_class: 1,
            val_per_class: 60,
            frames: 16,
            light_dim: 16,
            guiding_dim: 8,
            ..SynthConfig::default()
        };
        let data = generate_synthetic_dataset(&synth).unwrap();
        let model = SamplerModel::new(ModelConfig::new(16, 4), 3).unwrap();
        // untrained sampler heads: judged on its own video-level prediction
        let records = presample_dataset(&data.val, &PresampleConfig::new(8, false).unwrap());
        let correct = records
            .iter()
            .filter(|r| {
                let out = model.infer(&r.light_features).unwrap();
                crate::evaluation::argmax(&out.salient_logits[..4]) == r.label
            })
            .count();
        let top1 = correct as f64 / records.len() as f64;
        assert!((top1 - 0.25).abs() <= 0.05, "{top1}");
    }
}
