//! Synthetic videos with planted salient frames.
//!
//! Each class owns a unit-norm centroid in the lightweight and in the
//! recognizer feature space. Salient frames sit at their class centroid plus
//! isotropic Gaussian noise; the rest are drawn around a shared pool of
//! background centroids. Recognizer logits come from an analytic nearest-
//! centroid oracle: `logit_j = -‖x_g − μ_g[j]‖`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub frames: usize,
    pub light_dim: usize,
    pub guiding_dim: usize,
    pub salient_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            train_per_class: 40,
            val_per_class: 10,
            frames: 32,
            light_dim: 32,
            guiding_dim: 32,
            salient_fraction: 0.25,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("synthetic data needs at least 2 classes"));
        }
        if !(self.salient_fraction > 0.0 && self.salient_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "salient_fraction {} not in (0, 1]",
                self.salient_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract("noise_sigma must be finite and >= 0"));
        }
        if self.frames == 0 || self.light_dim < 2 || self.guiding_dim < 2 {
            return Err(Error::contract("frames >= 1 and feature dims >= 2 required"));
        }
        if self.train_per_class == 0 {
            return Err(Error::contract("train_per_class must be >= 1"));
        }
        Ok(())
    }

    /// Planted salient frames per video, `ceil(fraction · N)`.
    pub fn salient_count(&self) -> usize {
        ((self.salient_fraction * self.frames as f64).ceil() as usize).clamp(1, self.frames)
    }
}

/// Generated splits plus the ground-truth centroids.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    /// `[C×D_g]`
    pub guiding_centroids: Array,
    /// `[C×D_l]`
    pub light_centroids: Array,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn centroids(count: usize, dim: usize, rng: &mut ChaCha8Rng, avoid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let v = unit_vector(dim, rng);
        let close = avoid
            .iter()
            .chain(&out)
            .any(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() > 0.9);
        if !close {
            out.push(v);
        }
    }
    out
}

fn noisy(center: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let c = cfg.num_classes;
    let mut crng = rng::stream(cfg.seed, rng::DATA, &[0]);
    let class_l = centroids(c, cfg.light_dim, &mut crng, &[]);
    let class_g = centroids(c, cfg.guiding_dim, &mut crng, &[]);
    let bg_l = centroids(c, cfg.light_dim, &mut crng, &class_l);
    let bg_g = centroids(c, cfg.guiding_dim, &mut crng, &class_g);

    let make_split = |split: &str, per_class: usize, stream_id: u64| -> Result<Dataset> {
        let mut records = Vec::with_capacity(per_class * c);
        for label in 0..c {
            for k in 0..per_class {
                let mut vr = rng::stream(cfg.seed, rng::DATA, &[stream_id, label as u64, k as u64]);
                records.push(make_video(
                    cfg,
                    format!("{split}_{label:03}_{k:04}"),
                    label,
                    (&class_l, &class_g, &bg_l, &bg_g),
                    &mut vr,
                )?);
            }
        }
        Ok(Dataset {
            split: split.to_string(),
            num_classes: c,
            records,
        })
    };

    let flat = |rows: &[Vec<f64>]| Array::from_rows(rows);
    Ok(SyntheticData {
        train: make_split("train", cfg.train_per_class, 1)?,
        val: make_split("val", cfg.val_per_class, 2)?,
        guiding_centroids: flat(&class_g)?,
        light_centroids: flat(&class_l)?,
    })
}

type Centroids<'a> = (&'a [Vec<f64>], &'a [Vec<f64>], &'a [Vec<f64>], &'a [Vec<f64>]);

fn make_video(
    cfg: &SynthConfig,
    video_id: String,
    label: usize,
    (class_l, class_g, bg_l, bg_g): Centroids<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<VideoRecord> {
    let n = cfg.frames;
    let mut mask = vec![0.0; n];
    for i in sample(rng, n, cfg.salient_count()) {
        mask[i] = 1.0;
    }
    let mut light = Vec::with_capacity(n);
    let mut guiding = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for &m in &mask {
        let (cl, cg) = if m == 1.0 {
            (&class_l[label], &class_g[label])
        } else {
            let b = rng.random_range(0..bg_l.len());
            (&bg_l[b], &bg_g[b])
        };
        let g = noisy(cg, cfg.noise_sigma, rng);
        light.push(noisy(cl, cfg.noise_sigma, rng));
        logits.push(class_g.iter().map(|mu| -distance(&g, mu)).collect());
        guiding.push(g);
    }
    Ok(VideoRecord {
        video_id,
        label,
        light_features: Array::from_rows(&light)?,
        guiding_features: Array::from_rows(&guiding)?,
        recognizer_logits: Array::from_rows(&logits)?,
        saliency_mask: Some(Array::vector(mask)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, fraction: f64) -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            train_per_class: 2,
            val_per_class: 1,
            frames: 12,
            light_dim: 8,
            guiding_dim: 8,
            salient_fraction: fraction,
            noise_sigma: noise,
            seed: 11,
        }
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

    #[test]
    fn zero_noise_salient_frames_sit_on_centroid() {
        let data = generate_synthetic_dataset(&small(0.0, 0.25)).unwrap();
        for r in &data.train.records {
            for i in r.planted().unwrap() {
                assert_eq!(r.guiding_features.row(i), data.guiding_centroids.row(r.label));
                assert_eq!(argmax(r.recognizer_logits.row(i)), r.label);
            }
            assert_eq!(r.planted().unwrap().len(), 3);
        }
    }

    #[test]
    fn full_fraction_masks_everything() {
        let data = generate_synthetic_dataset(&small(0.1, 1.0)).unwrap();
        for r in data.train.records.iter().chain(&data.val.records) {
            assert!(r.saliency_mask.as_ref().unwrap().data().iter().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_dataset(&small(0.3, 0.25)).unwrap();
        let b = generate_synthetic_dataset(&small(0.3, 0.25)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let mut other = small(0.3, 0.25);
        other.seed = 12;
        assert_ne!(generate_synthetic_dataset(&other).unwrap().train, a.train);
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(generate_synthetic_dataset(&small(0.1, 1.5)).is_err());
        assert!(generate_synthetic_dataset(&small(0.1, 0.0)).is_err());
        let mut one_class = small(0.1, 0.5);
        one_class.num_classes = 1;
        assert!(generate_synthetic_dataset(&one_class).is_err());
    }

    #[test]
    fn oracle_ranking_recovers_planted_frames() {
        let cfg = SynthConfig {
            num_classes: 10,
            train_per_class: 20,
            val_per_class: 0,
            frames: 16,
            light_dim: 32,
            guiding_dim: 32,
            salient_fraction: 0.25,
            noise_sigma: 0.1,
            seed: 3,
        };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        let k = 4;
        let mut total = 0.0;
        for r in &data.train.records {
            let mut order: Vec<usize> = (0..16).collect();
            let score = |i: usize| r.recognizer_logits.get(i, r.label);
            order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
            let planted = r.planted().unwrap();
            let hits = order[..k].iter().filter(|i| planted.contains(i)).count();
            total += hits as f64 / planted.len() as f64;
        }
        let recall = total / data.train.records.len() as f64;
        assert!(recall >= 0.95, "oracle recall {recall}");
    }
}
