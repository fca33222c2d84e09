use crate::error::{Error, Result};
use crate::numerics::Array;

/// One video: per-frame lightweight features, the recognizer's guiding
/// features and logits, and (synthetic data only) the planted saliency mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: usize,
    /// `[N×D_l]`
    pub light_features: Array,
    /// `[N×D_g]`
    pub guiding_features: Array,
    /// `[N×C]`
    pub recognizer_logits: Array,
    /// `[N]` of 0/1
    pub saliency_mask: Option<Array>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.light_features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.recognizer_logits.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_frames();
        let ctx = |what: &str| Error::contract(format!("video {}: {what}", self.video_id));
        for a in [
            &self.light_features,
            &self.guiding_features,
            &self.recognizer_logits,
        ] {
            if a.rank() != 2 {
                return Err(ctx("per-frame arrays must be matrices"));
            }
            if a.rows() != n {
                return Err(ctx("per-frame arrays disagree on frame count"));
            }
        }
        if self.label >= self.num_classes() {
            return Err(ctx("label out of range"));
        }
        if let Some(mask) = &self.saliency_mask {
            if mask.len() != n {
                return Err(ctx("mask length differs from frame count"));
            }
            if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(ctx("mask entries must be 0 or 1"));
            }
        }
        Ok(())
    }

    /// Gathers every per-frame array with the same indices.
    pub fn gather(&self, indices: &[usize]) -> VideoRecord {
        VideoRecord {
            video_id: self.video_id.clone(),
            label: self.label,
            light_features: self.light_features.gather_rows(indices),
            guiding_features: self.guiding_features.gather_rows(indices),
            recognizer_logits: self.recognizer_logits.gather_rows(indices),
            saliency_mask: self.saliency_mask.as_ref().map(|m| {
                Array::vector(indices.iter().map(|&i| m.data()[i]).collect())
            }),
        }
    }

    /// Frame indices marked salient by the mask.
    pub fn planted(&self) -> Option<Vec<usize>> {
        self.saliency_mask.as_ref().map(|m| {
            m.data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect()
        })
    }
}
