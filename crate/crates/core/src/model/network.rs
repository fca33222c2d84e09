use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{softmax_slice, Array, NodeId, ParamId, ParamStore, Tape};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Encoder, frame head and attention head sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerModel {
    cfg: ModelConfig,
    store: ParamStore,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    fsm_w: ParamId,
    fsm_b: ParamId,
    attn_w: ParamId,
    attn_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// `[T×D_l]`
    pub encoded: NodeId,
    /// `[T×(C+1)]`
    pub fsm_logits: NodeId,
    /// `[T×1]`
    pub attn: NodeId,
    /// `[1×(C+1)]`
    pub salient_logits: NodeId,
    /// `[1×(C+1)]`
    pub nonsalient_logits: NodeId,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub encoded: Array,
    pub fsm_logits: Array,
    pub attn: Vec<f64>,
    pub salient_logits: Vec<f64>,
    pub nonsalient_logits: Vec<f64>,
}

/// Loss components of one video.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub frame: NodeId,
    pub cls: NodeId,
    pub ns: NodeId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store.add(name, Array::new(vec![fan_in, fan_out], data)?)
    }

    fn constant(&mut self, name: String, len: usize, value: f64) -> Result<ParamId> {
        self.store.add(name, Array::filled(&[len], value))
    }
}

/// Inverted dropout; identity without an rng or at rate 0.
fn dropout(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, Array::new(shape, mask)?)
}

impl SamplerModel {
    /// Fresh parameters: linear weights `U(±1/√fan_in)`, positional
    /// embedding `N(0, 0.02)`, zero biases, unit layer-norm gains.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = rng::stream(seed, rng::INIT, &[]);
        let mut store = ParamStore::new();
        let d = cfg.light_dim;
        let c1 = cfg.num_classes + 1;

        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let pos_data = (0..cfg.max_frames * d)
            .map(|_| normal.sample(&mut init_rng))
            .collect();
        let pos = store.add("pos_embedding", Array::new(vec![cfg.max_frames, d], pos_data)?)?;

        let mut init = Init {
            store: &mut store,
            rng: &mut init_rng,
        };
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let n = |s: &str| format!("encoder.{l}.{s}");
            layers.push(EncoderLayer {
                ln1_gain: init.constant(n("ln1.gain"), d, 1.0)?,
                ln1_bias: init.constant(n("ln1.bias"), d, 0.0)?,
                wq: init.uniform(n("attn.wq"), d, d)?,
                bq: init.constant(n("attn.bq"), d, 0.0)?,
                wk: init.uniform(n("attn.wk"), d, d)?,
                wv: init.uniform(n("attn.wv"), d, d)?,
                bv: init.constant(n("attn.bv"), d, 0.0)?,
                wo: init.uniform(n("attn.wo"), d, d)?,
                bo: init.constant(n("attn.bo"), d, 0.0)?,
                ln2_gain: init.constant(n("ln2.gain"), d, 1.0)?,
                ln2_bias: init.constant(n("ln2.bias"), d, 0.0)?,
                w1: init.uniform(n("ffn.w1"), d, cfg.ffn_dim)?,
                b1: init.constant(n("ffn.b1"), cfg.ffn_dim, 0.0)?,
                w2: init.uniform(n("ffn.w2"), cfg.ffn_dim, d)?,
                b2: init.constant(n("ffn.b2"), d, 0.0)?,
            });
        }
        let fsm_w = init.uniform("fsm.weight".into(), d, c1)?;
        let fsm_b = init.constant("fsm.bias".into(), c1, 0.0)?;
        let attn_w = init.uniform("vgm.attn.weight".into(), d, 1)?;
        let attn_b = init.constant("vgm.attn.bias".into(), 1, 0.0)?;
        let cls_w = init.uniform("vgm.cls.weight".into(), d, c1)?;
        let cls_b = init.constant("vgm.cls.bias".into(), c1, 0.0)?;

        Ok(SamplerModel {
            cfg,
            store,
            pos,
            layers,
            fsm_w,
            fsm_b,
            attn_w,
            attn_b,
            cls_w,
            cls_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Positional embedding, dropout, then pre-norm encoder blocks.
    pub fn encode(
        &self,
        tape: &mut Tape,
        features: &Array,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let t = features.rows();
        if features.rank() != 2 || features.cols() != self.cfg.light_dim {
            return Err(Error::Shape {
                op: "encode",
                left: features.shape().to_vec(),
                right: vec![t, self.cfg.light_dim],
            });
        }
        if t > self.cfg.max_frames {
            return Err(Error::Capacity {
                t,
                max_t: self.cfg.max_frames,
            });
        }
        let x = tape.constant(features.clone());
        let pos_all = tape.param(&self.store, self.pos);
        let pos = tape.slice_rows(pos_all, 0, t)?;
        let mut h = tape.add(x, pos)?;
        h = dropout(tape, h, self.cfg.dropout_pos_enc, rng)?;
        for layer in &self.layers {
            h = self.encoder_block(tape, layer, h)?;
        }
        Ok(h)
    }

    fn encoder_block(&self, tape: &mut Tape, l: &EncoderLayer, x: NodeId) -> Result<NodeId> {
        let p = |tape: &mut Tape, id| tape.param(&self.store, id);

        let (g1, b1) = (p(tape, l.ln1_gain), p(tape, l.ln1_bias));
        let z = tape.layer_norm(x, g1, b1)?;
        let (wq, bq) = (p(tape, l.wq), p(tape, l.bq));
        let wk = p(tape, l.wk);
        let (wv, bv) = (p(tape, l.wv), p(tape, l.bv));
        let q = tape.linear(z, wq, bq)?;
        // a key bias shifts each query's scores uniformly and cancels in the softmax
        let k = tape.matmul(z, wk)?;
        let v = tape.linear(z, wv, bv)?;

        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            heads.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let (wo, bo) = (p(tape, l.wo), p(tape, l.bo));
        let attn_out = tape.linear(cat, wo, bo)?;
        let h = tape.add(x, attn_out)?;

        let (g2, b2) = (p(tape, l.ln2_gain), p(tape, l.ln2_bias));
        let z = tape.layer_norm(h, g2, b2)?;
        let (w1, bb1) = (p(tape, l.w1), p(tape, l.b1));
        let (w2, bb2) = (p(tape, l.w2), p(tape, l.b2));
        let f = tape.linear(z, w1, bb1)?;
        let f = tape.gelu(f);
        let f = tape.linear(f, w2, bb2)?;
        tape.add(h, f)
    }

    /// Frame classifier over `C + 1` classes.
    pub fn fsm_forward(
        &self,
        tape: &mut Tape,
        encoded: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let x = dropout(tape, encoded, self.cfg.dropout_cls, rng)?;
        let w = tape.param(&self.store, self.fsm_w);
        let b = tape.param(&self.store, self.fsm_b);
        tape.linear(x, w, b)
    }

    /// `α = σ(x·w + b) / Σ σ(x·w + b)` as a `[T×1]` column.
    pub fn vgm_attention(
        &self,
        tape: &mut Tape,
        encoded: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let x = dropout(tape, encoded, self.cfg.dropout_attn, rng)?;
        let w = tape.param(&self.store, self.attn_w);
        let b = tape.param(&self.store, self.attn_b);
        let raw = tape.linear(x, w, b)?;
        let raw = tape.sigmoid(raw);
        Ok(tape.normalize_sum(raw))
    }

    /// Salient `Σ α_i x_i` and non-salient `Σ (1 − α_i)/T · x_i` pooled rows.
    pub fn vgm_representations(
        &self,
        tape: &mut Tape,
        encoded: NodeId,
        attn: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let t = tape.value(encoded).rows() as f64;
        let at = tape.transpose(attn);
        let salient = tape.matmul(at, encoded)?;
        let complement = tape.affine(at, -1.0 / t, 1.0 / t);
        let nonsalient = tape.matmul(complement, encoded)?;
        Ok((salient, nonsalient))
    }

    /// Shared video classifier applied to both pooled representations.
    pub fn vgm_heads(
        &self,
        tape: &mut Tape,
        salient: NodeId,
        nonsalient: NodeId,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let w = tape.param(&self.store, self.cls_w);
        let b = tape.param(&self.store, self.cls_b);
        let s = dropout(tape, salient, self.cfg.dropout_cls, rng.as_deref_mut())?;
        let n = dropout(tape, nonsalient, self.cfg.dropout_cls, rng)?;
        Ok((tape.linear(s, w, b)?, tape.linear(n, w, b)?))
    }

    /// Full forward pass; `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &Array,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardNodes> {
        let encoded = self.encode(tape, features, rng.as_deref_mut())?;
        let fsm_logits = self.fsm_forward(tape, encoded, rng.as_deref_mut())?;
        let attn = self.vgm_attention(tape, encoded, rng.as_deref_mut())?;
        let (sal, ns) = self.vgm_representations(tape, encoded, attn)?;
        let (salient_logits, nonsalient_logits) = self.vgm_heads(tape, sal, ns, rng)?;
        Ok(ForwardNodes {
            encoded,
            fsm_logits,
            attn,
            salient_logits,
            nonsalient_logits,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn infer(&self, features: &Array) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let n = self.forward(&mut tape, features, None)?;
        Ok(ForwardOutput {
            encoded: tape.value(n.encoded).clone(),
            fsm_logits: tape.value(n.fsm_logits).clone(),
            attn: tape.value(n.attn).data().to_vec(),
            salient_logits: tape.value(n.salient_logits).data().to_vec(),
            nonsalient_logits: tape.value(n.nonsalient_logits).data().to_vec(),
        })
    }

    /// `L = L_cls + γ·L_ns + L_f` for one video.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        fwd: &ForwardNodes,
        frame_targets: Array,
        label: usize,
    ) -> Result<LossNodes> {
        let frame = fsm_loss(tape, fwd.fsm_logits, frame_targets)?;
        let (video, cls, ns) = vgm_loss(
            tape,
            fwd.salient_logits,
            fwd.nonsalient_logits,
            label,
            self.cfg.num_classes,
            self.cfg.gamma,
        )?;
        let total = tape.add(video, frame)?;
        Ok(LossNodes {
            total,
            frame,
            cls,
            ns,
        })
    }
}

/// Frame loss summed over frames.
pub fn fsm_loss(tape: &mut Tape, fsm_logits: NodeId, targets: Array) -> Result<NodeId> {
    let logits = tape.value(fsm_logits);
    if logits.rows() != targets.rows() {
        return Err(Error::contract(format!(
            "frame logits have {} rows but {} targets were given",
            logits.rows(),
            targets.rows()
        )));
    }
    tape.soft_cross_entropy(fsm_logits, targets)
}

/// Returns `(L_cls + γ·L_ns, L_cls, L_ns)`.
pub fn vgm_loss(
    tape: &mut Tape,
    salient_logits: NodeId,
    nonsalient_logits: NodeId,
    label: usize,
    num_classes: usize,
    gamma: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    if label >= num_classes {
        return Err(Error::contract(format!(
            "label {label} out of range for C={num_classes}"
        )));
    }
    let mut sal_target = Array::zeros(&[1, num_classes + 1]);
    sal_target.data_mut()[label] = 1.0;
    let mut ns_target = Array::zeros(&[1, num_classes + 1]);
    ns_target.data_mut()[num_classes] = 1.0;
    let cls = tape.soft_cross_entropy(salient_logits, sal_target)?;
    let ns = tape.soft_cross_entropy(nonsalient_logits, ns_target)?;
    let weighted = tape.scale(ns, gamma);
    let total = tape.add(cls, weighted)?;
    Ok((total, cls, ns))
}

/// Per-frame maximum class confidence (non-salient class excluded),
/// softmax-normalized along time.
pub fn fsm_saliency(fsm_logits: &Array) -> Vec<f64> {
    let c1 = fsm_logits.cols();
    let mut conf: Vec<f64> = (0..fsm_logits.rows())
        .map(|i| {
            let mut p = fsm_logits.row(i).to_vec();
            softmax_slice(&mut p);
            p[..c1 - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    softmax_slice(&mut conf);
    conf
}

/// Attention weights are the video-level saliency.
pub fn vgm_saliency(attn: &[f64]) -> Vec<f64> {
    attn.to_vec()
}

/// Complementary weights `(1 − α_i) / T`.
pub fn complementary_weights(attn: &[f64]) -> Vec<f64> {
    let t = attn.len() as f64;
    attn.iter().map(|a| (1.0 - a) / t).collect()
}
