//! Two-stream joint attention (MM-DiT style) and the text-image interaction
//! module built on it.
//!
//! Each stream has its own pre-norm, Q/K/V/output projections and FFN; the
//! attention itself runs once over the concatenation of both streams with no
//! mask, then the outputs are split back per stream.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::{LoraConfig, ParamError, ParamStore, ReparamLinear, Session};
use crate::numerics::{NumericsError, PairRotation, Rng, Tensor, Var};
use crate::rope3d::{assign_stream, RopeConfig, RopeError, RopeIndex};
use crate::token_layout::{SubjectSpec, TokenStream};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) || self.ffn_hidden == 0 {
            return Err(AttentionError::Shape(format!("invalid attention config {self:?}")));
        }
        Ok(())
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub fc_in: ReparamLinear,
    pub fc_out: ReparamLinear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        frozen: bool,
        rng: &mut Rng,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            fc_in: ReparamLinear::new(store, &format!("{name}.fc_in"), dim, hidden, true, frozen, rng)?,
            fc_out: ReparamLinear::new(store, &format!("{name}.fc_out"), hidden, dim, true, frozen, rng)?,
        })
    }

    pub fn copy_base(&self, store: &mut ParamStore, name: &str, frozen: bool) -> Result<Self, ParamError> {
        Ok(Self {
            fc_in: self.fc_in.copy_base(store, &format!("{name}.fc_in"), frozen)?,
            fc_out: self.fc_out.copy_base(store, &format!("{name}.fc_out"), frozen)?,
        })
    }

    pub fn attach_adapters(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut Rng) -> Result<(), ParamError> {
        self.fc_in.attach_adapter(store, cfg, rng)?;
        self.fc_out.attach_adapter(store, cfg, rng)
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var, NumericsError> {
        let h = self.fc_in.forward(sess, x)?;
        let h = sess.graph.gelu(h)?;
        self.fc_out.forward(sess, h)
    }

    pub fn layers(&self) -> [&ReparamLinear; 2] {
        [&self.fc_in, &self.fc_out]
    }
}

/// Per-stream projections of a joint attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamWeights {
    pub q: ReparamLinear,
    pub k: ReparamLinear,
    pub v: ReparamLinear,
    pub out: ReparamLinear,
    pub ffn: FeedForward,
}

impl StreamWeights {
    fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, frozen: bool, rng: &mut Rng) -> Result<Self, ParamError> {
        let d = cfg.dim;
        Ok(Self {
            q: ReparamLinear::new(store, &format!("{name}.q"), d, d, true, frozen, rng)?,
            k: ReparamLinear::new(store, &format!("{name}.k"), d, d, true, frozen, rng)?,
            v: ReparamLinear::new(store, &format!("{name}.v"), d, d, true, frozen, rng)?,
            out: ReparamLinear::new(store, &format!("{name}.out"), d, d, true, frozen, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, frozen, rng)?,
        })
    }

    fn copy_base(&self, store: &mut ParamStore, name: &str, frozen: bool) -> Result<Self, ParamError> {
        Ok(Self {
            q: self.q.copy_base(store, &format!("{name}.q"), frozen)?,
            k: self.k.copy_base(store, &format!("{name}.k"), frozen)?,
            v: self.v.copy_base(store, &format!("{name}.v"), frozen)?,
            out: self.out.copy_base(store, &format!("{name}.out"), frozen)?,
            ffn: self.ffn.copy_base(store, &format!("{name}.ffn"), frozen)?,
        })
    }

    /// Adapters on Q, K, V and both FFN layers; the output projection stays
    /// un-adapted.
    fn attach_adapters(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut Rng) -> Result<(), ParamError> {
        self.q.attach_adapter(store, cfg, rng)?;
        self.k.attach_adapter(store, cfg, rng)?;
        self.v.attach_adapter(store, cfg, rng)?;
        self.ffn.attach_adapters(store, cfg, rng)
    }

    pub fn layers(&self) -> Vec<&ReparamLinear> {
        let mut out = vec![&self.q, &self.k, &self.v, &self.out];
        out.extend(self.ffn.layers());
        out
    }
}

/// Projected, rotated per-stream queries/keys/values.
pub(crate) struct Projected {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Multi-head scaled dot-product attention of `q` over `k`/`v`, all shaped
/// `n × (heads · head_dim)`. Returns the concatenated head outputs and the
/// per-head probability matrices.
pub fn multi_head_attention(
    sess: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>), NumericsError> {
    let width = sess.value(q).cols();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let qh = sess.graph.slice_cols(q, a, b)?;
        let kh = sess.graph.slice_cols(k, a, b)?;
        let vh = sess.graph.slice_cols(v, a, b)?;
        let s = sess.graph.matmul_nt(qh, kh)?;
        let s = sess.graph.scale(s, scale)?;
        let p = sess.graph.softmax_rows(s)?;
        outs.push(sess.graph.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { sess.graph.concat_cols(&outs)? };
    Ok((out, probs))
}

pub(crate) fn rotation(cfg: &RopeConfig, idx: &[RopeIndex], heads: usize) -> Result<Arc<PairRotation>, RopeError> {
    cfg.rotation(idx, heads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmAttentionBlock {
    pub name: String,
    pub cfg: AttentionConfig,
    pub rope: RopeConfig,
    /// Image/video-like stream.
    pub v_stream: StreamWeights,
    /// Text-like stream.
    pub t_stream: StreamWeights,
}

/// Outputs of a joint attention pass.
pub struct MmOutput {
    pub v: Var,
    pub t: Var,
    /// Per-head attention probabilities over the concatenated keys.
    pub probs: Vec<Var>,
}

impl MmAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        frozen: bool,
        rng: &mut Rng,
    ) -> Result<Self, AttentionError> {
        cfg.validate()?;
        let rope = RopeConfig::new(cfg.head_dim())?;
        Ok(Self {
            name: name.to_string(),
            cfg,
            rope,
            v_stream: StreamWeights::new(store, &format!("{name}.v_stream"), &cfg, frozen, rng)?,
            t_stream: StreamWeights::new(store, &format!("{name}.t_stream"), &cfg, frozen, rng)?,
        })
    }

    /// Deep copy of the base weights, no adapters.
    pub fn copy_base(&self, store: &mut ParamStore, name: &str, frozen: bool) -> Result<Self, AttentionError> {
        Ok(Self {
            name: name.to_string(),
            cfg: self.cfg,
            rope: self.rope,
            v_stream: self.v_stream.copy_base(store, &format!("{name}.v_stream"), frozen)?,
            t_stream: self.t_stream.copy_base(store, &format!("{name}.t_stream"), frozen)?,
        })
    }

    pub fn attach_adapters(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut Rng) -> Result<(), AttentionError> {
        self.v_stream.attach_adapters(store, cfg, rng)?;
        self.t_stream.attach_adapters(store, cfg, rng)?;
        Ok(())
    }

    pub fn attach_v_adapters(&mut self, store: &mut ParamStore, cfg: LoraConfig, rng: &mut Rng) -> Result<(), AttentionError> {
        self.v_stream.attach_adapters(store, cfg, rng)?;
        Ok(())
    }

    pub fn layers(&self) -> Vec<&ReparamLinear> {
        let mut out = self.v_stream.layers();
        out.extend(self.t_stream.layers());
        out
    }

    fn project(
        &self,
        sess: &mut Session,
        w: &StreamWeights,
        x: Var,
        rope: &[RopeIndex],
    ) -> Result<Projected, AttentionError> {
        let h = sess.graph.rms_norm_rows(x)?;
        let q = w.q.forward(sess, h)?;
        let k = w.k.forward(sess, h)?;
        let v = w.v.forward(sess, h)?;
        let rot = rotation(&self.rope, rope, self.cfg.heads)?;
        let q = sess.graph.rotate_pairs(q, rot.clone())?;
        let k = sess.graph.rotate_pairs(k, rot)?;
        Ok(Projected { q, k, v })
    }

    fn finish(&self, sess: &mut Session, w: &StreamWeights, x: Var, att: Var) -> Result<Var, NumericsError> {
        let o = w.out.forward(sess, att)?;
        let x1 = sess.graph.add(x, o)?;
        let h = sess.graph.rms_norm_rows(x1)?;
        let f = w.ffn.forward(sess, h)?;
        sess.graph.add(x1, f)
    }

    /// Joint attention over `[tokens_v; tokens_t]`, followed by per-stream
    /// output projection, residual, FFN and residual.
    pub fn forward(
        &self,
        sess: &mut Session,
        tokens_v: Var,
        tokens_t: Var,
        rope_v: &[RopeIndex],
        rope_t: &[RopeIndex],
    ) -> Result<MmOutput, AttentionError> {
        let (n_v, n_t) = (sess.value(tokens_v).rows(), sess.value(tokens_t).rows());
        for (name, var, n_rope) in [("v", tokens_v, rope_v.len()), ("t", tokens_t, rope_t.len())] {
            let x = sess.value(var);
            if x.cols() != self.cfg.dim || x.rows() != n_rope {
                return Err(AttentionError::Shape(format!(
                    "stream {name}: tokens {:?}, {n_rope} rope indices, dim {}",
                    x.dims(),
                    self.cfg.dim
                )));
            }
        }
        let pv = self.project(sess, &self.v_stream, tokens_v, rope_v)?;
        let pt = self.project(sess, &self.t_stream, tokens_t, rope_t)?;
        let q = sess.graph.concat_rows(&[pv.q, pt.q])?;
        let k = sess.graph.concat_rows(&[pv.k, pt.k])?;
        let v = sess.graph.concat_rows(&[pv.v, pt.v])?;
        let (att, probs) = multi_head_attention(sess, q, k, v, self.cfg.heads)?;
        let att_v = sess.graph.slice_rows(att, 0, n_v)?;
        let att_t = sess.graph.slice_rows(att, n_v, n_v + n_t)?;
        let v_out = self.finish(sess, &self.v_stream, tokens_v, att_v)?;
        let t_out = self.finish(sess, &self.t_stream, tokens_t, att_t)?;
        Ok(MmOutput { v: v_out, t: t_out, probs })
    }

    /// Tensor-level convenience wrapper around [`MmAttentionBlock::forward`].
    pub fn forward_tensors(
        &self,
        store: &ParamStore,
        tokens_v: &Tensor,
        tokens_t: &Tensor,
        rope_v: &[RopeIndex],
        rope_t: &[RopeIndex],
    ) -> Result<(Tensor, Tensor), AttentionError> {
        let mut sess = Session::inference(store);
        let v = sess.input(tokens_v.clone())?;
        let t = sess.input(tokens_t.clone())?;
        let out = self.forward(&mut sess, v, t, rope_v, rope_t)?;
        Ok((sess.value(out.v).clone(), sess.value(out.t).clone()))
    }
}

/// RoPE indices of the text stream (TEXT and `<image>` tokens, in order) and
/// of the VAE tokens, for a laid-out template.
pub fn interaction_indices(
    layout: &TokenStream,
    subjects: &[SubjectSpec],
) -> Result<(Vec<RopeIndex>, Vec<RopeIndex>), AttentionError> {
    let all = assign_stream(layout, subjects)?;
    let text = layout.text_stream_indices().into_iter().map(|i| all[i]).collect();
    let vae = layout.vae_indices().into_iter().map(|i| all[i]).collect();
    Ok((text, vae))
}

/// Text-image interaction: the VAE tokens `z_image` (stream V) and the text
/// stream `z_text` (stream T) attend jointly under the layout's 3D-RoPE.
/// Returns `(identity-enhanced text, interaction-enhanced image)`.
pub fn text_image_interaction(
    block: &MmAttentionBlock,
    sess: &mut Session,
    z_text: Var,
    z_image: Var,
    layout: &TokenStream,
    subjects: &[SubjectSpec],
) -> Result<(Var, Var), AttentionError> {
    let (rope_t, rope_v) = interaction_indices(layout, subjects)?;
    let (n_t, n_i) = (sess.value(z_text).rows(), sess.value(z_image).rows());
    if n_t != rope_t.len() || n_i != rope_v.len() {
        return Err(AttentionError::Layout(format!(
            "layout expects {} text-stream and {} image tokens, got {n_t} and {n_i}",
            rope_t.len(),
            rope_v.len()
        )));
    }
    let out = block.forward(sess, z_image, z_text, &rope_v, &rope_t)?;
    Ok((out.t, out.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope3d::video_indices;

    fn cfg() -> AttentionConfig {
        AttentionConfig { dim: 12, heads: 2, ffn_hidden: 16 }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let block = MmAttentionBlock::new(&mut store, "b", cfg(), true, &mut rng).unwrap();
        let mut sess = Session::inference(&store);
        let v = sess.input(rng.normal_tensor(&[5, 12], 1.0)).unwrap();
        let t = sess.input(rng.normal_tensor(&[3, 12], 1.0)).unwrap();
        let rv = video_indices(1, 1, 5);
        let rt = vec![RopeIndex::ORIGIN; 3];
        let out = block.forward(&mut sess, v, t, &rv, &rt).unwrap();
        for p in out.probs {
            let p = sess.value(p);
            assert_eq!(p.dims(), &[8, 8]);
            for i in 0..p.rows() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_adapters_are_transparent() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(10);
        let base = MmAttentionBlock::new(&mut store, "b", cfg(), true, &mut rng).unwrap();
        let mut adapted = base.copy_base(&mut store, "c", true).unwrap();
        adapted.attach_adapters(&mut store, LoraConfig { rank: 2, alpha: 4.0 }, &mut rng).unwrap();
        let v = rng.normal_tensor(&[4, 12], 1.0);
        let t = rng.normal_tensor(&[2, 12], 1.0);
        let rv = video_indices(1, 2, 2);
        let rt = vec![RopeIndex::new(1, 0, 0), RopeIndex::new(2, 0, 0)];
        let a = base.forward_tensors(&store, &v, &t, &rv, &rt).unwrap();
        let b = adapted.forward_tensors(&store, &v, &t, &rv, &rt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let block = MmAttentionBlock::new(&mut store, "b", cfg(), true, &mut rng).unwrap();
        let v = rng.normal_tensor(&[4, 12], 1.0);
        let t = rng.normal_tensor(&[2, 12], 1.0);
        let rt = vec![RopeIndex::ORIGIN; 2];
        assert!(block.forward_tensors(&store, &v, &t, &video_indices(1, 1, 3), &rt).is_err());
        let bad = rng.normal_tensor(&[4, 10], 1.0);
        assert!(block.forward_tensors(&store, &bad, &t, &video_indices(1, 1, 4), &rt).is_err());
        assert!(AttentionConfig { dim: 10, heads: 3, ffn_hidden: 4 }.validate().is_err());
    }
}
