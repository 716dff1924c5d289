//! Injection of interaction-enhanced image tokens into the video stream.
//!
//! [`InjectionMode::AttentionInherited`] runs a cross-attention whose
//! query/key/value projections and FFN are copies of the paired MM-attention
//! block's video-stream weights (plus LoRA), gated by an all-zero linear
//! layer:
//!
//! ```text
//! z' = CrossAttn(Q(z), K(ẑ_I), V(ẑ_I))
//! ẑ  = z + FC(FFN(z'))          FC zero at init
//! ```
//!
//! Queries and keys are rotated with the spatial part `(0, y, x)` of their
//! 3D-RoPE indices only, so every frame sees the condition tokens at the
//! same temporal distance.
//!
//! The two baselines are [`InjectionMode::TokenConcat`] (condition tokens
//! prepended to the video stream of the MM-attention, one frame before
//! frame 0) and [`InjectionMode::Adapter`] (fresh, randomly initialized
//! encoder and cross-attention).

use serde::{Deserialize, Serialize};

use crate::lora::{LoraConfig, ParamStore, ReparamLinear, Session};
use crate::mm_attention::{multi_head_attention, AttentionConfig, AttentionError, FeedForward, MmAttentionBlock};
use crate::numerics::{NumericsError, Rng, Tensor, Var};
use crate::rope3d::{RopeConfig, RopeIndex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    AttentionInherited,
    TokenConcat,
    Adapter,
}

impl InjectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionMode::AttentionInherited => "attention_inherited",
            InjectionMode::TokenConcat => "token_concat",
            InjectionMode::Adapter => "adapter",
        }
    }
}

impl std::str::FromStr for InjectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention_inherited" => Ok(Self::AttentionInherited),
            "token_concat" => Ok(Self::TokenConcat),
            "adapter" => Ok(Self::Adapter),
            other => Err(format!(
                "unknown injection mode {other:?} (expected attention_inherited, token_concat or adapter)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CrossAttention {
    encoder: Option<ReparamLinear>,
    query: ReparamLinear,
    key: ReparamLinear,
    value: ReparamLinear,
    ffn: FeedForward,
    zero_fc: ReparamLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionBlock {
    pub name: String,
    pub mode: InjectionMode,
    pub cfg: AttentionConfig,
    rope: RopeConfig,
    cross: Option<CrossAttention>,
}

/// Result of [`InjectionBlock::inject`].
pub struct Injected {
    /// Identity-enhanced video tokens.
    pub out: Var,
    /// `out − z`, absent when the block does not inject (token concat).
    pub delta: Option<Var>,
    /// Per-head cross-attention probabilities (`n_vid × n_img`).
    pub probs: Vec<Var>,
}

fn spatial_only(idx: &[RopeIndex]) -> Vec<RopeIndex> {
    idx.iter().map(|i| RopeIndex::new(0, i.y, i.x)).collect()
}

fn before_first_frame(idx: &[RopeIndex]) -> Vec<RopeIndex> {
    idx.iter().map(|i| RopeIndex::new(-1, i.y, i.x)).collect()
}

impl InjectionBlock {
    /// Cross-attention inheriting `base`'s video-stream Q/K/V and FFN
    /// (frozen copies with trainable LoRA) plus a zero-initialized gate.
    pub fn inherited(
        store: &mut ParamStore,
        name: &str,
        base: &MmAttentionBlock,
        lora: LoraConfig,
        rng: &mut Rng,
    ) -> Result<Self, AttentionError> {
        let src = &base.v_stream;
        let mut query = src.q.copy_base(store, &format!("{name}.q"), true)?;
        let mut key = src.k.copy_base(store, &format!("{name}.k"), true)?;
        let mut value = src.v.copy_base(store, &format!("{name}.v"), true)?;
        let mut ffn = src.ffn.copy_base(store, &format!("{name}.ffn"), true)?;
        query.attach_adapter(store, lora, rng)?;
        key.attach_adapter(store, lora, rng)?;
        value.attach_adapter(store, lora, rng)?;
        ffn.attach_adapters(store, lora, rng)?;
        let d = base.cfg.dim;
        let zero_fc = ReparamLinear::zeros(store, &format!("{name}.zero_fc"), d, d)?;
        Ok(Self {
            name: name.to_string(),
            mode: InjectionMode::AttentionInherited,
            cfg: base.cfg,
            rope: base.rope,
            cross: Some(CrossAttention { encoder: None, query, key, value, ffn, zero_fc }),
        })
    }

    /// Cross-attention with an independent, randomly initialized image
    /// encoder and projections, all trainable.
    pub fn adapter(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut Rng) -> Result<Self, AttentionError> {
        cfg.validate()?;
        let d = cfg.dim;
        let cross = CrossAttention {
            encoder: Some(ReparamLinear::new(store, &format!("{name}.encoder"), d, d, true, false, rng)?),
            query: ReparamLinear::new(store, &format!("{name}.q"), d, d, true, false, rng)?,
            key: ReparamLinear::new(store, &format!("{name}.k"), d, d, true, false, rng)?,
            value: ReparamLinear::new(store, &format!("{name}.v"), d, d, true, false, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, false, rng)?,
            zero_fc: ReparamLinear::zeros(store, &format!("{name}.zero_fc"), d, d)?,
        };
        Ok(Self {
            name: name.to_string(),
            mode: InjectionMode::Adapter,
            cfg,
            rope: RopeConfig::new(cfg.head_dim())?,
            cross: Some(cross),
        })
    }

    /// Parameter-free placeholder; conditioning happens inside the paired
    /// MM-attention block.
    pub fn token_concat(name: &str, cfg: AttentionConfig) -> Result<Self, AttentionError> {
        cfg.validate()?;
        Ok(Self {
            name: name.to_string(),
            mode: InjectionMode::TokenConcat,
            cfg,
            rope: RopeConfig::new(cfg.head_dim())?,
            cross: None,
        })
    }

    pub fn layers(&self) -> Vec<&ReparamLinear> {
        let Some(c) = &self.cross else { return vec![] };
        let mut out: Vec<&ReparamLinear> = c.encoder.iter().collect();
        out.extend([&c.query, &c.key, &c.value]);
        out.extend(c.ffn.layers());
        out.push(&c.zero_fc);
        out
    }

    pub fn zero_fc(&self) -> Option<&ReparamLinear> {
        self.cross.as_ref().map(|c| &c.zero_fc)
    }

    /// `z + FC(FFN(CrossAttn(z, ẑ_I)))`.
    pub fn inject(
        &self,
        sess: &mut Session,
        z: Var,
        z_img: Var,
        rope_vid: &[RopeIndex],
        rope_img: &[RopeIndex],
    ) -> Result<Injected, AttentionError> {
        let (zv, iv) = (sess.value(z), sess.value(z_img));
        if zv.cols() != self.cfg.dim || iv.cols() != self.cfg.dim || zv.rows() != rope_vid.len() || iv.rows() != rope_img.len() {
            return Err(AttentionError::Shape(format!(
                "inject: video {:?} with {} indices, image {:?} with {} indices, dim {}",
                zv.dims(),
                rope_vid.len(),
                iv.dims(),
                rope_img.len(),
                self.cfg.dim
            )));
        }
        let Some(c) = &self.cross else {
            return Ok(Injected { out: z, delta: None, probs: vec![] });
        };
        let img = match &c.encoder {
            Some(enc) => enc.forward(sess, z_img)?,
            None => z_img,
        };
        let hq = sess.graph.rms_norm_rows(z)?;
        let hk = sess.graph.rms_norm_rows(img)?;
        let q = c.query.forward(sess, hq)?;
        let k = c.key.forward(sess, hk)?;
        let v = c.value.forward(sess, hk)?;
        let rot_q = self.rope.rotation(&spatial_only(rope_vid), self.cfg.heads)?;
        let rot_k = self.rope.rotation(&spatial_only(rope_img), self.cfg.heads)?;
        let q = sess.graph.rotate_pairs(q, rot_q)?;
        let k = sess.graph.rotate_pairs(k, rot_k)?;
        let (att, probs) = multi_head_attention(sess, q, k, v, self.cfg.heads)?;
        let f = c.ffn.forward(sess, att)?;
        let delta = c.zero_fc.forward(sess, f)?;
        let out = sess.graph.add(z, delta)?;
        Ok(Injected { out, delta: Some(delta), probs })
    }
}

/// Output of one denoiser block.
pub struct BlockOutput {
    pub video: Var,
    pub text: Var,
    /// Injection delta for the video tokens, when the mode injects.
    pub delta: Option<Var>,
}

/// Injection followed by the MM-attention between the (identity-enhanced)
/// video tokens and the text stream. In token-concat mode the condition
/// tokens are prepended to the video stream instead and dropped afterwards.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    injection: &InjectionBlock,
    mm: &MmAttentionBlock,
    sess: &mut Session,
    z: Var,
    z_text: Var,
    z_img: Option<Var>,
    rope_vid: &[RopeIndex],
    rope_text: &[RopeIndex],
    rope_img: &[RopeIndex],
) -> Result<BlockOutput, AttentionError> {
    let Some(z_img) = z_img else {
        let out = mm.forward(sess, z, z_text, rope_vid, rope_text)?;
        return Ok(BlockOutput { video: out.v, text: out.t, delta: None });
    };
    match injection.mode {
        InjectionMode::AttentionInherited | InjectionMode::Adapter => {
            let inj = injection.inject(sess, z, z_img, rope_vid, rope_img)?;
            let out = mm.forward(sess, inj.out, z_text, rope_vid, rope_text)?;
            Ok(BlockOutput { video: out.v, text: out.t, delta: inj.delta })
        }
        InjectionMode::TokenConcat => {
            let n_img = sess.value(z_img).rows();
            let n_vid = sess.value(z).rows();
            let joint = sess.graph.concat_rows(&[z_img, z])?;
            let mut rope = before_first_frame(rope_img);
            rope.extend_from_slice(rope_vid);
            let out = mm.forward(sess, joint, z_text, &rope, rope_text)?;
            let video = sess.graph.slice_rows(out.v, n_img, n_img + n_vid)?;
            Ok(BlockOutput { video, text: out.t, delta: None })
        }
    }
}

/// Mean token L2 norm of `delta` per frame; rows are frame-major with
/// `tokens_per_frame` tokens each.
pub fn frame_profile(delta: &Tensor, tokens_per_frame: usize) -> Result<Vec<f64>, NumericsError> {
    if tokens_per_frame == 0 || !delta.rows().is_multiple_of(tokens_per_frame) {
        return Err(NumericsError::Invalid(format!(
            "{} rows do not split into frames of {tokens_per_frame}",
            delta.rows()
        )));
    }
    Ok((0..delta.rows() / tokens_per_frame)
        .map(|f| {
            (0..tokens_per_frame)
                .map(|j| delta.row(f * tokens_per_frame + j).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / tokens_per_frame as f64
        })
        .collect())
}

/// Population standard deviation over mean; zero for an all-zero profile.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}
