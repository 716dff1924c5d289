use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::identity_injection::InjectionMode;
use crate::lora::LoraConfig;
use crate::mm_attention::AttentionConfig;

/// Every knob of the toy demo. Unknown keys are rejected when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    pub frames: usize,
    /// Latent frame side length in pixels.
    pub grid: usize,
    /// Pixel side of one token patch.
    pub patch: usize,
    pub channels: usize,
    /// Pixel side of a subject image.
    pub subject_size: usize,
    pub max_subjects: usize,
    pub dataset_size: usize,
    pub eval_size: usize,
    pub base_steps: usize,
    pub train_steps: usize,
    pub sample_steps: usize,
    pub base_lr: f64,
    pub lr: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub mode: InjectionMode,
    /// When false the injection blocks stay at their zero init and are not trained.
    pub injection: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 32,
            heads: 4,
            ffn_hidden: 64,
            blocks: 2,
            frames: 4,
            grid: 8,
            patch: 2,
            channels: 4,
            subject_size: 4,
            max_subjects: 2,
            dataset_size: 64,
            eval_size: 8,
            base_steps: 300,
            train_steps: 500,
            sample_steps: 16,
            base_lr: 3e-3,
            lr: 3e-3,
            lora_rank: 4,
            lora_alpha: 8.0,
            mode: InjectionMode::AttentionInherited,
            injection: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |key: &str, why: &str| Err(ToyError::Config(format!("{key}: {why}")));
        for (key, v) in [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("blocks", self.blocks),
            ("frames", self.frames),
            ("grid", self.grid),
            ("patch", self.patch),
            ("channels", self.channels),
            ("subject_size", self.subject_size),
            ("max_subjects", self.max_subjects),
            ("dataset_size", self.dataset_size),
            ("eval_size", self.eval_size),
            ("sample_steps", self.sample_steps),
            ("lora_rank", self.lora_rank),
        ] {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.channels < 2 {
            return bad("channels", "need a presence channel and at least one color channel");
        }
        if !self.grid.is_multiple_of(self.patch) {
            return bad("grid", "must be a multiple of patch");
        }
        if !self.subject_size.is_multiple_of(self.patch) {
            return bad("subject_size", "must be a multiple of patch");
        }
        if self.subject_size > self.grid {
            return bad("subject_size", "larger than grid");
        }
        if self.frames - 1 > self.grid - self.subject_size {
            return bad("frames", "subject would leave the frame");
        }
        if self.max_subjects > 3 || self.max_subjects > self.grid / self.subject_size {
            return bad("max_subjects", "at most 3 and at most one per lane");
        }
        if self.patch_dim() > self.dim {
            return bad("dim", "must be at least patch*patch*channels");
        }
        AttentionConfig { dim: self.dim, heads: self.heads, ffn_hidden: self.ffn_hidden }
            .validate()
            .map_err(|e| ToyError::Config(format!("dim/heads: {e}")))?;
        if self.dim / self.heads < 6 || !(self.dim / self.heads).is_multiple_of(2) {
            return bad("heads", "head dim must be even and at least 6");
        }
        for (key, v) in [("base_lr", self.base_lr), ("lr", self.lr), ("lora_alpha", self.lora_alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, "must be a positive finite number");
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { dim: self.dim, heads: self.heads, ffn_hidden: self.ffn_hidden }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig { rank: self.lora_rank, alpha: self.lora_alpha }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Token grid side of one frame.
    pub fn token_side(&self) -> usize {
        self.grid / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.token_side() * self.token_side()
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    /// Token grid side of a subject image.
    pub fn subject_side(&self) -> usize {
        self.subject_size / self.patch
    }
}
