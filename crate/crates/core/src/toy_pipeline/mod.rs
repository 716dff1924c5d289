//! Desk-scale end-to-end demo: mock encoders, synthetic scenes and a
//! flow-matching toy denoiser with identity injection.
//!
//! Training runs in two phases. The base denoiser is first fit on bare
//! prompts (every base weight trainable); then it is frozen, the
//! interaction and injection modules are attached, and only their
//! adapters, gates and fresh layers are optimized with the velocity loss
//! `‖v_θ(x_t, t, cond) − (x₁ − x₀)‖²`, where `x_t = (1−t)·x₀ + t·x₁`,
//! `x₀` is noise and `x₁` the latent video.

mod config;
pub mod data;
mod encoders;
mod model;
mod optim;

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub use config::ToyConfig;
pub use data::{make_dataset, make_eval_set, Direction, SubjectImage, SyntheticScene};
pub use encoders::MockEncoders;
pub use model::{prepare_inputs, time_features, Cond, SceneInputs, ToyDenoiser};
pub use optim::Adam;

use crate::identity_injection::{coefficient_of_variation, frame_profile};
use crate::lora::{ParamError, ParamId, ParamStore, Session};
use crate::metrics::{identity_similarity, FeatureSet, MetricsError};
use crate::mm_attention::AttentionError;
use crate::numerics::{purpose, NumericsError, Rng, Tensor};
use crate::rope3d::RopeError;
use crate::token_layout::LayoutError;
use data::{item_rng, patchify, placement, region_features, subject_features, unpatchify};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("config: {0}")]
    Config(String),
    #[error("{phase} training diverged at step {step}")]
    Diverged { phase: &'static str, step: usize },
    #[error("pipeline stage: {0}")]
    Stage(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Loss curves of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub base_losses: Vec<f64>,
    pub losses: Vec<f64>,
    /// Held-out loss right after conditioning is attached.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean cosine between generated subject regions and reference images.
    pub identity_cosine: f64,
    pub eval_loss: f64,
    /// Per-frame mean conditioning magnitude.
    pub profile: Vec<f64>,
    pub profile_cv: f64,
}

#[derive(Clone, Debug)]
pub struct ToyPipeline {
    pub cfg: ToyConfig,
    pub store: ParamStore,
    pub encoders: MockEncoders,
    pub denoiser: ToyDenoiser,
}

const PROFILE_T: f64 = 0.5;
const EVAL_TIMES: [f64; 3] = [0.2, 0.5, 0.8];

/// Fields that determine the base model and its pretraining.
fn base_key(cfg: &ToyConfig) -> ToyConfig {
    let d = ToyConfig::default();
    ToyConfig {
        eval_size: d.eval_size,
        train_steps: d.train_steps,
        sample_steps: d.sample_steps,
        lr: d.lr,
        lora_rank: d.lora_rank,
        lora_alpha: d.lora_alpha,
        mode: d.mode,
        injection: d.injection,
        ..cfg.clone()
    }
}

impl ToyPipeline {
    /// Untrained base model.
    pub fn new_base(cfg: &ToyConfig) -> Result<Self, ToyError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let denoiser = ToyDenoiser::new_base(&mut store, cfg)?;
        let encoders = MockEncoders::new(cfg.seed, cfg.patch_dim(), cfg.dim)?;
        Ok(Self { cfg: cfg.clone(), store, encoders, denoiser })
    }

    /// Copy of a base pipeline with conditioning attached under `cfg`.
    pub fn conditioned_from(base: &ToyPipeline, cfg: &ToyConfig) -> Result<Self, ToyError> {
        cfg.validate()?;
        if base.denoiser.is_conditioned() {
            return Err(ToyError::Stage("expected a base pipeline".into()));
        }
        if base_key(&base.cfg) != base_key(cfg) {
            return Err(ToyError::Config("base model settings differ from the pretrained base".into()));
        }
        let mut p = base.clone();
        p.cfg = cfg.clone();
        p.denoiser.attach_conditioning(&mut p.store, cfg)?;
        Ok(p)
    }

    pub fn is_conditioned(&self) -> bool {
        self.denoiser.is_conditioned()
    }

    /// Conditioning used for training and sampling at this stage.
    pub fn default_cond(&self) -> Cond {
        if self.is_conditioned() {
            Cond::Template { image: true }
        } else {
            Cond::Prompt
        }
    }

    pub fn inputs(&self, prompt: &str, subjects: &[SubjectImage]) -> Result<SceneInputs, ToyError> {
        prepare_inputs(&self.cfg, &self.encoders, prompt, subjects)
    }

    pub fn scene_inputs(&self, scene: &SyntheticScene) -> Result<SceneInputs, ToyError> {
        self.inputs(&scene.prompt, &scene.subjects)
    }

    /// Latent video `[frames, grid, grid, C]` as tokens `[video_tokens, patch_dim]`.
    pub fn video_tokens(&self, video: &Tensor) -> Tensor {
        let c = &self.cfg;
        patchify(video.data(), c.frames, c.grid, c.grid, c.channels, c.patch)
    }

    pub fn velocity(&self, x_t: &Tensor, t: f64, inputs: &SceneInputs, cond: Cond) -> Result<Tensor, ToyError> {
        let mut sess = Session::inference(&self.store);
        let v = self.denoiser.forward(&mut sess, x_t, t, inputs, cond, self.cfg.injection)?;
        Ok(sess.value(v).clone())
    }

    /// Flow-matching loss at one `(x₀, x₁, t)` and gradients of every
    /// trainable parameter.
    pub fn loss_and_grads(
        &self,
        x0: &Tensor,
        x1: &Tensor,
        t: f64,
        inputs: &SceneInputs,
        cond: Cond,
    ) -> Result<(f64, Vec<(ParamId, Tensor)>), ToyError> {
        let x_t = x0.scale(1.0 - t)?.add(&x1.scale(t)?)?;
        let target = x1.sub(x0)?;
        let mut sess = Session::training(&self.store);
        let v = self.denoiser.forward(&mut sess, &x_t, t, inputs, cond, self.cfg.injection)?;
        let target = sess.input(target)?;
        let loss = sess.graph.mse(v, target)?;
        let value = sess.value(loss).data()[0];
        Ok((value, sess.param_grads(loss)?))
    }

    fn noise(&self, rng: &mut Rng) -> Tensor {
        rng.normal_tensor(&[self.cfg.video_tokens(), self.cfg.patch_dim()], 1.0)
    }

    fn run_phase(&mut self, phase: &'static str, steps: usize, lr: f64) -> Result<Vec<f64>, ToyError> {
        let scenes = make_dataset(&self.cfg, self.cfg.seed, self.cfg.dataset_size)?;
        let prepared = scenes
            .iter()
            .map(|s| Ok((self.scene_inputs(s)?, self.video_tokens(&s.video))))
            .collect::<Result<Vec<_>, ToyError>>()?;
        let cond = self.default_cond();
        let salt = if self.is_conditioned() { 2 } else { 1 };
        let mut rng = Rng::derive(self.cfg.seed ^ salt, purpose::TRAIN_NOISE);
        let mut opt = Adam::new(lr);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let (inputs, x1) = &prepared[rng.below(prepared.len() as u64) as usize];
            let t = rng.uniform();
            let x0 = self.noise(&mut rng);
            let (loss, grads) = match self.loss_and_grads(&x0, x1, t, inputs, cond) {
                Err(ToyError::Numerics(NumericsError::NonFinite { .. })) => return Err(ToyError::Diverged { phase, step }),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(ToyError::Diverged { phase, step });
            }
            opt.update(&mut self.store, &grads);
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Mean loss over fixed held-out probes.
    pub fn eval_loss(&self) -> Result<f64, ToyError> {
        let scenes = make_eval_set(&self.cfg, self.cfg.seed, self.cfg.eval_size)?;
        let cond = self.default_cond();
        let mut total = 0.0;
        for (i, s) in scenes.iter().enumerate() {
            let inputs = self.scene_inputs(s)?;
            let x1 = self.video_tokens(&s.video);
            let mut rng = item_rng(self.cfg.seed, purpose::EVAL ^ 1, i);
            for &t in &EVAL_TIMES {
                let x0 = self.noise(&mut rng);
                total += self.loss_and_grads_value(&x0, &x1, t, &inputs, cond)?;
            }
        }
        Ok(total / (scenes.len() * EVAL_TIMES.len()) as f64)
    }

    fn loss_and_grads_value(&self, x0: &Tensor, x1: &Tensor, t: f64, inputs: &SceneInputs, cond: Cond) -> Result<f64, ToyError> {
        let x_t = x0.scale(1.0 - t)?.add(&x1.scale(t)?)?;
        let v = self.velocity(&x_t, t, inputs, cond)?;
        let d = v.sub(&x1.sub(x0)?)?;
        Ok(d.data().iter().map(|e| e * e).sum::<f64>() / d.numel() as f64)
    }

    /// Euler integration of the learned velocity from seeded noise;
    /// returns `[frames, grid, grid, C]`.
    pub fn generate(&self, inputs: &SceneInputs, steps: usize, seed: u64) -> Result<Tensor, ToyError> {
        if steps == 0 {
            return Err(ToyError::Config("sampler steps must be at least 1".into()));
        }
        let cond = self.default_cond();
        let mut x = self.noise(&mut Rng::derive(seed, purpose::SAMPLE_NOISE));
        let dt = 1.0 / steps as f64;
        for k in 0..steps {
            let v = self.velocity(&x, k as f64 * dt, inputs, cond)?;
            x = x.add(&v.scale(dt)?)?;
        }
        let c = &self.cfg;
        Ok(unpatchify(&x, c.frames, c.grid, c.grid, c.channels, c.patch))
    }

    /// Mean identity cosine of generated subject regions over `scenes`.
    pub fn identity_score(&self, scenes: &[SyntheticScene]) -> Result<f64, ToyError> {
        let mut scores = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            let video = self.generate(&self.scene_inputs(scene)?, self.cfg.sample_steps, self.cfg.seed.wrapping_add(i as u64))?;
            for (lane, subject) in scene.subjects.iter().enumerate() {
                let frames = (0..self.cfg.frames)
                    .map(|f| {
                        let (y, x) = placement(&self.cfg, scene.direction, lane, f);
                        region_features(&self.cfg, &video, f, y, x)
                    })
                    .collect();
                let set = FeatureSet::new(subject.entity.clone(), frames)?;
                scores.push(identity_similarity(&subject_features(subject), &set)?);
            }
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Per-frame mean token norm of the velocity change caused by the
    /// subject images, averaged over `scenes`. Zero for a freshly
    /// conditioned pipeline in the transparent modes.
    pub fn identity_profile(&self, scenes: &[SyntheticScene]) -> Result<Vec<f64>, ToyError> {
        if !self.is_conditioned() {
            return Err(ToyError::Stage("profile needs a conditioned pipeline".into()));
        }
        let mut acc = vec![0.0; self.cfg.frames];
        for (i, s) in scenes.iter().enumerate() {
            let inputs = self.scene_inputs(s)?;
            let x1 = self.video_tokens(&s.video);
            let x0 = self.noise(&mut item_rng(self.cfg.seed, purpose::EVAL ^ 2, i));
            let x_t = x0.scale(1.0 - PROFILE_T)?.add(&x1.scale(PROFILE_T)?)?;
            let with = self.velocity(&x_t, PROFILE_T, &inputs, Cond::Template { image: true })?;
            let without = self.velocity(&x_t, PROFILE_T, &inputs, Cond::Template { image: false })?;
            let p = frame_profile(&with.sub(&without)?, self.denoiser.tokens_per_frame())?;
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        Ok(acc.into_iter().map(|a| a / scenes.len() as f64).collect())
    }

    pub fn evaluate(&self) -> Result<EvalReport, ToyError> {
        let scenes = make_eval_set(&self.cfg, self.cfg.seed, self.cfg.eval_size)?;
        let profile = if self.is_conditioned() { self.identity_profile(&scenes)? } else { vec![0.0; self.cfg.frames] };
        Ok(EvalReport {
            identity_cosine: self.identity_score(&scenes)?,
            eval_loss: self.eval_loss()?,
            profile_cv: coefficient_of_variation(&profile),
            profile,
        })
    }

    /// Digest of every frozen parameter.
    pub fn frozen_digest(&self) -> u64 {
        self.store.digest(|id| !self.store.is_trainable(id))
    }

    pub fn save(&self, dir: &Path) -> Result<(), ToyError> {
        let mut extra = serde_json::Map::new();
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| ToyError::Config(e.to_string()))?;
        extra.insert("config".into(), cfg);
        let stage = if self.is_conditioned() { "conditioned" } else { "base" };
        extra.insert("stage".into(), stage.into());
        self.store.save(dir, extra)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ToyError> {
        let (loaded, manifest) = ParamStore::load(dir)?;
        let cfg: ToyConfig = serde_json::from_value(manifest.get("config").cloned().unwrap_or_default())
            .map_err(|e| ToyError::Config(format!("checkpoint config: {e}")))?;
        let mut p = Self::new_base(&cfg)?;
        match manifest.get("stage").and_then(|s| s.as_str()) {
            Some("base") => {}
            Some("conditioned") => p.denoiser.attach_conditioning(&mut p.store, &cfg)?,
            other => return Err(ToyError::Stage(format!("unknown checkpoint stage {other:?}"))),
        }
        if loaded.len() != p.store.len() {
            return Err(ToyError::Stage(format!(
                "checkpoint has {} parameters, model has {}",
                loaded.len(),
                p.store.len()
            )));
        }
        p.store.load_values_from(&loaded)?;
        Ok(p)
    }
}

/// Base pretraining on bare prompts.
pub fn pretrain_base(cfg: &ToyConfig) -> Result<(ToyPipeline, Vec<f64>), ToyError> {
    let mut p = ToyPipeline::new_base(cfg)?;
    let losses = p.run_phase("base", cfg.base_steps, cfg.base_lr)?;
    Ok((p, losses))
}

/// Attaches conditioning to a copy of `base` and trains it under `cfg`.
pub fn fine_tune(base: &ToyPipeline, cfg: &ToyConfig) -> Result<(ToyPipeline, TrainReport), ToyError> {
    let mut p = ToyPipeline::conditioned_from(base, cfg)?;
    let initial_eval_loss = p.eval_loss()?;
    let losses = p.run_phase("fine-tune", cfg.train_steps, cfg.lr)?;
    let final_eval_loss = p.eval_loss()?;
    Ok((p, TrainReport { base_losses: Vec::new(), losses, initial_eval_loss, final_eval_loss }))
}

/// Base pretraining followed by conditioned fine-tuning.
pub fn train(cfg: &ToyConfig) -> Result<(ToyPipeline, TrainReport), ToyError> {
    let (base, base_losses) = pretrain_base(cfg)?;
    let (p, report) = fine_tune(&base, cfg)?;
    Ok((p, TrainReport { base_losses, ..report }))
}
