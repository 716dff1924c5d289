use super::data::{patchify, SubjectImage};
use super::encoders::MockEncoders;
use super::{ToyConfig, ToyError};
use crate::identity_injection::{block_forward, InjectionBlock, InjectionMode};
use crate::lora::{ParamId, ParamStore, ReparamLinear, Session};
use crate::mm_attention::{interaction_indices, text_image_interaction, MmAttentionBlock};
use crate::numerics::{purpose, Rng, Tensor, Var};
use crate::rope3d::{video_indices, RopeIndex};
use crate::token_layout::{layout_template, tokenize, SubjectSpec, TemplateToken, TokenKind, TokenStream};

pub const TIME_FREQS: usize = 8;

/// Encoded conditioning for one prompt and its subject images.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    /// Embeddings of the bare prompt words.
    pub prompt_tokens: Tensor,
    pub layout: TokenStream,
    pub specs: Vec<SubjectSpec>,
    /// Template text stream: TEXT embeddings and `<image>` semantic tokens.
    pub text_stream: Tensor,
    /// VAE tokens of all subjects, `None` without subjects.
    pub image_tokens: Option<Tensor>,
    /// Layout indices of the VAE tokens.
    pub rope_img: Vec<RopeIndex>,
}

/// Which text the denoiser sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    /// Bare prompt embeddings, no images (base pretraining).
    Prompt,
    /// Interaction-enhanced template text; image tokens injected when `image`.
    Template { image: bool },
}

fn embed_words(enc: &MockEncoders, words: impl Iterator<Item = String>) -> Result<Tensor, ToyError> {
    let rows: Vec<Tensor> = words.map(|w| enc.text_embed(&w)).collect();
    if rows.is_empty() {
        return Err(ToyError::Config("prompt has no tokens".into()));
    }
    Ok(Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?)
}

pub fn prepare_inputs(
    cfg: &ToyConfig,
    enc: &MockEncoders,
    prompt: &str,
    subjects: &[SubjectImage],
) -> Result<SceneInputs, ToyError> {
    let words = tokenize(prompt)?.into_iter().map(|t| match t {
        TemplateToken::Word(w) => w,
        TemplateToken::Sep => crate::token_layout::SEP.to_string(),
        TemplateToken::Image(i) => format!("<image {i}>"),
    });
    let prompt_tokens = embed_words(enc, words)?;
    let side = cfg.subject_side();
    let specs: Vec<SubjectSpec> =
        subjects.iter().map(|s| SubjectSpec::new(s.entity.clone(), (side, side), (side, side))).collect();
    let layout = layout_template(prompt, &specs)?;
    let mut sem = Vec::with_capacity(subjects.len());
    let mut vae = Vec::with_capacity(subjects.len());
    for s in subjects {
        if s.pixels.dims() != [cfg.subject_size * cfg.subject_size, cfg.channels] {
            return Err(ToyError::Config(format!("subject image {:?} has shape {:?}", s.entity, s.pixels.dims())));
        }
        let patches = patchify(s.pixels.data(), 1, cfg.subject_size, cfg.subject_size, cfg.channels, cfg.patch);
        sem.push(enc.sem_encode(&patches)?);
        vae.push(enc.vae_encode(&patches)?);
    }
    let mut rows = Vec::new();
    let mut sem_cursor = vec![0usize; subjects.len()];
    for (i, e) in layout.entries().iter().enumerate() {
        match e.kind {
            TokenKind::Text => rows.push(enc.text_embed(layout.word(i).unwrap_or(""))),
            TokenKind::ImgSem => {
                let k = e.subject_id.expect("owned");
                rows.push(Tensor::new(vec![1, enc.dim()], sem[k].row(sem_cursor[k]).to_vec())?);
                sem_cursor[k] += 1;
            }
            TokenKind::ImgVae => {}
        }
    }
    let text_stream = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
    let (image_tokens, rope_img) = if subjects.is_empty() {
        (None, Vec::new())
    } else {
        let (_, rope_img) = interaction_indices(&layout, &specs)?;
        (Some(Tensor::concat_rows(&vae.iter().collect::<Vec<_>>())?), rope_img)
    };
    Ok(SceneInputs { prompt_tokens, layout, specs, text_stream, image_tokens, rope_img })
}

/// `[1, 2·TIME_FREQS]` sinusoidal features of `t`.
pub fn time_features(t: f64) -> Tensor {
    let mut v = Vec::with_capacity(2 * TIME_FREQS);
    for k in 0..TIME_FREQS {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        v.push((w * t).sin());
        v.push((w * t).cos());
    }
    Tensor::new(vec![1, 2 * TIME_FREQS], v).expect("sized")
}

/// Patch embedding, `N` (injection, MM-attention) block pairs and a patch
/// head, plus the text-image interaction block once conditioning is attached.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    pub patch_in: ReparamLinear,
    pub patch_out: ReparamLinear,
    pub time_embed: ReparamLinear,
    pub pos_embed: ParamId,
    pub blocks: Vec<MmAttentionBlock>,
    /// One per block once conditioning is attached, empty before.
    pub injections: Vec<InjectionBlock>,
    pub interaction: Option<MmAttentionBlock>,
    rope_vid: Vec<RopeIndex>,
    tokens_per_frame: usize,
}

impl ToyDenoiser {
    /// Base model, every parameter trainable.
    pub fn new_base(store: &mut ParamStore, cfg: &ToyConfig) -> Result<Self, ToyError> {
        cfg.validate()?;
        let mut rng = Rng::derive(cfg.seed, purpose::MODEL_INIT);
        let d = cfg.dim;
        let patch_in = ReparamLinear::new(store, "patch_in", cfg.patch_dim(), d, true, false, &mut rng)?;
        let patch_out = ReparamLinear::new(store, "patch_out", d, cfg.patch_dim(), true, false, &mut rng)?;
        let time_embed = ReparamLinear::new(store, "time_embed", 2 * TIME_FREQS, d, true, false, &mut rng)?;
        let pos_embed = store.add("pos_embed", rng.normal_tensor(&[cfg.video_tokens(), d], 0.1), true)?;
        let blocks = (0..cfg.blocks)
            .map(|i| MmAttentionBlock::new(store, &format!("block{i}"), cfg.attention(), false, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let side = cfg.token_side();
        Ok(Self {
            patch_in,
            patch_out,
            time_embed,
            pos_embed,
            blocks,
            injections: Vec::new(),
            interaction: None,
            rope_vid: video_indices(cfg.frames, side, side),
            tokens_per_frame: cfg.tokens_per_frame(),
        })
    }

    pub fn is_conditioned(&self) -> bool {
        self.interaction.is_some()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    /// Every base-model layer.
    pub fn base_layers(&self) -> Vec<&ReparamLinear> {
        let mut out = vec![&self.patch_in, &self.patch_out, &self.time_embed];
        for b in &self.blocks {
            out.extend(b.layers());
        }
        out
    }

    /// Freezes the base, then adds the interaction block (a frozen copy of
    /// block 0 with LoRA on both streams) and one injection block per
    /// denoiser block. When `cfg.injection` is off the injection blocks are
    /// created but frozen.
    pub fn attach_conditioning(&mut self, store: &mut ParamStore, cfg: &ToyConfig) -> Result<(), ToyError> {
        if self.is_conditioned() {
            return Err(ToyError::Stage("conditioning already attached".into()));
        }
        let base: Vec<ParamId> = store.ids().collect();
        for id in base {
            store.set_trainable(id, false);
        }
        let mut rng = Rng::derive(cfg.seed, purpose::LORA_INIT);
        let lora = cfg.lora();
        let mut interaction = self.blocks[0].copy_base(store, "interaction", true)?;
        interaction.attach_adapters(store, lora, &mut rng)?;
        let before = store.len();
        let mut injections = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("inject{i}");
            let inj = match cfg.mode {
                InjectionMode::AttentionInherited => InjectionBlock::inherited(store, &name, block, lora, &mut rng)?,
                InjectionMode::Adapter => InjectionBlock::adapter(store, &name, cfg.attention(), &mut rng)?,
                InjectionMode::TokenConcat => {
                    if cfg.injection {
                        block.attach_v_adapters(store, lora, &mut rng)?;
                    }
                    InjectionBlock::token_concat(&name, cfg.attention())?
                }
            };
            injections.push(inj);
        }
        if !cfg.injection {
            let added: Vec<ParamId> = store.ids().skip(before).collect();
            for id in added {
                store.set_trainable(id, false);
            }
        }
        self.interaction = Some(interaction);
        self.injections = injections;
        Ok(())
    }

    /// Predicted velocity `[video_tokens, patch_dim]` for noisy tokens `x_t`.
    pub fn forward(
        &self,
        sess: &mut Session,
        x_t: &Tensor,
        t: f64,
        inputs: &SceneInputs,
        cond: Cond,
        inject: bool,
    ) -> Result<Var, ToyError> {
        let x = sess.input(x_t.clone())?;
        let mut h = self.patch_in.forward(sess, x)?;
        let pos = sess.param(self.pos_embed)?;
        h = sess.graph.add(h, pos)?;
        let tf = sess.input(time_features(t))?;
        let te = self.time_embed.forward(sess, tf)?;
        h = sess.graph.add_row(h, te)?;

        let (mut text, image) = match cond {
            Cond::Prompt => (sess.input(inputs.prompt_tokens.clone())?, None),
            Cond::Template { image } => {
                let interaction = self
                    .interaction
                    .as_ref()
                    .ok_or_else(|| ToyError::Stage("template conditioning needs the interaction block".into()))?;
                let raw = sess.input(inputs.text_stream.clone())?;
                match &inputs.image_tokens {
                    Some(img) => {
                        let img = sess.input(img.clone())?;
                        let (zt, zi) = text_image_interaction(interaction, sess, raw, img, &inputs.layout, &inputs.specs)?;
                        (zt, (image && inject).then_some(zi))
                    }
                    None => (raw, None),
                }
            }
        };
        let rope_text = vec![RopeIndex::ORIGIN; sess.value(text).rows()];
        for (i, mm) in self.blocks.iter().enumerate() {
            let out = match self.injections.get(i) {
                Some(inj) => {
                    let o = block_forward(inj, mm, sess, h, text, image, &self.rope_vid, &rope_text, &inputs.rope_img)?;
                    (o.video, o.text)
                }
                None => {
                    let o = mm.forward(sess, h, text, &self.rope_vid, &rope_text)?;
                    (o.v, o.t)
                }
            };
            h = out.0;
            text = out.1;
        }
        let h = sess.graph.rms_norm_rows(h)?;
        Ok(self.patch_out.forward(sess, h)?)
    }
}
