//! Synthetic scenes: colored, textured subject patches sliding across an
//! empty latent canvas in a direction named by the prompt.
//!
//! Channel 0 of every pixel marks subject presence; the remaining channels
//! carry the subject's color and texture, which is what identity metrics
//! look at. Subject `k` of a scene moves in lane `k`, one pixel per frame.

use serde::{Deserialize, Serialize};

use super::{ToyConfig, ToyError};
use crate::numerics::{purpose, Rng, Tensor};

pub const ENTITIES: [&str; 8] = ["cat", "dog", "fox", "owl", "bear", "duck", "frog", "goat"];

const COLOR_STD: f64 = 0.8;
const TEXTURE_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectImage {
    pub entity: String,
    /// `[subject_size², channels]`, row-major pixels.
    pub pixels: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub prompt: String,
    pub direction: Direction,
    pub subjects: Vec<SubjectImage>,
    /// Ground truth `[frames, grid, grid, channels]`.
    pub video: Tensor,
}

/// Top-left pixel of subject `lane` in `frame`.
pub fn placement(cfg: &ToyConfig, direction: Direction, lane: usize, frame: usize) -> (usize, usize) {
    let far = cfg.grid - cfg.subject_size;
    let across = lane * cfg.subject_size;
    match direction {
        Direction::Right => (across, frame),
        Direction::Left => (across, far - frame),
        Direction::Down => (frame, across),
        Direction::Up => (far - frame, across),
    }
}

pub fn prompt_for(entities: &[&str], direction: Direction) -> String {
    match entities {
        [one] => format!("a {one} moves {}", direction.word()),
        many => {
            let names: Vec<String> = many.iter().map(|e| format!("a {e}")).collect();
            format!("{} move {}", names.join(" and "), direction.word())
        }
    }
}

pub fn make_subject(cfg: &ToyConfig, rng: &mut Rng, entity: &str) -> SubjectImage {
    let c = cfg.channels;
    let color: Vec<f64> = (1..c).map(|_| COLOR_STD * rng.normal()).collect();
    let n = cfg.subject_size * cfg.subject_size;
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let texture: Vec<f64> = color.iter().map(|col| col + TEXTURE_STD * rng.normal()).collect();
        data.push(1.0);
        data.extend(texture);
    }
    SubjectImage { entity: entity.to_string(), pixels: Tensor::new(vec![n, c], data).expect("sized") }
}

/// Draws subject `lane` into every frame of `video`.
fn paint(cfg: &ToyConfig, video: &mut Tensor, direction: Direction, lane: usize, subject: &SubjectImage) {
    let (g, c, s) = (cfg.grid, cfg.channels, cfg.subject_size);
    let data = video.data_mut();
    for f in 0..cfg.frames {
        let (y0, x0) = placement(cfg, direction, lane, f);
        for dy in 0..s {
            for dx in 0..s {
                let dst = (((f * g) + y0 + dy) * g + x0 + dx) * c;
                data[dst..dst + c].copy_from_slice(subject.pixels.row(dy * s + dx));
            }
        }
    }
}

pub fn render(cfg: &ToyConfig, direction: Direction, subjects: &[SubjectImage]) -> Tensor {
    let mut video = Tensor::zeros(&[cfg.frames, cfg.grid, cfg.grid, cfg.channels]);
    for (lane, s) in subjects.iter().enumerate() {
        paint(cfg, &mut video, direction, lane, s);
    }
    video
}

/// Per-item stream so scenes can be generated independently.
pub(crate) fn item_rng(seed: u64, purpose: u64, index: usize) -> Rng {
    Rng::derive(seed.wrapping_add((index as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)), purpose)
}

pub fn make_scene(cfg: &ToyConfig, rng: &mut Rng) -> SyntheticScene {
    let count = 1 + rng.below(cfg.max_subjects as u64) as usize;
    let mut pool: Vec<&str> = ENTITIES.to_vec();
    let mut entities = Vec::with_capacity(count);
    for _ in 0..count {
        entities.push(pool.remove(rng.below(pool.len() as u64) as usize));
    }
    let direction = Direction::ALL[rng.below(4) as usize];
    let subjects: Vec<SubjectImage> = entities.iter().map(|e| make_subject(cfg, rng, e)).collect();
    SyntheticScene {
        prompt: prompt_for(&entities, direction),
        direction,
        video: render(cfg, direction, &subjects),
        subjects,
    }
}

pub fn make_scenes(cfg: &ToyConfig, seed: u64, purpose: u64, count: usize) -> Result<Vec<SyntheticScene>, ToyError> {
    if count == 0 {
        return Err(ToyError::Config("scene count must be at least 1".into()));
    }
    cfg.validate()?;
    Ok((0..count).map(|i| make_scene(cfg, &mut item_rng(seed, purpose, i))).collect())
}

/// Training scenes for `seed`.
pub fn make_dataset(cfg: &ToyConfig, seed: u64, count: usize) -> Result<Vec<SyntheticScene>, ToyError> {
    make_scenes(cfg, seed, purpose::DATASET, count)
}

/// Held-out scenes for `seed`.
pub fn make_eval_set(cfg: &ToyConfig, seed: u64, count: usize) -> Result<Vec<SyntheticScene>, ToyError> {
    make_scenes(cfg, seed, purpose::EVAL, count)
}

/// Non-presence channels of the `subject_size²` region at `(y0, x0)` in `frame`.
pub fn region_features(cfg: &ToyConfig, video: &Tensor, frame: usize, y0: usize, x0: usize) -> Vec<f64> {
    let (g, c, s) = (cfg.grid, cfg.channels, cfg.subject_size);
    let mut out = Vec::with_capacity(s * s * (c - 1));
    for dy in 0..s {
        for dx in 0..s {
            let at = (((frame * g) + y0 + dy) * g + x0 + dx) * c;
            out.extend_from_slice(&video.data()[at + 1..at + c]);
        }
    }
    out
}

/// Non-presence channels of a subject image.
pub fn subject_features(image: &SubjectImage) -> Vec<f64> {
    (0..image.pixels.rows()).flat_map(|r| image.pixels.row(r)[1..].to_vec()).collect()
}

/// `[frames·h·w, C]` pixels (frame-major, row-major) to
/// `[frames·(h/p)·(w/p), p·p·C]` tokens.
pub fn patchify(pixels: &[f64], frames: usize, h: usize, w: usize, c: usize, p: usize) -> Tensor {
    let (th, tw) = (h / p, w / p);
    let mut out = Vec::with_capacity(pixels.len());
    for f in 0..frames {
        for ty in 0..th {
            for tx in 0..tw {
                for dy in 0..p {
                    for dx in 0..p {
                        let at = ((f * h + ty * p + dy) * w + tx * p + dx) * c;
                        out.extend_from_slice(&pixels[at..at + c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames * th * tw, p * p * c], out).expect("sized")
}

/// Inverse of [`patchify`]; returns `[frames, h, w, C]`.
pub fn unpatchify(tokens: &Tensor, frames: usize, h: usize, w: usize, c: usize, p: usize) -> Tensor {
    let (th, tw) = (h / p, w / p);
    let mut out = vec![0.0; frames * h * w * c];
    let mut src = tokens.data().chunks_exact(c);
    for f in 0..frames {
        for ty in 0..th {
            for tx in 0..tw {
                for dy in 0..p {
                    for dx in 0..p {
                        let at = ((f * h + ty * p + dy) * w + tx * p + dx) * c;
                        out[at..at + c].copy_from_slice(src.next().expect("sized"));
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames, h, w, c], out).expect("sized")
}
