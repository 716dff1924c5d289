use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use idinject::consolidation::{self, CommandProvider, ConsolidationError, MockProvider, ObservationProvider};
use idinject::io_util::write_atomic;
use idinject::metrics::{self, FeatureSet, MetricsError};
use idinject::numerics::tensor_file;
use idinject::rope3d::assign_stream;
use idinject::token_layout::{build_template, layout_template, SubjectSpec, DEFAULT_SEM_GRID, DEFAULT_VAE_GRID};
use idinject::toy_pipeline::{self, make_eval_set, ToyError, ToyPipeline};
use serde_json::{json, Value};

use crate::config::{RunConfig, ToyOverrides};
use crate::CliError;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn toy_error(e: ToyError) -> CliError {
    match e {
        ToyError::Config(_) | ToyError::Layout(_) | ToyError::Stage(_) | ToyError::Param(_) => usage(e),
        _ => failure(e),
    }
}

/// Writes `text` to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).map_err(|e| failure(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(failure),
    }
}

fn emit_json(out: Option<&Path>, v: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(failure)?;
    emit(out, &format!("{text}\n"))
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("grid {s:?} is not WxH"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad grid width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad grid height in {s:?}"))?;
    Ok((w, h))
}

#[derive(Args, Debug)]
pub struct LayoutArgs {
    #[arg(long)]
    pub prompt: String,
    /// Entity word of one subject; repeat for several subjects.
    #[arg(long = "subject")]
    pub subjects: Vec<String>,
    /// `<image>` token grid as WxH.
    #[arg(long, value_parser = parse_grid)]
    pub sem_grid: Option<(usize, usize)>,
    /// VAE token grid as WxH.
    #[arg(long, value_parser = parse_grid)]
    pub vae_grid: Option<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl LayoutArgs {
    fn specs(&self) -> Vec<SubjectSpec> {
        let sem = self.sem_grid.unwrap_or(DEFAULT_SEM_GRID);
        let vae = self.vae_grid.unwrap_or(DEFAULT_VAE_GRID);
        self.subjects.iter().map(|w| SubjectSpec::new(w.clone(), sem, vae)).collect()
    }

    fn out<'a>(&'a self, cfg: &'a RunConfig) -> Option<&'a Path> {
        self.out.as_deref().or(cfg.paths.output.as_deref())
    }
}

fn subject_field(id: Option<usize>) -> Value {
    id.map_or(Value::Null, |k| json!(k))
}

pub fn layout(a: &LayoutArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let specs = a.specs();
    let template = build_template(&a.prompt, &specs).map_err(usage)?;
    let stream = layout_template(&a.prompt, &specs).map_err(usage)?;
    let tokens: Vec<Value> = stream
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            json!({
                "kind": e.kind.as_str(),
                "seq_pos": e.seq_pos,
                "subject_id": subject_field(e.subject_id),
                "word": stream.word(i),
            })
        })
        .collect();
    let segments: Vec<Value> = stream
        .segments()
        .iter()
        .map(|s| json!({"end": s.end, "kind": s.kind.as_str(), "start": s.start, "subject_id": subject_field(s.subject_id)}))
        .collect();
    emit_json(a.out(cfg), &json!({"segments": segments, "template": template, "tokens": tokens}))
}

pub fn rope_dump(a: &LayoutArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let specs = a.specs();
    let stream = layout_template(&a.prompt, &specs).map_err(usage)?;
    let idx = assign_stream(&stream, &specs).map_err(usage)?;
    let mut text = String::from("seq_pos\tkind\tsubject_id\tt\ty\tx\n");
    for (e, r) in stream.entries().iter().zip(&idx) {
        let subject = e.subject_id.map_or("-".to_string(), |k| k.to_string());
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", e.seq_pos, e.kind.as_str(), subject, r.t, r.y, r.x));
    }
    emit(a.out(cfg), &text)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: ToyOverrides,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Optional JSON file for the loss curves.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn checkpoint_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| usage("--checkpoint (or paths.checkpoint) is required"))
}

pub fn demo_train(a: &TrainArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = checkpoint_path(&a.checkpoint, cfg)?;
    log::info!("training toy pipeline, seed {}, mode {}", cfg.toy.seed, cfg.toy.mode.as_str());
    let (pipeline, report) = toy_pipeline::train(&cfg.toy).map_err(toy_error)?;
    pipeline.save(&ckpt).map_err(failure)?;
    if let Some(path) = &a.report {
        emit_json(Some(path), &serde_json::to_value(&report).map_err(failure)?)?;
    }
    let summary = json!({
        "checkpoint": ckpt.display().to_string(),
        "final_eval_loss": report.final_eval_loss,
        "initial_eval_loss": report.initial_eval_loss,
        "mode": cfg.toy.mode.as_str(),
        "seed": cfg.toy.seed,
    });
    emit_json(None, &summary)
}

fn load_checkpoint(path: &Path) -> Result<ToyPipeline, CliError> {
    if !path.join("manifest.json").is_file() {
        return Err(usage(format!("{} is not a checkpoint directory", path.display())));
    }
    ToyPipeline::load(path).map_err(toy_error)
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Index into the held-out scene set derived from the checkpoint seed.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    /// Noise seed; defaults to checkpoint seed + scene index.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Output TensorFile `[frames, grid, grid, channels]`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn demo_generate(a: &GenerateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let p = load_checkpoint(&checkpoint_path(&a.checkpoint, cfg)?)?;
    let out = a.out.clone().or_else(|| cfg.paths.output.clone()).ok_or_else(|| usage("--out is required"))?;
    let scenes = make_eval_set(&p.cfg, p.cfg.seed, a.scene + 1).map_err(toy_error)?;
    let scene = &scenes[a.scene];
    let steps = a.sample_steps.unwrap_or(p.cfg.sample_steps);
    let seed = a.noise_seed.unwrap_or(p.cfg.seed.wrapping_add(a.scene as u64));
    let inputs = p.scene_inputs(scene).map_err(toy_error)?;
    let video = p.generate(&inputs, steps, seed).map_err(toy_error)?;
    tensor_file::save(&video, &out).map_err(failure)?;
    emit_json(None, &json!({"out": out.display().to_string(), "prompt": scene.prompt, "shape": video.dims(), "steps": steps}))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn demo_eval(a: &EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let p = load_checkpoint(&checkpoint_path(&a.checkpoint, cfg)?)?;
    let report = p.evaluate().map_err(toy_error)?;
    let mut v = serde_json::to_value(&report).map_err(failure)?;
    v["mode"] = json!(p.cfg.mode.as_str());
    v["injection"] = json!(p.cfg.injection);
    emit_json(a.out.as_deref().or(cfg.paths.output.as_deref()), &v)
}

#[derive(Args, Debug)]
pub struct ConsolidateArgs {
    /// JSONL file of observation records.
    #[arg(long, conflicts_with_all = ["command", "mock"])]
    pub input: Option<PathBuf>,
    /// External provider command printing JSONL records on stdout.
    #[arg(long, conflicts_with = "mock")]
    pub command: Option<String>,
    /// Use the built-in synthetic provider.
    #[arg(long)]
    pub mock: bool,
    #[arg(long, default_value_t = 0)]
    pub mock_seed: u64,
    #[arg(long, default_value_t = 12)]
    pub mock_frames: usize,
    #[arg(long, default_value_t = 2)]
    pub mock_subjects: usize,
    #[arg(long, default_value_t = consolidation::DEFAULT_TAU_DIST)]
    pub tau_dist: f64,
    #[arg(long, default_value_t = consolidation::DEFAULT_TAU_CLIP)]
    pub tau_clip: f64,
    /// Defaults to the number of distinct frames with any observation.
    #[arg(long)]
    pub total_frames: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn consolidation_error(e: ConsolidationError) -> CliError {
    match e {
        ConsolidationError::Provider(_) => failure(e),
        _ => usage(e),
    }
}

pub fn consolidate(a: &ConsolidateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let records = if let Some(path) = &a.input {
        let file = std::fs::File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        consolidation::read_jsonl(std::io::BufReader::new(file)).map_err(consolidation_error)?
    } else if let Some(cmd) = &a.command {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| usage("--command is empty"))?;
        CommandProvider { program, args: parts.collect() }.observations().map_err(consolidation_error)?
    } else if a.mock {
        MockProvider { seed: a.mock_seed, total_frames: a.mock_frames, subjects: a.mock_subjects, dim: 16, noise: 0.05 }
            .observations()
            .map_err(consolidation_error)?
    } else {
        return Err(usage("one of --input, --command or --mock is required"));
    };
    let detected = records.iter().map(|r| r.frame_idx).collect::<BTreeSet<_>>().len();
    let total = a.total_frames.unwrap_or(detected);
    let count = records.len();
    let (graph, cliques) = consolidation::run_pipeline(records, a.tau_dist, a.tau_clip, total).map_err(consolidation_error)?;
    let mut manifest = consolidation::manifest(&graph, &cliques, total);
    manifest["records"] = json!(count);
    manifest["tau_clip"] = json!(a.tau_clip);
    emit_json(a.out.as_deref().or(cfg.paths.output.as_deref()), &manifest)
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Reference embedding, shape `[d]` or `[1, d]`.
    #[arg(long, requires = "frames")]
    pub reference: Option<PathBuf>,
    /// Per-frame features `[frames, d]`.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// First population `[n, d]` for the Fréchet distance.
    #[arg(long, requires = "set_b")]
    pub set_a: Option<PathBuf>,
    #[arg(long, requires = "set_a")]
    pub set_b: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_set(path: &Path) -> Result<FeatureSet, CliError> {
    let t = tensor_file::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let label = path.display().to_string();
    let t = if t.dims().len() == 1 { t.reshape(&[1, t.numel()]).map_err(usage)? } else { t };
    FeatureSet::from_tensor(label, &t).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn metrics_error(e: MetricsError) -> CliError {
    match e {
        MetricsError::Dimension { .. } | MetricsError::TooFew { .. } | MetricsError::Empty => usage(e),
        _ => failure(e),
    }
}

pub fn metrics(a: &MetricsArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if a.frames.is_none() && a.set_a.is_none() {
        return Err(usage("nothing to compute: pass --frames and/or --set-a/--set-b"));
    }
    let mut report = serde_json::Map::new();
    if let Some(fp) = &a.frames {
        let frames = load_set(fp)?;
        if frames.len() >= 2 {
            report.insert("temporal_consistency".into(), json!(metrics::temporal_consistency(&frames).map_err(metrics_error)?));
        }
        if let Some(rp) = &a.reference {
            let r = load_set(rp)?;
            if r.len() != 1 {
                return Err(usage("--reference must hold exactly one vector"));
            }
            let sim = metrics::identity_similarity(&r.vectors()[0], &frames).map_err(metrics_error)?;
            report.insert("identity_similarity".into(), json!(sim));
        }
        report.insert("frames".into(), json!(frames.len()));
    }
    if let (Some(pa), Some(pb)) = (&a.set_a, &a.set_b) {
        let fd = metrics::frechet_distance(&load_set(pa)?, &load_set(pb)?).map_err(metrics_error)?;
        report.insert("frechet_distance".into(), json!(fd));
    }
    emit_json(a.out.as_deref().or(cfg.paths.output.as_deref()), &Value::Object(report))
}

