use std::path::{Path, PathBuf};

use idinject::identity_injection::InjectionMode;
use idinject::toy_pipeline::ToyConfig;
use serde::Deserialize;

use crate::CliError;

/// Contents of a `--config` TOML file.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub toy: ToyConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ToyOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// attention_inherited, token_concat or adapter.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub base_steps: Option<usize>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    /// Keep the injection blocks at their zero init (baseline).
    #[arg(long)]
    pub no_injection: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
            if key.is_empty() {
                e.message().to_string()
            } else {
                format!("key `{key}`: {}", e.message())
            }
        })
    }

    pub fn apply(&mut self, o: &ToyOverrides) -> Result<(), CliError> {
        let t = &mut self.toy;
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(m) = &o.mode {
            t.mode = m.parse::<InjectionMode>().map_err(|e| CliError::Usage(format!("--mode: {e}")))?;
        }
        for (slot, v) in [
            (&mut t.base_steps, o.base_steps),
            (&mut t.train_steps, o.train_steps),
            (&mut t.sample_steps, o.sample_steps),
            (&mut t.dataset_size, o.dataset_size),
            (&mut t.eval_size, o.eval_size),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if o.no_injection {
            t.injection = false;
        }
        t.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Dotted key of the `key = value` line containing byte `offset`, prefixed
/// by the enclosing table header.
fn key_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let end = start + line.len();
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if (start..end).contains(&offset) {
            return match trimmed.split_once('=') {
                Some((k, _)) if !table.is_empty() => format!("{table}.{}", k.trim()),
                Some((k, _)) => k.trim().to_string(),
                None => table,
            };
        }
        start = end;
    }
    String::new()
}
