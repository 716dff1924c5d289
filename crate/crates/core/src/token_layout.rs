//! Identity-prompt template and the typed multimodal token sequence.
//!
//! A prompt with `n` subjects becomes
//!
//! ```text
//! <prompt>. <SEP> The <word 1> looks like <image 1>. The <word 2> looks like <image 2>.
//! ```
//!
//! and is laid out as `TEXT, IMG_SEM₁, TEXT, IMG_SEM₂, …, IMG_VAE₁, IMG_VAE₂, …`:
//! text runs alternate with the `<image i>` (semantic) blocks, and the VAE
//! blocks of every subject follow at the end. Sequence positions are 1-based;
//! subject ids are 0-based.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEP: &str = "<SEP>";
pub const DEFAULT_SEM_GRID: (usize, usize) = (4, 4);
pub const DEFAULT_VAE_GRID: (usize, usize) = (4, 4);

#[derive(Debug, Error, PartialEq)]
pub enum LayoutError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("subject {0} has an empty entity word")]
    EmptyEntityWord(usize),
    #[error("subject {0} has a degenerate grid")]
    BadGrid(usize),
    #[error("malformed token stream: {0}")]
    Malformed(String),
    #[error("template parse error: {0}")]
    Template(String),
}

/// One reference subject: its entity word and the token grids of its two
/// image encodings (semantic `<image i>` tokens and VAE latent tokens).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub entity_word: String,
    /// `(w, h)` of the `<image i>` token grid.
    pub sem_grid: (usize, usize),
    /// `(w, h)` of the VAE token grid.
    pub vae_grid: (usize, usize),
}

impl SubjectSpec {
    pub fn new(
        entity_word: impl Into<String>,
        sem_grid: (usize, usize),
        vae_grid: (usize, usize),
    ) -> Self {
        Self { entity_word: entity_word.into(), sem_grid, vae_grid }
    }

    pub fn with_default_grids(entity_word: impl Into<String>) -> Self {
        Self::new(entity_word, DEFAULT_SEM_GRID, DEFAULT_VAE_GRID)
    }

    pub fn sem_tokens(&self) -> usize {
        self.sem_grid.0 * self.sem_grid.1
    }

    pub fn vae_tokens(&self) -> usize {
        self.vae_grid.0 * self.vae_grid.1
    }

    fn validate(&self, idx: usize) -> Result<(), LayoutError> {
        if self.entity_word.trim().is_empty() {
            return Err(LayoutError::EmptyEntityWord(idx));
        }
        let (a, b) = self.sem_grid;
        let (c, d) = self.vae_grid;
        if a == 0 || b == 0 || c == 0 || d == 0 {
            return Err(LayoutError::BadGrid(idx));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    Text,
    ImgSem,
    ImgVae,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Text => "TEXT",
            TokenKind::ImgSem => "IMG_SEM",
            TokenKind::ImgVae => "IMG_VAE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub kind: TokenKind,
    pub subject_id: Option<usize>,
    pub seq_pos: usize,
}

/// Maximal run of tokens with the same kind and subject. `start..=end` are
/// 1-based sequence positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: TokenKind,
    pub subject_id: Option<usize>,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Validated token sequence with its segment boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    entries: Vec<TokenEntry>,
    segments: Vec<Segment>,
    /// Surface text of each TEXT token, when the stream came from a template.
    words: Vec<Option<String>>,
}

impl TokenStream {
    /// Checks the block structure and derives segments.
    pub fn from_entries(entries: Vec<TokenEntry>) -> Result<Self, LayoutError> {
        let words = vec![None; entries.len()];
        Self::with_words(entries, words)
    }

    fn with_words(entries: Vec<TokenEntry>, words: Vec<Option<String>>) -> Result<Self, LayoutError> {
        let bad = |m: String| Err(LayoutError::Malformed(m));
        for (i, e) in entries.iter().enumerate() {
            if e.seq_pos != i + 1 {
                return bad(format!("token {i} has seq_pos {}", e.seq_pos));
            }
            match (e.kind, e.subject_id) {
                (TokenKind::Text, Some(_)) => return bad(format!("TEXT token {} owned by a subject", e.seq_pos)),
                (TokenKind::ImgSem | TokenKind::ImgVae, None) => {
                    return bad(format!("image token {} has no subject", e.seq_pos))
                }
                _ => {}
            }
        }
        let mut segments: Vec<Segment> = Vec::new();
        for e in &entries {
            match segments.last_mut() {
                Some(s) if s.kind == e.kind && s.subject_id == e.subject_id => s.end = e.seq_pos,
                _ => segments.push(Segment {
                    kind: e.kind,
                    subject_id: e.subject_id,
                    start: e.seq_pos,
                    end: e.seq_pos,
                }),
            }
        }
        let sem_count = segments.iter().filter(|s| s.kind == TokenKind::ImgSem).count();
        let mut expected = Vec::new();
        if sem_count == 0 {
            expected.push((TokenKind::Text, None));
        }
        for k in 0..sem_count {
            expected.push((TokenKind::Text, None));
            expected.push((TokenKind::ImgSem, Some(k)));
        }
        for k in 0..sem_count {
            expected.push((TokenKind::ImgVae, Some(k)));
        }
        let got: Vec<_> = segments.iter().map(|s| (s.kind, s.subject_id)).collect();
        if got != expected {
            return bad(format!("segment pattern {got:?} does not match {expected:?}"));
        }
        Ok(Self { entries, segments, words })
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Surface word for TEXT token at 0-based index `i`, if known.
    pub fn word(&self, i: usize) -> Option<&str> {
        self.words.get(i).and_then(|w| w.as_deref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Last sequence position of every segment (`m1, m2, …`); the final mark
    /// equals the stream length.
    pub fn boundaries(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.end).collect()
    }

    pub fn subject_count(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == TokenKind::ImgSem).count()
    }

    /// 0-based indices of the text-stream tokens (TEXT and IMG_SEM).
    pub fn text_stream_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].kind != TokenKind::ImgVae).collect()
    }

    /// 0-based indices of the VAE tokens.
    pub fn vae_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].kind == TokenKind::ImgVae).collect()
    }
}

/// Expands `prompt` and the subjects' entity words into the identity-prompt
/// template. With no subjects the prompt is returned unchanged.
pub fn build_template(prompt: &str, subjects: &[SubjectSpec]) -> Result<String, LayoutError> {
    let body = prompt.trim();
    if body.is_empty() {
        return Err(LayoutError::EmptyPrompt);
    }
    if subjects.is_empty() {
        return Ok(prompt.to_string());
    }
    for (i, s) in subjects.iter().enumerate() {
        s.validate(i)?;
    }
    let mut out = body.to_string();
    if !body.ends_with(['.', '!', '?']) {
        out.push('.');
    }
    out.push(' ');
    out.push_str(SEP);
    for (i, s) in subjects.iter().enumerate() {
        out.push_str(&format!(" The {} looks like <image {}>.", s.entity_word.trim(), i + 1));
    }
    Ok(out)
}

/// Prompt and `(entity word, image slot)` pairs recovered from a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedTemplate {
    pub prompt: String,
    pub subjects: Vec<(String, usize)>,
}

pub fn parse_template(template: &str) -> Result<ParsedTemplate, LayoutError> {
    let Some((prompt, rest)) = template.split_once(&format!(" {SEP}")) else {
        return Ok(ParsedTemplate { prompt: template.to_string(), subjects: vec![] });
    };
    let mut subjects = Vec::new();
    let mut rest = rest.trim_start();
    while !rest.is_empty() {
        let body = rest
            .strip_prefix("The ")
            .ok_or_else(|| LayoutError::Template(format!("expected identity sentence at {rest:?}")))?;
        let (word, after) = body
            .split_once(" looks like <image ")
            .ok_or_else(|| LayoutError::Template(format!("missing image slot in {body:?}")))?;
        let (num, after) = after
            .split_once('>')
            .ok_or_else(|| LayoutError::Template("unterminated image slot".into()))?;
        let slot: usize = num
            .parse()
            .map_err(|_| LayoutError::Template(format!("bad image number {num:?}")))?;
        subjects.push((word.to_string(), slot));
        rest = after.strip_prefix('.').unwrap_or(after).trim_start();
    }
    Ok(ParsedTemplate { prompt: prompt.to_string(), subjects })
}

/// Mock tokenizer output: one token per word or punctuation mark.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplateToken {
    Word(String),
    Sep,
    /// 1-based `<image i>` slot.
    Image(usize),
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':')
}

pub fn tokenize(text: &str) -> Result<Vec<TemplateToken>, LayoutError> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
        } else if let Some(after) = rest.strip_prefix(SEP) {
            out.push(TemplateToken::Sep);
            rest = after;
        } else if let Some(after) = rest.strip_prefix("<image ") {
            let (num, after) = after
                .split_once('>')
                .ok_or_else(|| LayoutError::Template("unterminated image slot".into()))?;
            let slot = num
                .trim()
                .parse()
                .map_err(|_| LayoutError::Template(format!("bad image number {num:?}")))?;
            out.push(TemplateToken::Image(slot));
            rest = after;
        } else if is_punct(c) {
            out.push(TemplateToken::Word(c.to_string()));
            rest = &rest[c.len_utf8()..];
        } else {
            let end = rest
                .find(|ch: char| ch.is_whitespace() || is_punct(ch) || ch == '<')
                .unwrap_or(rest.len());
            let end = if end == 0 { c.len_utf8() } else { end };
            out.push(TemplateToken::Word(rest[..end].to_string()));
            rest = &rest[end..];
        }
    }
    Ok(out)
}

/// Number of TEXT tokens between `<image k-1>` and `<image k>` for `k ≥ 2`.
fn connective_count(subject: &SubjectSpec) -> usize {
    tokenize(&format!(". The {} looks like", subject.entity_word.trim()))
        .map(|t| t.len())
        .unwrap_or(0)
}

fn layout_segments(
    text_runs: Vec<Vec<Option<String>>>,
    subjects: &[SubjectSpec],
) -> Result<TokenStream, LayoutError> {
    let mut entries = Vec::new();
    let mut words = Vec::new();
    let mut push = |kind, subject_id, word: Option<String>| {
        let seq_pos = entries.len() + 1;
        entries.push(TokenEntry { kind, subject_id, seq_pos });
        words.push(word);
    };
    for (k, run) in text_runs.into_iter().enumerate() {
        for w in run {
            push(TokenKind::Text, None, w);
        }
        if let Some(s) = subjects.get(k) {
            for _ in 0..s.sem_tokens() {
                push(TokenKind::ImgSem, Some(k), None);
            }
        }
    }
    for (k, s) in subjects.iter().enumerate() {
        for _ in 0..s.vae_tokens() {
            push(TokenKind::ImgVae, Some(k), None);
        }
    }
    TokenStream::with_words(entries, words)
}

/// Lays out `prompt_token_count` leading TEXT tokens followed by the
/// subjects' blocks. Text runs between later `<image>` slots get the token
/// count of their connective words (`. The <word> looks like`).
pub fn layout_tokens(
    prompt_token_count: usize,
    subjects: &[SubjectSpec],
) -> Result<TokenStream, LayoutError> {
    if prompt_token_count == 0 {
        return Err(LayoutError::EmptyPrompt);
    }
    for (i, s) in subjects.iter().enumerate() {
        s.validate(i)?;
    }
    let mut runs = vec![vec![None; prompt_token_count]];
    for s in subjects.iter().skip(1) {
        runs.push(vec![None; connective_count(s)]);
    }
    layout_segments(runs, subjects)
}

/// Builds the template for `prompt` and lays out its tokens, keeping the
/// surface words of TEXT tokens. Text after the last `<image>` slot (the
/// closing period) is not part of the stream.
pub fn layout_template(prompt: &str, subjects: &[SubjectSpec]) -> Result<TokenStream, LayoutError> {
    let template = build_template(prompt, subjects)?;
    let tokens = tokenize(&template)?;
    let mut runs: Vec<Vec<Option<String>>> = vec![Vec::new()];
    let mut next_slot = 1;
    for t in tokens {
        match t {
            TemplateToken::Word(w) => runs.last_mut().expect("non-empty").push(Some(w)),
            TemplateToken::Sep => runs.last_mut().expect("non-empty").push(Some(SEP.to_string())),
            TemplateToken::Image(slot) => {
                if slot != next_slot {
                    return Err(LayoutError::Template(format!("expected <image {next_slot}>, got {slot}")));
                }
                next_slot += 1;
                runs.push(Vec::new());
            }
        }
    }
    if !subjects.is_empty() {
        runs.pop();
    }
    layout_segments(runs, subjects)
}
