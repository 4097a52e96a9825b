//! Caption tokenization, part-of-speech tagging and `[MASK]` substitution.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitRng;

/// Literal mask token inserted in place of masked words.
pub const MASK_TOKEN: &str = "[MASK]";

/// Default fraction of maskable tokens replaced.
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

const BUILTIN_LEXICON: &str = include_str!("../lexicon/fashion.tsv");

#[derive(Debug, Error)]
pub enum LinguaError {
    #[error("empty text")]
    EmptyText,
    #[error("no tokens to tag")]
    NoTokens,
    #[error("mask ratio must lie in [0, 1], got {0}")]
    BadRatio(f64),
    #[error("caption has no maskable tokens")]
    NothingToMask,
    #[error("lexicon {path}:{line}: {msg}")]
    Lexicon { path: String, line: usize, msg: String },
    #[error("external tagger failed: {0}")]
    Tagger(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn is_punct(&self) -> bool {
        self.surface.chars().all(|c| !c.is_alphanumeric())
    }
}

fn push(out: &mut Vec<Token>, text: &str, start: usize, end: usize) {
    if start < end {
        out.push(Token {
            surface: text[start..end].to_string(),
            start,
            end,
        });
    }
}

/// Splits a whitespace-free chunk: leading and trailing punctuation characters
/// become single-character tokens, the core (with any inner hyphens or
/// apostrophes) stays whole.
fn split_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let chunk = &text[start..end];
    let chars: Vec<(usize, char)> = chunk.char_indices().collect();
    let mut lo = 0;
    while lo < chars.len() && !chars[lo].1.is_alphanumeric() {
        lo += 1;
    }
    if lo == chars.len() {
        for (i, c) in &chars {
            push(out, text, start + i, start + i + c.len_utf8());
        }
        return;
    }
    let mut hi = chars.len();
    while hi > lo && !chars[hi - 1].1.is_alphanumeric() {
        hi -= 1;
    }
    for (i, c) in &chars[..lo] {
        push(out, text, start + i, start + i + c.len_utf8());
    }
    let core_start = start + chars[lo].0;
    let core_end = if hi < chars.len() { start + chars[hi].0 } else { end };
    push(out, text, core_start, core_end);
    for (i, c) in &chars[hi..] {
        push(out, text, start + i, start + i + c.len_utf8());
    }
}

/// Tokenizes a caption.
///
/// Whitespace separates chunks. Within a chunk, literal `[MASK]` markers are
/// their own tokens, and leading/trailing punctuation is split off one
/// character at a time. Hyphenated compounds such as `knee-high` stay whole.
/// Every token keeps its byte span so the text can be rebuilt exactly.
pub fn tokenize(text: &str) -> Result<Vec<Token>, LinguaError> {
    if text.trim().is_empty() {
        return Err(LinguaError::EmptyText);
    }
    let mut out = Vec::new();
    let mut pos = 0;
    for chunk in text.split_whitespace() {
        let rel = text[pos..].find(chunk).expect("chunk comes from text");
        let start = pos + rel;
        let end = start + chunk.len();
        pos = end;

        let mut cursor = start;
        while let Some(m) = text[cursor..end].find(MASK_TOKEN) {
            let ms = cursor + m;
            if ms > cursor {
                split_chunk(text, cursor, ms, &mut out);
            }
            push(&mut out, text, ms, ms + MASK_TOKEN.len());
            cursor = ms + MASK_TOKEN.len();
        }
        if cursor < end {
            split_chunk(text, cursor, end, &mut out);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Adj,
    Other,
}

impl PosTag {
    pub fn parse(s: &str) -> Option<PosTag> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NOUN" => Some(PosTag::Noun),
            "ADJ" => Some(PosTag::Adj),
            "OTHER" => Some(PosTag::Other),
            _ => None,
        }
    }

    pub fn is_maskable(self) -> bool {
        matches!(self, PosTag::Noun | PosTag::Adj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedToken {
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub tag: PosTag,
    pub maskable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedCaption {
    pub text: String,
    pub tokens: Vec<TaggedToken>,
}

impl TaggedCaption {
    pub fn maskable_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.maskable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rebuilds the text from token spans and the gaps between them.
    pub fn reconstruct(&self) -> String {
        self.render_with(|_, t| t.surface.as_str())
    }

    fn render_with<'a, F>(&'a self, mut pick: F) -> String
    where
        F: FnMut(usize, &'a TaggedToken) -> &'a str,
    {
        let mut out = String::with_capacity(self.text.len());
        let mut pos = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&self.text[pos..t.start]);
            out.push_str(pick(i, t));
            pos = t.end;
        }
        out.push_str(&self.text[pos..]);
        out
    }
}

/// Assigns a NOUN/ADJ/OTHER tag to every token.
pub trait Tagger: Send + Sync {
    fn tag(&self, tokens: &[Token]) -> Result<Vec<PosTag>, LinguaError>;
}

/// Lexicon lookup with closed-class stoplist and suffix fallbacks.
///
/// Lookup order for a lowercased token: exact lexicon entry; for hyphenated
/// compounds, the entry of the last segment; suffix rules (`-ed`, `-ous`,
/// `-ful`, `-ish` give ADJ, `-ness`, `-wear` give NOUN); otherwise OTHER.
/// Punctuation is always OTHER.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    entries: HashMap<String, PosTag>,
}

impl LexiconTagger {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON, "<builtin>").expect("builtin lexicon parses")
    }

    /// Parses `word<TAB>TAG` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self, LinguaError> {
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| LinguaError::Lexicon {
                path: origin.to_string(),
                line: n + 1,
                msg: "expected word<TAB>TAG".into(),
            })?;
            let tag = PosTag::parse(tag).ok_or_else(|| LinguaError::Lexicon {
                path: origin.to_string(),
                line: n + 1,
                msg: format!("unknown tag {tag:?}"),
            })?;
            entries.insert(word.trim().to_lowercase(), tag);
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, LinguaError> {
        let text = fs::read_to_string(path).map_err(|source| LinguaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Adds `other`'s entries, overriding existing ones.
    pub fn extend(&mut self, other: LexiconTagger) {
        self.entries.extend(other.entries);
    }

    pub fn lookup(&self, word: &str) -> Option<PosTag> {
        self.entries.get(&word.to_lowercase()).copied()
    }

    /// Words carrying `tag`, sorted.
    pub fn words(&self, tag: PosTag) -> Vec<&str> {
        let mut v: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, t)| **t == tag)
            .map(|(w, _)| w.as_str())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn tag_word(&self, word: &str) -> PosTag {
        if word.chars().all(|c| !c.is_alphanumeric()) {
            return PosTag::Other;
        }
        let lower = word.to_lowercase();
        if let Some(t) = self.entries.get(&lower) {
            return *t;
        }
        if let Some((_, last)) = lower.rsplit_once('-') {
            if let Some(t) = self.entries.get(last) {
                return *t;
            }
        }
        const ADJ_SUFFIX: [&str; 4] = ["ed", "ous", "ful", "ish"];
        const NOUN_SUFFIX: [&str; 2] = ["ness", "wear"];
        if lower.len() > 4 && ADJ_SUFFIX.iter().any(|s| lower.ends_with(s)) {
            return PosTag::Adj;
        }
        if lower.len() > 5 && NOUN_SUFFIX.iter().any(|s| lower.ends_with(s)) {
            return PosTag::Noun;
        }
        PosTag::Other
    }
}

impl Tagger for LexiconTagger {
    fn tag(&self, tokens: &[Token]) -> Result<Vec<PosTag>, LinguaError> {
        Ok(tokens.iter().map(|t| self.tag_word(&t.surface)).collect())
    }
}

/// Runs an external program speaking a line protocol: one token per stdin
/// line, one `token<TAB>TAG` per stdout line, in the same order.
#[derive(Debug, Clone)]
pub struct ExternalTagger {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Tagger for ExternalTagger {
    fn tag(&self, tokens: &[Token]) -> Result<Vec<PosTag>, LinguaError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| LinguaError::Tagger(format!("spawn {}: {e}", self.program.display())))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // a tagger that dies early closes its stdin; its exit status is reported below
            for t in tokens {
                if writeln!(stdin, "{}", t.surface).is_err() {
                    break;
                }
            }
        }
        let stdout = child.stdout.take().expect("piped stdout");
        let lines: Result<Vec<String>, _> = BufReader::new(stdout).lines().collect();
        let output = child
            .wait_with_output()
            .map_err(|e| LinguaError::Tagger(e.to_string()))?;
        if !output.status.success() {
            return Err(LinguaError::Tagger(format!(
                "exit {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let lines = lines.map_err(|e| LinguaError::Tagger(e.to_string()))?;
        let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != tokens.len() {
            return Err(LinguaError::Tagger(format!(
                "expected {} tagged lines, got {}",
                tokens.len(),
                lines.len()
            )));
        }
        tokens
            .iter()
            .zip(lines)
            .map(|(tok, line)| {
                let (word, tag) = line
                    .split_once('\t')
                    .ok_or_else(|| LinguaError::Tagger(format!("malformed line {line:?}")))?;
                if word != tok.surface {
                    return Err(LinguaError::Tagger(format!(
                        "token mismatch: sent {:?}, got {:?}",
                        tok.surface, word
                    )));
                }
                PosTag::parse(tag).ok_or_else(|| LinguaError::Tagger(format!("unknown tag {tag:?}")))
            })
            .collect()
    }
}

/// Tags `tokens` (produced by [`tokenize`] over `text`).
pub fn pos_tag(text: &str, tokens: &[Token], tagger: &dyn Tagger) -> Result<TaggedCaption, LinguaError> {
    if tokens.is_empty() {
        return Err(LinguaError::NoTokens);
    }
    let tags = tagger.tag(tokens)?;
    if tags.len() != tokens.len() {
        return Err(LinguaError::Tagger(format!(
            "tagger returned {} tags for {} tokens",
            tags.len(),
            tokens.len()
        )));
    }
    let tokens = tokens
        .iter()
        .zip(tags)
        .map(|(t, tag)| TaggedToken {
            surface: t.surface.clone(),
            start: t.start,
            end: t.end,
            tag,
            maskable: tag.is_maskable() && !t.is_punct(),
        })
        .collect();
    Ok(TaggedCaption {
        text: text.to_string(),
        tokens,
    })
}

/// Tokenizes and tags in one go.
pub fn analyze(text: &str, tagger: &dyn Tagger) -> Result<TaggedCaption, LinguaError> {
    let tokens = tokenize(text)?;
    pos_tag(text, &tokens, tagger)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedCaption {
    pub source: TaggedCaption,
    /// Token indices replaced by `[MASK]`, ascending.
    pub mask_positions: BTreeSet<usize>,
    pub ratio: f64,
    pub seed: u64,
    pub masked_text: String,
}

impl MaskedCaption {
    pub fn is_masked(&self, token: usize) -> bool {
        self.mask_positions.contains(&token)
    }

    /// Masks an explicit set of token positions. Every position must be maskable.
    pub fn with_positions(source: TaggedCaption, positions: BTreeSet<usize>, ratio: f64, seed: u64) -> Option<Self> {
        if positions
            .iter()
            .any(|&p| p >= source.tokens.len() || !source.tokens[p].maskable)
        {
            return None;
        }
        let masked_text = source.render_with(|i, t| {
            if positions.contains(&i) {
                MASK_TOKEN
            } else {
                t.surface.as_str()
            }
        });
        Some(Self {
            source,
            mask_positions: positions,
            ratio,
            seed,
            masked_text,
        })
    }
}

/// Number of tokens masked for `ratio` over `maskable` candidates:
/// `floor(ratio * maskable + 0.5)`, at least one when both are positive.
pub fn mask_count(ratio: f64, maskable: usize) -> usize {
    if maskable == 0 || ratio <= 0.0 {
        return 0;
    }
    let n = (ratio * maskable as f64 + 0.5).floor() as usize;
    n.clamp(1, maskable)
}

/// Replaces a uniformly random subset of maskable tokens with `[MASK]`.
///
/// The subset is the first [`mask_count`] entries of the maskable positions
/// after a [`SplitRng`] shuffle seeded with `seed`.
pub fn mask_caption(tc: &TaggedCaption, ratio: f64, seed: u64) -> Result<MaskedCaption, LinguaError> {
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(LinguaError::BadRatio(ratio));
    }
    let mut candidates = tc.maskable_positions();
    if ratio > 0.0 && candidates.is_empty() {
        return Err(LinguaError::NothingToMask);
    }
    let k = mask_count(ratio, candidates.len());
    let mut rng = SplitRng::new(seed);
    rng.shuffle(&mut candidates);
    let positions: BTreeSet<usize> = candidates[..k].iter().copied().collect();
    Ok(MaskedCaption::with_positions(tc.clone(), positions, ratio, seed).expect("positions are maskable"))
}
