//! Text-to-image generation and the synthetic sample store.
//!
//! Store layout, relative to a cell directory:
//!
//! ```text
//! <strategy>/<style>/<sample id>.png
//! <strategy>/manifest.jsonl          one SyntheticSample per line, plan order
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{join_url, parallel_map, BackendError, HttpClient, RetryPolicy};
use crate::corpus::{FewShotSplit, StyleLabel};
use crate::lingua::{analyze, mask_caption, LinguaError, MaskedCaption, Tagger};
use crate::mock;
use crate::promptkit::{fill_masks, render_prompt, CompletedCaption, LlmBackend, LlmLog, PromptError, PromptStrategy, ValidationPolicy};
use crate::rng::{derive_seed, hash64};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("backend produced {got_w}x{got_h} image, expected {want_w}x{want_h}")]
    WrongDimensions { want_w: u32, want_h: u32, got_w: u32, got_h: u32 },
    #[error("backend produced undecodable image: {0}")]
    Undecodable(String),
    #[error("no caption stored for reference {0}")]
    MissingCaption(String),
    #[error("no completion for sample {0}")]
    MissingCompletion(String),
    #[error("sample {id}: every completion was rejected ({reason})")]
    CompletionRejected { id: String, reason: String },
    #[error("style {0} has no training reference")]
    NoReference(StyleLabel),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Lingua(#[from] LinguaError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}:{line}: {source}")]
    Manifest {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub scheduler: String,
    pub samples_per_style: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            width: 512,
            height: 512,
            scheduler: "EulerAncestralDiscreteScheduler".into(),
            samples_per_style: 512,
            seed: 0,
        }
    }
}

/// Wire body of a generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub scheduler: String,
    pub seed: u64,
}

/// A text-to-image model returning encoded image bytes.
pub trait T2IBackend: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<Vec<u8>, BackendError>;
}

/// Renders a blocky pattern seeded by `hash(prompt, seed)` and tags the PNG
/// with the style detected in the prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockT2I;

impl T2IBackend for MockT2I {
    fn generate(&self, req: &GenRequest) -> Result<Vec<u8>, BackendError> {
        let mut key = req.prompt.as_bytes().to_vec();
        key.extend_from_slice(&req.seed.to_le_bytes());
        let style = mock::detect_style(&req.prompt);
        Ok(mock::render_png(req.width, req.height, hash64(&key), style, &req.prompt))
    }
}

/// Client for a diffusion server: `POST {endpoint}/generate` with a JSON
/// [`GenRequest`], image bytes in the response body.
pub struct HttpT2I {
    url: String,
    http: HttpClient,
}

impl HttpT2I {
    pub fn new(endpoint: &str, retry: RetryPolicy, timeout: Duration) -> Result<Self, BackendError> {
        Ok(Self {
            url: join_url(endpoint, "generate"),
            http: HttpClient::new(retry, None, timeout)?,
        })
    }
}

impl T2IBackend for HttpT2I {
    fn generate(&self, req: &GenRequest) -> Result<Vec<u8>, BackendError> {
        self.http.post_json(&self.url, req)
    }
}

pub fn image_dimensions(bytes: &[u8]) -> Result<(u32, u32), SynthError> {
    image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| SynthError::Undecodable(e.to_string()))?
        .into_dimensions()
        .map_err(|e| SynthError::Undecodable(e.to_string()))
}

/// Generates one image and writes it to `out_path`.
pub fn generate_image(
    backend: &dyn T2IBackend,
    prompt: &str,
    cfg: &GenConfig,
    seed: u64,
    out_path: &Path,
) -> Result<PathBuf, SynthError> {
    if prompt.trim().is_empty() {
        return Err(SynthError::EmptyPrompt);
    }
    let req = GenRequest {
        prompt: prompt.to_string(),
        steps: cfg.steps,
        width: cfg.width,
        height: cfg.height,
        scheduler: cfg.scheduler.clone(),
        seed,
    };
    let bytes = backend.generate(&req)?;
    let (w, h) = image_dimensions(&bytes)?;
    if (w, h) != (cfg.width, cfg.height) {
        return Err(SynthError::WrongDimensions {
            want_w: cfg.width,
            want_h: cfg.height,
            got_w: w,
            got_h: h,
        });
    }
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(out_path, &bytes).map_err(io_err(out_path))?;
    Ok(out_path.to_path_buf())
}

/// One synthetic image with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: String,
    /// Relative to the cell directory.
    pub image_path: PathBuf,
    pub label: StyleLabel,
    pub strategy: PromptStrategy,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<CompletedCaption>,
    pub backend_seed: u64,
}

/// Work item before any model is called.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSample {
    pub id: String,
    pub label: StyleLabel,
    pub ordinal: usize,
    pub reference_id: Option<String>,
    pub mask_seed: u64,
    pub backend_seed: u64,
}

/// Lays out `samples_per_style` samples per style.
///
/// References cycle round-robin over the style's training records; backend
/// seeds run sequentially from `cfg.seed` across styles in label order; mask
/// seeds are derived per (style, ordinal).
pub fn plan_samples(split: &FewShotSplit, strategy: PromptStrategy, cfg: &GenConfig) -> Result<Vec<PlannedSample>, SynthError> {
    let mut out = Vec::new();
    for (s_idx, style) in split.styles().into_iter().enumerate() {
        let refs = split.train_for(style);
        if strategy.needs_reference() && refs.is_empty() {
            return Err(SynthError::NoReference(style));
        }
        for ordinal in 0..cfg.samples_per_style {
            let global = (s_idx * cfg.samples_per_style + ordinal) as u64;
            out.push(PlannedSample {
                id: format!("{strategy}-{style}-{ordinal:05}"),
                label: style,
                ordinal,
                reference_id: strategy
                    .needs_reference()
                    .then(|| refs[ordinal % refs.len()].id.clone()),
                mask_seed: derive_seed(cfg.seed, &["mask", style.as_str(), &ordinal.to_string()]),
                backend_seed: cfg.seed.wrapping_add(global),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEntry {
    pub sample_id: String,
    pub masked: MaskedCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionEntry {
    pub sample_id: String,
    pub completion: CompletedCaption,
}

/// Masks the reference caption of every planned sample with its own seed.
pub fn mask_plan(
    plan: &[PlannedSample],
    captions: &HashMap<String, String>,
    tagger: &dyn Tagger,
    ratio: f64,
) -> Result<Vec<MaskedEntry>, SynthError> {
    let mut tagged = HashMap::new();
    let mut out = Vec::with_capacity(plan.len());
    for p in plan {
        let rid = p.reference_id.as_ref().ok_or_else(|| SynthError::MissingCaption(p.id.clone()))?;
        if !tagged.contains_key(rid) {
            let caption = captions.get(rid).ok_or_else(|| SynthError::MissingCaption(rid.clone()))?;
            tagged.insert(rid.clone(), analyze(caption, tagger)?);
        }
        let masked = mask_caption(&tagged[rid], ratio, p.mask_seed)?;
        out.push(MaskedEntry {
            sample_id: p.id.clone(),
            masked,
        });
    }
    Ok(out)
}

/// How rejected completions are treated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionPolicy {
    pub validation: ValidationPolicy,
    /// Replace rejected completions with fresh (mask, completion) pairs.
    /// Off by default: rejected completions pass through with their verdict.
    pub filter_rejected: bool,
    /// Extra attempts per sample when filtering.
    pub max_refills: u32,
}

impl Default for CompletionPolicy {
    fn default() -> Self {
        Self {
            validation: ValidationPolicy::default(),
            filter_rejected: false,
            max_refills: 3,
        }
    }
}

/// Runs fill-in-the-masks for every masked entry, up to `max_in_flight` at once.
pub fn complete_plan(
    masked: &[MaskedEntry],
    llm: &dyn LlmBackend,
    policy: &CompletionPolicy,
    log: &LlmLog,
    max_in_flight: usize,
) -> Result<Vec<CompletionEntry>, SynthError> {
    let results = parallel_map(masked, max_in_flight, |entry| -> Result<CompletionEntry, SynthError> {
        let mut mc = entry.masked.clone();
        let mut attempt = 0u32;
        loop {
            let rid = if attempt == 0 {
                entry.sample_id.clone()
            } else {
                format!("{}#{attempt}", entry.sample_id)
            };
            let cc = fill_masks(llm, &mc, &policy.validation, &rid, log)?;
            if cc.validation.is_accepted() || !policy.filter_rejected {
                return Ok(CompletionEntry {
                    sample_id: entry.sample_id.clone(),
                    completion: cc,
                });
            }
            if attempt >= policy.max_refills {
                let reason = match cc.validation {
                    crate::promptkit::Validation::Rejected { reason } => reason,
                    _ => unreachable!(),
                };
                return Err(SynthError::CompletionRejected {
                    id: entry.sample_id.clone(),
                    reason,
                });
            }
            attempt += 1;
            let seed = derive_seed(entry.masked.seed, &["refill", &attempt.to_string()]);
            mc = mask_caption(&entry.masked.source, entry.masked.ratio, seed)?;
        }
    });
    results.into_iter().collect()
}

/// A planned sample with its rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedSample {
    pub plan: PlannedSample,
    pub prompt: String,
    pub completion: Option<CompletedCaption>,
}

pub fn build_prompts(
    plan: &[PlannedSample],
    strategy: PromptStrategy,
    captions: &HashMap<String, String>,
    completions: &[CompletionEntry],
) -> Result<Vec<PromptedSample>, SynthError> {
    let by_id: HashMap<&str, &CompletedCaption> = completions
        .iter()
        .map(|c| (c.sample_id.as_str(), &c.completion))
        .collect();
    plan.iter()
        .map(|p| {
            let (prompt, completion) = match strategy {
                PromptStrategy::Class => (render_prompt(strategy, Some(p.label.as_str()), None)?, None),
                PromptStrategy::Caption => {
                    let rid = p.reference_id.as_deref().unwrap_or_default();
                    let cap = captions.get(rid).ok_or_else(|| SynthError::MissingCaption(rid.to_string()))?;
                    (render_prompt(strategy, None, Some(cap))?, None)
                }
                PromptStrategy::Mlp => {
                    let cc = by_id
                        .get(p.id.as_str())
                        .ok_or_else(|| SynthError::MissingCompletion(p.id.clone()))?;
                    (render_prompt(strategy, None, Some(&cc.completed_text))?, Some((*cc).clone()))
                }
            };
            Ok(PromptedSample {
                plan: p.clone(),
                prompt,
                completion,
            })
        })
        .collect()
}

/// Reads a manifest, ignoring a torn final line left by an interrupted write.
pub fn read_manifest(path: &Path) -> Result<Vec<SyntheticSample>, SynthError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(s) => out.push(s),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(source) => {
                return Err(SynthError::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })
            }
        }
    }
    Ok(out)
}

fn write_manifest(path: &Path, samples: &[SyntheticSample]) -> Result<(), SynthError> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut body = String::new();
    for s in samples {
        body.push_str(&serde_json::to_string(s).expect("sample serialises"));
        body.push('\n');
    }
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Synthetic samples of one strategy within a cell directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub cell_dir: PathBuf,
    pub strategy: PromptStrategy,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticSet {
    pub fn manifest_path(cell_dir: &Path, strategy: PromptStrategy) -> PathBuf {
        cell_dir.join(strategy.as_str()).join(MANIFEST_FILE)
    }

    pub fn load(cell_dir: &Path, strategy: PromptStrategy) -> Result<Self, SynthError> {
        Ok(Self {
            cell_dir: cell_dir.to_path_buf(),
            strategy,
            samples: read_manifest(&Self::manifest_path(cell_dir, strategy))?,
        })
    }

    pub fn absolute_path(&self, s: &SyntheticSample) -> PathBuf {
        self.cell_dir.join(&s.image_path)
    }

    pub fn by_style(&self) -> BTreeMap<StyleLabel, Vec<&SyntheticSample>> {
        let mut out: BTreeMap<StyleLabel, Vec<&SyntheticSample>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.label).or_default().push(s);
        }
        out
    }
}

/// Generates every prompted sample not already recorded in the manifest.
///
/// Work proceeds in chunks; each finished chunk is appended to the manifest
/// by this (single) writer, so an interrupted run can resume without
/// duplicating ids. On success the manifest is rewritten in plan order.
pub fn generate_plan(
    prompted: &[PromptedSample],
    strategy: PromptStrategy,
    t2i: &dyn T2IBackend,
    cfg: &GenConfig,
    cell_dir: &Path,
    max_in_flight: usize,
) -> Result<SyntheticSet, SynthError> {
    let manifest = SyntheticSet::manifest_path(cell_dir, strategy);
    let strategy_dir = cell_dir.join(strategy.as_str());
    fs::create_dir_all(&strategy_dir).map_err(io_err(&strategy_dir))?;

    let mut existing: HashMap<String, SyntheticSample> = HashMap::new();
    for s in read_manifest(&manifest)? {
        if cell_dir.join(&s.image_path).is_file() {
            existing.insert(s.id.clone(), s);
        }
    }
    // drop torn or stale lines before appending
    {
        let mut kept: Vec<SyntheticSample> = existing.values().cloned().collect();
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        write_manifest(&manifest, &kept)?;
    }
    let todo: Vec<&PromptedSample> = prompted.iter().filter(|p| !existing.contains_key(&p.plan.id)).collect();
    let chunk = (max_in_flight.max(1) * 8).max(1);
    let mut first_error = None;
    for batch in todo.chunks(chunk) {
        let results = parallel_map(batch, max_in_flight, |p| -> Result<SyntheticSample, SynthError> {
            let rel = PathBuf::from(strategy.as_str())
                .join(p.plan.label.as_str())
                .join(format!("{}.png", p.plan.id));
            generate_image(t2i, &p.prompt, cfg, p.plan.backend_seed, &cell_dir.join(&rel))?;
            Ok(SyntheticSample {
                id: p.plan.id.clone(),
                image_path: rel,
                label: p.plan.label,
                strategy,
                prompt: p.prompt.clone(),
                reference_id: p.plan.reference_id.clone(),
                completion: p.completion.clone(),
                backend_seed: p.plan.backend_seed,
            })
        });
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(io_err(&manifest))?;
        for r in results {
            match r {
                Ok(s) => {
                    let line = serde_json::to_string(&s).expect("sample serialises");
                    writeln!(file, "{line}").map_err(io_err(&manifest))?;
                    existing.insert(s.id.clone(), s);
                }
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
            }
        }
        if first_error.is_some() {
            break;
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let mut samples = Vec::with_capacity(prompted.len());
    for p in prompted {
        if let Some(s) = existing.remove(&p.plan.id) {
            samples.push(s);
        }
    }
    write_manifest(&manifest, &samples)?;
    Ok(SyntheticSet {
        cell_dir: cell_dir.to_path_buf(),
        strategy,
        samples,
    })
}

/// Everything [`run_augmentation`] needs besides the split and strategy.
pub struct AugmentContext<'a> {
    pub llm: &'a dyn LlmBackend,
    pub t2i: &'a dyn T2IBackend,
    pub tagger: &'a dyn Tagger,
    /// Reference image id to caption payload.
    pub captions: &'a HashMap<String, String>,
    pub mask_ratio: f64,
    pub completion: CompletionPolicy,
    pub log: &'a LlmLog,
    pub max_in_flight: usize,
    pub cell_dir: &'a Path,
}

/// Plan, mask, complete, render and generate for one strategy.
pub fn run_augmentation(
    split: &FewShotSplit,
    strategy: PromptStrategy,
    cfg: &GenConfig,
    ctx: &AugmentContext<'_>,
) -> Result<SyntheticSet, SynthError> {
    let plan = plan_samples(split, strategy, cfg)?;
    let completions = if strategy == PromptStrategy::Mlp {
        let masked = mask_plan(&plan, ctx.captions, ctx.tagger, ctx.mask_ratio)?;
        complete_plan(&masked, ctx.llm, &ctx.completion, ctx.log, ctx.max_in_flight)?
    } else {
        Vec::new()
    };
    let prompted = build_prompts(&plan, strategy, ctx.captions, &completions)?;
    generate_plan(&prompted, strategy, ctx.t2i, cfg, ctx.cell_dir, ctx.max_in_flight)
}
