//! Experiment configuration, stage orchestration and reports.
//!
//! Run layout under `<output_dir>/<run id>/`:
//!
//! ```text
//! dataset.index.json
//! test.embv1 (+ .manifest.json)
//! n<shot>_s<seed>/
//!     split.json  captions.jsonl  masked.jsonl  completions.jsonl  llm_log.jsonl
//!     <strategy>/manifest.jsonl  <strategy>/<style>/<sample id>.png
//!     train.embv1  val.embv1  synthetic.embv1
//!     probe_real_only.prbv1  probe_<strategy>.prbv1  history_*.json
//!     metrics.json  metrics.csv  word_freq_<style>.csv
//! report.json  report.csv  quality.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{parallel_map, BackendError, RetryPolicy};
use crate::corpus::{load_dataset, sample_few_shot, CorpusError, DatasetIndex, FewShotSplit, ImageRecord, StyleLabel, INDEX_FILE};
use crate::embed::{
    embed_images, load_embeddings, persist_embeddings, CachedProvider, EmbedError, EmbedItem, EmbedOptions, EmbedProvider,
    EmbeddingMatrix, FixtureProvider, HttpProvider, MockProvider, Origin, RowMeta,
};
use crate::lingua::{ExternalTagger, LexiconTagger, LinguaError, Tagger, DEFAULT_MASK_RATIO};
use crate::metrics::{
    accuracy, cmmd_report, diversity_groups, feature_distance, pairwise_diversity, ssim, word_frequencies, CmmdReport,
    DiversityMetric, DiversityReport, GrayImage, MetricsError, SsimParams,
};
use crate::probe::{load_checkpoint, save_checkpoint, train_probe, History, ProbeError, ProbeModel, TrainConfig};
use crate::promptkit::{
    caption_image, CaptionRecord, HttpLlm, LlmBackend, LlmBackendConfig, LlmExchange, LlmLog, MockLlm, PromptError,
    PromptStrategy, ReplayLlm,
};
use crate::rng::derive_seed;
use crate::synth::{
    build_prompts, complete_plan, generate_plan, mask_plan, plan_samples, CompletionEntry, CompletionPolicy, GenConfig,
    HttpT2I, MaskedEntry, MockT2I, SynthError, SyntheticSet, T2IBackend,
};

/// JSON schema every experiment config is validated against.
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const QUALITY_CSV: &str = "quality.csv";
pub const TEST_EMBEDDINGS: &str = "test.embv1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lingua(#[from] LinguaError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("missing {0}; run the {1} stage first")]
    MissingInput(PathBuf, &'static str),
    #[error("one or more cells failed; see report.json")]
    CellsFailed(i32),
    #[error("preprocessing {path} failed: {msg}")]
    Preprocess { path: PathBuf, msg: String },
    #[error("style {0}: no reference image has an accepted caption")]
    NoCaptionedReference(StyleLabel),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for backend failures, 4 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::CellsFailed(code) => *code,
            PipelineError::Backend(_)
            | PipelineError::Prompt(PromptError::Backend(_))
            | PipelineError::Synth(SynthError::Backend(_))
            | PipelineError::Embed(EmbedError::Backend(_))
            | PipelineError::Lingua(LinguaError::Tagger(_))
            | PipelineError::Preprocess { .. } => 3,
            _ => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2IConfig {
    pub endpoint: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for T2IConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_secs: 300,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedBackendConfig {
    pub endpoint: Option<String>,
    /// Pre-built `EMBV1` file keyed by image id.
    pub fixture: Option<PathBuf>,
    pub dim: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for EmbedBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            fixture: None,
            dim: 512,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggerConfig {
    /// Extra `word<TAB>TAG` entries layered over the built-in lexicon.
    pub lexicon: Option<PathBuf>,
    /// External line-protocol tagger; replaces the lexicon when set.
    pub program: Option<PathBuf>,
    pub args: Vec<String>,
}

/// External per-image command run on real images before embedding, invoked as
/// `program [args..] <input> <output>`; the output must be an image file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    /// Use the offline mock LLM, text-to-image model and embedder.
    pub mock: bool,
    pub mock_embed_dim: usize,
    pub mock_embed_sigma: f64,
    pub max_in_flight: usize,
    pub llm: LlmBackendConfig,
    /// Answer LLM requests from a recorded `llm_log.jsonl`.
    pub llm_replay: Option<PathBuf>,
    pub t2i: T2IConfig,
    pub embed: EmbedBackendConfig,
    pub tagger: TaggerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessConfig>,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            mock: false,
            mock_embed_dim: 32,
            mock_embed_sigma: 0.05,
            max_in_flight: 4,
            llm: LlmBackendConfig::default(),
            llm_replay: None,
            t2i: T2IConfig::default(),
            embed: EmbedBackendConfig::default(),
            tagger: TaggerConfig::default(),
            preprocess: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub ssim: bool,
    pub feature_distance: bool,
    pub cmmd_sigma: f64,
    pub cmmd_scale: f64,
    pub class_group_size: usize,
    pub ssim_params: SsimParams,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ssim: true,
            feature_distance: true,
            cmmd_sigma: 10.0,
            cmmd_scale: 1000.0,
            class_group_size: 32,
            ssim_params: SsimParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub run_id: Option<String>,
    pub strategy: PromptStrategy,
    pub n_shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub mask_ratio: f64,
    pub include_real_only: bool,
    pub exclude_styles: Vec<StyleLabel>,
    pub generation: GenConfig,
    pub training: TrainConfig,
    pub completion: CompletionPolicy,
    pub embedding: EmbedOptions,
    pub metrics: MetricsConfig,
    pub backends: BackendsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            run_id: None,
            strategy: PromptStrategy::Mlp,
            n_shots: vec![1],
            seeds: vec![0, 1, 2],
            mask_ratio: DEFAULT_MASK_RATIO,
            include_real_only: true,
            exclude_styles: StyleLabel::DEFAULT_EXCLUDE.to_vec(),
            generation: GenConfig::default(),
            training: TrainConfig::default(),
            completion: CompletionPolicy::default(),
            embedding: EmbedOptions::default(),
            metrics: MetricsConfig::default(),
            backends: BackendsConfig::default(),
        }
    }
}

/// Command-line overrides applied after schema validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<PromptStrategy>,
    pub n_shot: Option<usize>,
    pub seed: Option<u64>,
    pub mask_ratio: Option<f64>,
    pub mock: bool,
    pub resume: Option<String>,
}

impl ExperimentConfig {
    /// Validates `text` against [`SCHEMA`] and deserialises it.
    pub fn from_json_str(text: &str) -> Result<Self, PipelineError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("invalid JSON: {e}")))?;
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("bundled schema parses");
        let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
        let problems: Vec<String> = validator
            .iter_errors(&value)
            .map(|e| {
                let at = e.instance_path.to_string();
                if at.is_empty() {
                    e.to_string()
                } else {
                    format!("{at}: {e}")
                }
            })
            .collect();
        if !problems.is_empty() {
            return Err(PipelineError::Config(problems.join("; ")));
        }
        serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), PipelineError> {
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(n) = o.n_shot {
            if !crate::corpus::SHOT_SETTINGS.contains(&n) {
                return Err(PipelineError::Config(format!("--n-shot must be one of 1, 2, 4, 8, 16, got {n}")));
            }
            self.n_shots = vec![n];
        }
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(r) = o.mask_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(PipelineError::Config(format!("--mask-ratio must lie in [0, 1], got {r}")));
            }
            self.mask_ratio = r;
        }
        if o.mock {
            self.backends.mock = true;
        }
        if let Some(id) = &o.resume {
            self.run_id = Some(id.clone());
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output location is excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run_id = None;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.strategy, &self.digest()[..12]))
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.n_shots
            .iter()
            .flat_map(|&n_shot| self.seeds.iter().map(move |&seed| Cell { n_shot, seed }))
            .collect()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            root: self.output_dir.join(self.run_id()),
        }
    }
}

/// One (n_shot, seed) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub n_shot: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("n{}_s{}", self.n_shot, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn index_path(&self) -> PathBuf {
        self.root.join(INDEX_FILE)
    }

    pub fn test_embeddings(&self) -> PathBuf {
        self.root.join(TEST_EMBEDDINGS)
    }

    pub fn cell_dir(&self, cell: Cell) -> PathBuf {
        self.root.join(cell.dir_name())
    }
}

/// Live backend handles for a run.
pub struct Backends {
    pub llm: Box<dyn LlmBackend>,
    pub t2i: Box<dyn T2IBackend>,
    pub embed: Box<dyn EmbedProvider>,
    pub tagger: Box<dyn Tagger>,
}

impl Backends {
    pub fn from_config(cfg: &BackendsConfig) -> Result<Self, PipelineError> {
        let tagger: Box<dyn Tagger> = match (&cfg.tagger.program, &cfg.tagger.lexicon) {
            (Some(program), _) => Box::new(ExternalTagger {
                program: program.clone(),
                args: cfg.tagger.args.clone(),
            }),
            (None, Some(path)) => {
                let mut lex = LexiconTagger::builtin();
                lex.extend(LexiconTagger::from_file(path).map_err(|e| PipelineError::Config(e.to_string()))?);
                Box::new(lex)
            }
            (None, None) => Box::new(LexiconTagger::builtin()),
        };
        if cfg.mock {
            let provider = MockProvider::new(cfg.mock_embed_dim, cfg.mock_embed_sigma)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            return Ok(Self {
                llm: Box::new(MockLlm),
                t2i: Box::new(MockT2I),
                embed: Box::new(CachedProvider::new(provider)),
                tagger,
            });
        }
        let llm: Box<dyn LlmBackend> = match &cfg.llm_replay {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
                Box::new(ReplayLlm::from_jsonl(&text).map_err(|e| PipelineError::Config(e.to_string()))?)
            }
            None => Box::new(HttpLlm::new(cfg.llm.clone())?),
        };
        if cfg.t2i.endpoint.is_empty() {
            return Err(PipelineError::Config(
                "backends.t2i.endpoint is required unless mock backends are enabled".into(),
            ));
        }
        let t2i = Box::new(HttpT2I::new(
            &cfg.t2i.endpoint,
            cfg.t2i.retry,
            Duration::from_secs(cfg.t2i.timeout_secs),
        )?);
        let e = &cfg.embed;
        let embed: Box<dyn EmbedProvider> = match (&e.fixture, &e.endpoint) {
            (Some(path), _) => Box::new(FixtureProvider::from_file(path).map_err(|err| PipelineError::Config(err.to_string()))?),
            (None, Some(endpoint)) => Box::new(CachedProvider::new(HttpProvider::new(
                endpoint,
                e.dim,
                e.retry,
                Duration::from_secs(e.timeout_secs),
            )?)),
            (None, None) => {
                return Err(PipelineError::Config(
                    "backends.embed needs an endpoint or a fixture unless mock backends are enabled".into(),
                ))
            }
        };
        Ok(Self { llm, t2i, embed, tagger })
    }
}

// ---------------------------------------------------------------------------
// File helpers

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.to_path_buf(), stage));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("item serialises"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<Vec<T>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.to_path_buf(), stage));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| PipelineError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Replaces this stage's entries (by request id prefix) in the cell's LLM log.
fn merge_llm_log(path: &Path, prefix: &str, log: &LlmLog) -> Result<(), PipelineError> {
    let mut entries: Vec<LlmExchange> = if path.exists() {
        read_jsonl(path, "llm")?
    } else {
        Vec::new()
    };
    entries.retain(|e| !e.request_id.starts_with(prefix));
    entries.extend(log.entries());
    entries.sort_by(|a, b| (&a.request_id, a.attempt).cmp(&(&b.request_id, b.attempt)));
    write_jsonl(path, &entries)
}

// ---------------------------------------------------------------------------
// Run-level stages

/// Indexes the dataset and writes `dataset.index.json`.
pub fn stage_index(cfg: &ExperimentConfig, ws: &Workspace) -> Result<DatasetIndex, PipelineError> {
    let index = load_dataset(&cfg.dataset_root, &cfg.exclude_styles)?;
    fs::create_dir_all(&ws.root).map_err(io_err(&ws.root))?;
    index.save(&ws.index_path())?;
    Ok(index)
}

pub fn load_index(ws: &Workspace) -> Result<DatasetIndex, PipelineError> {
    let path = ws.index_path();
    if !path.exists() {
        return Err(PipelineError::MissingInput(path, "index"));
    }
    Ok(DatasetIndex::load(&path)?)
}

pub const PREPROCESSED_DIR: &str = "preprocessed";

/// Runs the preprocessing command for `rec` unless its output already exists.
fn preprocess_one(pre: &PreprocessConfig, rec: &ImageRecord, ws: &Workspace) -> Result<PathBuf, PipelineError> {
    let out = ws.root.join(PREPROCESSED_DIR).join(format!("{}.png", rec.id));
    if out.exists() {
        return Ok(out);
    }
    let parent = out.parent().expect("output has a parent");
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = out.with_extension("partial.png");
    let status = std::process::Command::new(&pre.program)
        .args(&pre.args)
        .arg(&rec.path)
        .arg(&tmp)
        .stdin(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| PipelineError::Preprocess {
            path: rec.path.clone(),
            msg: format!("cannot run {}: {e}", pre.program.display()),
        })?;
    if !status.success() || !tmp.exists() {
        return Err(PipelineError::Preprocess {
            path: rec.path.clone(),
            msg: format!("{} exited with {status}", pre.program.display()),
        });
    }
    fs::rename(&tmp, &out).map_err(io_err(&out))?;
    Ok(out)
}

fn real_items<'a>(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    records: impl IntoIterator<Item = &'a ImageRecord>,
) -> Result<Vec<EmbedItem>, PipelineError> {
    let records: Vec<&ImageRecord> = records.into_iter().collect();
    let paths: Vec<PathBuf> = match &cfg.backends.preprocess {
        Some(pre) => parallel_map(&records, cfg.backends.max_in_flight.max(1), |r| preprocess_one(pre, r, ws))
            .into_iter()
            .collect::<Result<_, _>>()?,
        None => records.iter().map(|r| r.path.clone()).collect(),
    };
    Ok(records
        .iter()
        .zip(paths)
        .map(|(r, path)| EmbedItem {
            meta: RowMeta {
                id: r.id.clone(),
                label: r.label,
                origin: Origin::Real,
            },
            path,
        })
        .collect())
}

fn embed_opts(cfg: &ExperimentConfig) -> EmbedOptions {
    EmbedOptions {
        max_in_flight: cfg.embedding.max_in_flight.max(cfg.backends.max_in_flight),
        ..cfg.embedding
    }
}

/// Embeds the full test partition once per run.
pub fn stage_embed_test(
    cfg: &ExperimentConfig,
    backends: &Backends,
    index: &DatasetIndex,
    ws: &Workspace,
) -> Result<EmbeddingMatrix, PipelineError> {
    let m = embed_images(backends.embed.as_ref(), &real_items(cfg, ws, index.test())?, &embed_opts(cfg))?;
    persist_embeddings(&m, &ws.test_embeddings())?;
    Ok(m)
}

pub fn load_test_embeddings(ws: &Workspace) -> Result<EmbeddingMatrix, PipelineError> {
    let path = ws.test_embeddings();
    if !path.exists() {
        return Err(PipelineError::MissingInput(path, "embed"));
    }
    Ok(load_embeddings(&path)?)
}

// ---------------------------------------------------------------------------
// Cell stages

/// Stage runner for one (n_shot, seed) cell.
pub struct CellCtx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub backends: &'a Backends,
    pub cell: Cell,
    pub dir: PathBuf,
    /// Reuse stage outputs that already exist.
    pub resume: bool,
}

/// Probe results for one training variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub model: ProbeModel,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub real_only: Option<TrainedProbe>,
    pub augmented: Option<TrainedProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub n_shot: usize,
    pub seed: u64,
    pub strategy: PromptStrategy,
    pub test_size: usize,
    pub synthetic_count: usize,
    pub real_only: Option<VariantResult>,
    pub augmented: Option<VariantResult>,
    /// Share of completions the validator accepted.
    pub completion_acceptance: Option<f64>,
    pub ssim: Option<DiversityReport>,
    pub feature_distance: Option<DiversityReport>,
    pub cmmd: Option<CmmdReport>,
}

const REAL_ONLY: &str = "real_only";

impl<'a> CellCtx<'a> {
    pub fn new(cfg: &'a ExperimentConfig, backends: &'a Backends, cell: Cell, resume: bool) -> Self {
        Self {
            cfg,
            backends,
            cell,
            dir: cfg.workspace().cell_dir(cell),
            resume,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn reuse(&self, name: &str) -> bool {
        self.resume && self.path(name).exists()
    }

    /// Generation seed for this cell; independent of n_shot so the class
    /// strategy yields the same images at every shot count.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: derive_seed(self.cfg.generation.seed, &["generate", &self.cell.seed.to_string()]),
            ..self.cfg.generation.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(
                self.cfg.training.seed,
                &["train", &self.cell.n_shot.to_string(), &self.cell.seed.to_string()],
            ),
            ..self.cfg.training.clone()
        }
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.backends.max_in_flight.max(1)
    }

    pub fn sample(&self, index: &DatasetIndex) -> Result<FewShotSplit, PipelineError> {
        if self.reuse("split.json") {
            return self.load_split();
        }
        let split = sample_few_shot(index, self.cell.n_shot, self.cell.seed)?;
        write_json(&self.path("split.json"), &split)?;
        Ok(split)
    }

    pub fn load_split(&self) -> Result<FewShotSplit, PipelineError> {
        read_json(&self.path("split.json"), "sample")
    }

    /// Captions every training reference. Only needed by reference-driven strategies.
    pub fn caption(&self, split: &FewShotSplit) -> Result<Vec<CaptionRecord>, PipelineError> {
        if self.reuse("captions.jsonl") {
            return self.load_captions();
        }
        let log = LlmLog::new();
        let results = parallel_map(&split.train, self.cfg.backends.llm.max_in_flight.max(1), |r| {
            caption_image(self.backends.llm.as_ref(), r, &log)
        });
        let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        for r in &records {
            if r.caption().is_none() {
                log::warn!("caption for {} rejected after retry", r.image_id);
            }
        }
        write_jsonl(&self.path("captions.jsonl"), &records)?;
        merge_llm_log(&self.path("llm_log.jsonl"), "caption:", &log)?;
        Ok(records)
    }

    pub fn load_captions(&self) -> Result<Vec<CaptionRecord>, PipelineError> {
        read_jsonl(&self.path("captions.jsonl"), "caption")
    }

    /// The split restricted to references with accepted captions.
    pub fn captioned_split(
        &self,
        split: &FewShotSplit,
        captions: &[CaptionRecord],
    ) -> Result<(FewShotSplit, HashMap<String, String>), PipelineError> {
        let map: HashMap<String, String> = captions
            .iter()
            .filter_map(|c| c.caption().map(|t| (c.image_id.clone(), t.to_string())))
            .collect();
        let mut out = split.clone();
        out.train.retain(|r| map.contains_key(&r.id));
        for style in split.styles() {
            if out.train_for(style).is_empty() {
                return Err(PipelineError::NoCaptionedReference(style));
            }
        }
        Ok((out, map))
    }

    pub fn mask(&self, split: &FewShotSplit, captions: &[CaptionRecord]) -> Result<Vec<MaskedEntry>, PipelineError> {
        if self.reuse("masked.jsonl") {
            return self.load_masked();
        }
        let (refs, map) = self.captioned_split(split, captions)?;
        let plan = plan_samples(&refs, PromptStrategy::Mlp, &self.gen_config())?;
        let masked = mask_plan(&plan, &map, self.backends.tagger.as_ref(), self.cfg.mask_ratio)?;
        write_jsonl(&self.path("masked.jsonl"), &masked)?;
        Ok(masked)
    }

    pub fn load_masked(&self) -> Result<Vec<MaskedEntry>, PipelineError> {
        read_jsonl(&self.path("masked.jsonl"), "mask")
    }

    pub fn complete(&self, masked: &[MaskedEntry]) -> Result<Vec<CompletionEntry>, PipelineError> {
        if self.reuse("completions.jsonl") {
            return self.load_completions();
        }
        let log = LlmLog::new();
        let completions = complete_plan(
            masked,
            self.backends.llm.as_ref(),
            &self.cfg.completion,
            &log,
            self.cfg.backends.llm.max_in_flight.max(1),
        );
        merge_llm_log(&self.path("llm_log.jsonl"), "fill:", &log)?;
        let completions = completions?;
        write_jsonl(&self.path("completions.jsonl"), &completions)?;
        Ok(completions)
    }

    pub fn load_completions(&self) -> Result<Vec<CompletionEntry>, PipelineError> {
        read_jsonl(&self.path("completions.jsonl"), "complete")
    }

    /// Generates the synthetic set. Without `resume` any previous manifest of
    /// this strategy is discarded first.
    pub fn generate(
        &self,
        split: &FewShotSplit,
        captions: &[CaptionRecord],
        completions: &[CompletionEntry],
    ) -> Result<SyntheticSet, PipelineError> {
        let strategy = self.cfg.strategy;
        let manifest = SyntheticSet::manifest_path(&self.dir, strategy);
        if !self.resume && manifest.exists() {
            fs::remove_file(&manifest).map_err(io_err(&manifest))?;
        }
        let (refs, map) = if strategy.needs_reference() {
            self.captioned_split(split, captions)?
        } else {
            (split.clone(), HashMap::new())
        };
        let gen = self.gen_config();
        let plan = plan_samples(&refs, strategy, &gen)?;
        let prompted = build_prompts(&plan, strategy, &map, completions)?;
        Ok(generate_plan(
            &prompted,
            strategy,
            self.backends.t2i.as_ref(),
            &gen,
            &self.dir,
            self.max_in_flight(),
        )?)
    }

    pub fn load_synthetic(&self) -> Result<SyntheticSet, PipelineError> {
        let path = SyntheticSet::manifest_path(&self.dir, self.cfg.strategy);
        if !path.exists() {
            return Err(PipelineError::MissingInput(path, "generate"));
        }
        Ok(SyntheticSet::load(&self.dir, self.cfg.strategy)?)
    }

    fn embed_to(&self, name: &str, items: &[EmbedItem]) -> Result<EmbeddingMatrix, PipelineError> {
        let path = self.path(name);
        if self.reuse(name) {
            return Ok(load_embeddings(&path)?);
        }
        let m = embed_images(self.backends.embed.as_ref(), items, &embed_opts(self.cfg))?;
        persist_embeddings(&m, &path)?;
        Ok(m)
    }

    /// Embeds the few-shot train and val images and the synthetic set.
    pub fn embed(
        &self,
        split: &FewShotSplit,
        syn: &SyntheticSet,
    ) -> Result<(EmbeddingMatrix, EmbeddingMatrix, EmbeddingMatrix), PipelineError> {
        let ws = self.cfg.workspace();
        let train = self.embed_to("train.embv1", &real_items(self.cfg, &ws, &split.train)?)?;
        let val = self.embed_to("val.embv1", &real_items(self.cfg, &ws, &split.val)?)?;
        let syn_items: Vec<EmbedItem> = syn
            .samples
            .iter()
            .map(|s| EmbedItem {
                meta: RowMeta {
                    id: s.id.clone(),
                    label: s.label,
                    origin: Origin::Synthetic,
                },
                path: syn.absolute_path(s),
            })
            .collect();
        let synthetic = self.embed_to("synthetic.embv1", &syn_items)?;
        Ok((train, val, synthetic))
    }

    pub fn load_cell_embeddings(&self) -> Result<(EmbeddingMatrix, EmbeddingMatrix, EmbeddingMatrix), PipelineError> {
        let load = |name: &str| -> Result<EmbeddingMatrix, PipelineError> {
            let p = self.path(name);
            if !p.exists() {
                return Err(PipelineError::MissingInput(p, "embed"));
            }
            Ok(load_embeddings(&p)?)
        };
        Ok((load("train.embv1")?, load("val.embv1")?, load("synthetic.embv1")?))
    }

    fn save_probe(&self, variant: &str, p: &TrainedProbe, cfg: &TrainConfig) -> Result<(), PipelineError> {
        save_checkpoint(&p.model, cfg, p.history.best_epoch, &self.path(&format!("probe_{variant}.prbv1")))?;
        write_json(&self.path(&format!("history_{variant}.json")), &p.history)
    }

    /// Trains the Real Only baseline (if enabled) and the augmented probe.
    pub fn train(
        &self,
        classes: &[StyleLabel],
        train: &EmbeddingMatrix,
        val: &EmbeddingMatrix,
        syn: &EmbeddingMatrix,
    ) -> Result<TrainOutcome, PipelineError> {
        let cfg = self.train_config();
        let mut out = TrainOutcome::default();
        if self.cfg.include_real_only {
            let (model, history) = train_probe(train, None, val, classes, &cfg)?;
            let p = TrainedProbe { model, history };
            self.save_probe(REAL_ONLY, &p, &cfg)?;
            out.real_only = Some(p);
        }
        if syn.n > 0 {
            let (model, history) = train_probe(train, Some(syn), val, classes, &cfg)?;
            let p = TrainedProbe { model, history };
            self.save_probe(self.cfg.strategy.as_str(), &p, &cfg)?;
            out.augmented = Some(p);
        } else {
            log::warn!("{}: no synthetic samples; augmented probe skipped", self.cell.dir_name());
        }
        Ok(out)
    }

    pub fn load_trained(&self) -> Result<TrainOutcome, PipelineError> {
        let load = |variant: &str| -> Result<Option<TrainedProbe>, PipelineError> {
            let p = self.path(&format!("probe_{variant}.prbv1"));
            if !p.exists() {
                return Ok(None);
            }
            let (model, _) = load_checkpoint(&p)?;
            let history = read_json(&self.path(&format!("history_{variant}.json")), "train")?;
            Ok(Some(TrainedProbe { model, history }))
        };
        let out = TrainOutcome {
            real_only: load(REAL_ONLY)?,
            augmented: load(self.cfg.strategy.as_str())?,
        };
        if out.real_only.is_none() && out.augmented.is_none() {
            return Err(PipelineError::MissingInput(self.path("probe_*.prbv1"), "train"));
        }
        Ok(out)
    }

    /// Scores the probes on the test set and computes the synthetic-set metrics.
    pub fn evaluate(
        &self,
        classes: &[StyleLabel],
        test: &EmbeddingMatrix,
        trained: &TrainOutcome,
        syn: &SyntheticSet,
        syn_emb: &EmbeddingMatrix,
    ) -> Result<CellMetrics, PipelineError> {
        let truth = test.labels();
        let score = |p: &TrainedProbe| -> Result<VariantResult, PipelineError> {
            Ok(VariantResult {
                accuracy: accuracy(&p.model.predict(test)?, &truth)?,
                best_epoch: p.history.best_epoch,
                epochs_run: p.history.epochs.len(),
            })
        };
        let mc = &self.cfg.metrics;
        let completions: Vec<_> = syn.samples.iter().filter_map(|s| s.completion.as_ref()).collect();
        let completion_acceptance = (!completions.is_empty()).then(|| {
            completions.iter().filter(|c| c.validation.is_accepted()).count() as f64 / completions.len() as f64
        });

        let groups = diversity_groups(&syn.samples, self.cfg.strategy, mc.class_group_size);
        let ssim_report = if mc.ssim && !syn.samples.is_empty() {
            self.ssim_diversity(syn, &groups)?
        } else {
            None
        };
        let feature_report = if mc.feature_distance && syn_emb.n > 0 {
            let rows: HashMap<&str, &[f32]> = syn_emb
                .manifest
                .iter()
                .enumerate()
                .map(|(i, m)| (m.id.as_str(), syn_emb.row(i)))
                .collect();
            let vec_groups: Vec<(String, Vec<&[f32]>)> = groups
                .iter()
                .map(|(k, items)| (k.clone(), items.iter().filter_map(|s| rows.get(s.id.as_str()).copied()).collect()))
                .collect();
            Some(pairwise_diversity(&vec_groups, DiversityMetric::FeatureDistance, |a, b| {
                feature_distance(a, b)
            }))
        } else {
            None
        };
        let cmmd = if syn_emb.n > 0 {
            Some(cmmd_report(syn_emb, test, classes, mc.cmmd_sigma, mc.cmmd_scale)?)
        } else {
            None
        };

        let metrics = CellMetrics {
            n_shot: self.cell.n_shot,
            seed: self.cell.seed,
            strategy: self.cfg.strategy,
            test_size: test.n,
            synthetic_count: syn.samples.len(),
            real_only: trained.real_only.as_ref().map(score).transpose()?,
            augmented: trained.augmented.as_ref().map(score).transpose()?,
            completion_acceptance,
            ssim: ssim_report,
            feature_distance: feature_report,
            cmmd,
        };
        write_json(&self.path("metrics.json"), &metrics)?;
        write_text(&self.path("metrics.csv"), &metrics_csv(&metrics))?;

        let mut by_style: BTreeMap<StyleLabel, Vec<_>> = BTreeMap::new();
        for s in &syn.samples {
            if let Some(c) = &s.completion {
                by_style.entry(s.label).or_default().push(c);
            }
        }
        for (style, cs) in by_style {
            let table = word_frequencies(cs);
            write_text(&self.path(&format!("word_freq_{style}.csv")), &table.to_csv())?;
        }
        Ok(metrics)
    }

    fn ssim_diversity(
        &self,
        syn: &SyntheticSet,
        groups: &[(String, Vec<&crate::synth::SyntheticSample>)],
    ) -> Result<Option<DiversityReport>, PipelineError> {
        let params = self.cfg.metrics.ssim_params;
        let mut parts = Vec::new();
        for (key, items) in groups {
            let images = parallel_map(items, self.max_in_flight(), |s| GrayImage::load(&syn.absolute_path(s)));
            let images = images.into_iter().collect::<Result<Vec<_>, _>>()?;
            if let Some(first) = images.first() {
                if (first.width as usize) < params.win_size || (first.height as usize) < params.win_size {
                    log::warn!("synthetic images smaller than the SSIM window; SSIM skipped");
                    return Ok(None);
                }
                if let Some(bad) = images.iter().find(|i| (i.width, i.height) != (first.width, first.height)) {
                    return Err(MetricsError::SizeMismatch(first.width, first.height, bad.width, bad.height).into());
                }
            }
            let group = vec![(key.clone(), images)];
            parts.push(pairwise_diversity(&group, DiversityMetric::Ssim, |a, b| {
                ssim(a, b, &params).expect("sizes checked above")
            }));
        }
        Ok(Some(DiversityReport::combine(DiversityMetric::Ssim, parts)))
    }

    pub fn load_metrics(&self) -> Result<CellMetrics, PipelineError> {
        read_json(&self.path("metrics.json"), "evaluate")
    }

    /// Every stage in order, reusing outputs when resuming.
    pub fn run(&self, index: &DatasetIndex, test: &EmbeddingMatrix) -> Result<CellMetrics, PipelineError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let classes = index.run_styles();
        let split = self.sample(index)?;
        let strategy = self.cfg.strategy;
        let captions = if strategy.needs_reference() {
            self.caption(&split)?
        } else {
            Vec::new()
        };
        let completions = if strategy == PromptStrategy::Mlp {
            let masked = self.mask(&split, &captions)?;
            self.complete(&masked)?
        } else {
            Vec::new()
        };
        let syn = self.generate(&split, &captions, &completions)?;
        let (train, val, syn_emb) = self.embed(&split, &syn)?;
        let trained = self.train(&classes, &train, &val, &syn_emb)?;
        self.evaluate(&classes, test, &trained, &syn, &syn_emb)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metrics_csv(m: &CellMetrics) -> String {
    let rows = [
        ("real_only_accuracy", m.real_only.as_ref().map(|v| v.accuracy)),
        ("augmented_accuracy", m.augmented.as_ref().map(|v| v.accuracy)),
        ("completion_acceptance", m.completion_acceptance),
        ("ssim", m.ssim.as_ref().and_then(|r| r.global_mean)),
        ("feature_distance", m.feature_distance.as_ref().and_then(|r| r.global_mean)),
        ("cmmd", m.cmmd.as_ref().map(|r| r.mean)),
    ];
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{}\n", opt(v)));
    }
    out
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellState {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub n_shot: usize,
    pub seed: u64,
    pub status: CellState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
}

/// Accuracy per seed and the mean over successful seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub n_shot: usize,
    pub per_seed: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Seed-averaged synthetic-set quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub strategy: PromptStrategy,
    pub n_shot: usize,
    pub ssim: Option<f64>,
    pub feature_distance: Option<f64>,
    pub cmmd: Option<f64>,
    pub completion_acceptance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub run_id: String,
    pub strategy: PromptStrategy,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<AccuracyRow>,
    pub quality: Vec<QualityRow>,
    pub cells: Vec<CellStatus>,
}

impl ReportBundle {
    pub fn failed(&self) -> Vec<&CellStatus> {
        self.cells.iter().filter(|c| c.status == CellState::Failed).collect()
    }
}

pub fn method_name(strategy: PromptStrategy) -> &'static str {
    match strategy {
        PromptStrategy::Class => "Class",
        PromptStrategy::Caption => "Caption",
        PromptStrategy::Mlp => "MLP",
    }
}

fn mean_of(vals: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.into_iter().flatten().collect();
    (!v.is_empty()).then(|| crate::metrics::pairwise_sum(&v) / v.len() as f64)
}

/// Assembles the run report from per-cell results.
pub fn build_report(cfg: &ExperimentConfig, results: &[(Cell, Result<CellMetrics, String>, Option<i32>)]) -> ReportBundle {
    let get = |n: usize, s: u64| {
        results
            .iter()
            .find(|(c, _, _)| c.n_shot == n && c.seed == s)
            .and_then(|(_, r, _)| r.as_ref().ok())
    };
    let mut accuracy = Vec::new();
    let mut quality = Vec::new();
    for &n in &cfg.n_shots {
        let mut methods: Vec<(String, Box<dyn Fn(&CellMetrics) -> Option<f64>>)> = Vec::new();
        if cfg.include_real_only {
            methods.push(("Real Only".into(), Box::new(|m| m.real_only.as_ref().map(|v| v.accuracy))));
        }
        methods.push((
            method_name(cfg.strategy).into(),
            Box::new(|m| m.augmented.as_ref().map(|v| v.accuracy)),
        ));
        for (method, f) in &methods {
            let per_seed: Vec<Option<f64>> = cfg.seeds.iter().map(|&s| get(n, s).and_then(|m| f(m))).collect();
            accuracy.push(AccuracyRow {
                method: method.clone(),
                n_shot: n,
                mean: mean_of(per_seed.iter().copied()),
                per_seed,
            });
        }
        let cells: Vec<&CellMetrics> = cfg.seeds.iter().filter_map(|&s| get(n, s)).collect();
        quality.push(QualityRow {
            strategy: cfg.strategy,
            n_shot: n,
            ssim: mean_of(cells.iter().map(|m| m.ssim.as_ref().and_then(|r| r.global_mean))),
            feature_distance: mean_of(cells.iter().map(|m| m.feature_distance.as_ref().and_then(|r| r.global_mean))),
            cmmd: mean_of(cells.iter().map(|m| m.cmmd.as_ref().map(|r| r.mean))),
            completion_acceptance: mean_of(cells.iter().map(|m| m.completion_acceptance)),
        });
    }
    let cells = results
        .iter()
        .map(|(c, r, code)| CellStatus {
            n_shot: c.n_shot,
            seed: c.seed,
            status: if r.is_ok() { CellState::Ok } else { CellState::Failed },
            error: r.as_ref().err().cloned(),
            exit_code: *code,
        })
        .collect();
    ReportBundle {
        run_id: cfg.run_id(),
        strategy: cfg.strategy,
        config_digest: cfg.digest(),
        seeds: cfg.seeds.clone(),
        accuracy,
        quality,
        cells,
    }
}

pub fn report_csv(r: &ReportBundle) -> String {
    let mut out = String::from("method,n_shot");
    for s in &r.seeds {
        out.push_str(&format!(",seed_{s}"));
    }
    out.push_str(",mean\n");
    for row in &r.accuracy {
        out.push_str(&format!("{},{}", row.method, row.n_shot));
        for v in &row.per_seed {
            out.push_str(&format!(",{}", opt(*v)));
        }
        out.push_str(&format!(",{}\n", opt(row.mean)));
    }
    out
}

pub fn quality_csv(r: &ReportBundle) -> String {
    let mut out = String::from("strategy,n_shot,ssim,feature_distance,cmmd,completion_acceptance\n");
    for q in &r.quality {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            method_name(q.strategy),
            q.n_shot,
            opt(q.ssim),
            opt(q.feature_distance),
            opt(q.cmmd),
            opt(q.completion_acceptance)
        ));
    }
    out
}

pub fn write_report(ws: &Workspace, report: &ReportBundle) -> Result<(), PipelineError> {
    write_json(&ws.root.join(REPORT_JSON), report)?;
    write_text(&ws.root.join(REPORT_CSV), &report_csv(report))?;
    write_text(&ws.root.join(QUALITY_CSV), &quality_csv(report))
}

/// Builds the report from the `metrics.json` files already on disk.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<ReportBundle, PipelineError> {
    let ws = cfg.workspace();
    let results: Vec<_> = cfg
        .cells()
        .into_iter()
        .map(|cell| {
            let path = ws.cell_dir(cell).join("metrics.json");
            match read_json::<CellMetrics>(&path, "evaluate") {
                Ok(m) => (cell, Ok(m), None),
                Err(e) => {
                    let code = e.exit_code();
                    (cell, Err(scrub(&e.to_string(), cfg, &ws)), Some(code))
                }
            }
        })
        .collect();
    let report = build_report(cfg, &results);
    write_report(&ws, &report)?;
    Ok(report)
}

/// Keeps absolute locations out of the report.
fn scrub(msg: &str, cfg: &ExperimentConfig, ws: &Workspace) -> String {
    let mut out = msg.to_string();
    for (p, tag) in [(&ws.root, "<run>"), (&cfg.dataset_root, "<dataset>")] {
        let s = p.display().to_string();
        if !s.is_empty() {
            out = out.replace(&s, tag);
        }
    }
    out
}

/// Runs every cell; a failing cell is recorded and the others continue.
/// Errors are returned only for run-level stages (indexing, test embeddings).
pub fn run_experiment(cfg: &ExperimentConfig, backends: &Backends, resume: bool) -> Result<ReportBundle, PipelineError> {
    let ws = cfg.workspace();
    let index = if resume && ws.index_path().exists() {
        load_index(&ws)?
    } else {
        stage_index(cfg, &ws)?
    };
    for w in &index.warnings {
        log::warn!("{w}");
    }
    let test = if resume && ws.test_embeddings().exists() {
        load_test_embeddings(&ws)?
    } else {
        stage_embed_test(cfg, backends, &index, &ws)?
    };
    let mut results = Vec::new();
    for cell in cfg.cells() {
        log::info!("cell {}", cell.dir_name());
        let ctx = CellCtx::new(cfg, backends, cell, resume);
        match ctx.run(&index, &test) {
            Ok(m) => results.push((cell, Ok(m), None)),
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.dir_name());
                results.push((cell, Err(scrub(&e.to_string(), cfg, &ws)), Some(e.exit_code())));
            }
        }
    }
    let report = build_report(cfg, &results);
    write_report(&ws, &report)?;
    Ok(report)
}
