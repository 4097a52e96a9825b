//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::corpus::StyleLabel;
use crate::mock::{write_mock_dataset, MockCounts};
use crate::pipeline::{
    load_index, load_test_embeddings, run_experiment, stage_embed_test, stage_index, stage_report, Backends, CellCtx,
    ExperimentConfig, Overrides, PipelineError,
};
use crate::promptkit::PromptStrategy;

#[derive(Debug, Parser)]
#[command(name = "maskprompt", version, about = "Masked caption prompting for few-shot style augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<PromptStrategy>,
    #[arg(long)]
    pub n_shot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Offline mock backends.
    #[arg(long)]
    pub mock: bool,
    /// Continue an existing run, reusing finished outputs.
    #[arg(long, value_name = "RUN_ID")]
    pub resume: Option<String>,
}

fn parse_strategy(s: &str) -> Result<PromptStrategy, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index the dataset tree.
    Index(Common),
    /// Draw the few-shot train/val split for each cell.
    Sample(Common),
    /// Caption the training references.
    Caption(Common),
    /// Mask nouns and adjectives in the captions.
    Mask(Common),
    /// Have the LLM fill the masks.
    Complete(Common),
    /// Render synthetic images.
    Generate(Common),
    /// Embed test, train, val and synthetic images.
    Embed(Common),
    /// Train the probes.
    Train(Common),
    /// Score probes and compute synthetic-set metrics.
    Evaluate(Common),
    /// Aggregate cell metrics into report.json and report.csv.
    Report(Common),
    /// All stages for every cell.
    Run(Common),
    /// Write a small mock dataset.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        val: usize,
        #[arg(long, default_value_t = 3)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        strategy: c.strategy,
        n_shot: c.n_shot,
        seed: c.seed,
        mask_ratio: c.mask_ratio,
        mock: c.mock,
        resume: c.resume.clone(),
    })?;
    Ok(cfg)
}

/// Runs a stage over every cell, stopping at the first failure.
fn each_cell(
    cfg: &ExperimentConfig,
    backends: &Backends,
    resume: bool,
    mut f: impl FnMut(&CellCtx) -> Result<String, PipelineError>,
) -> Result<(), PipelineError> {
    for cell in cfg.cells() {
        let ctx = CellCtx::new(cfg, backends, cell, resume);
        let msg = f(&ctx)?;
        println!("{}: {msg}", cell.dir_name());
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), PipelineError> {
    let common = match &cli.command {
        Command::Fixture {
            out,
            train,
            val,
            test,
            size,
            seed,
        } => {
            let counts = MockCounts {
                train: *train,
                val: *val,
                test: *test,
            };
            let n = write_mock_dataset(out, &StyleLabel::ALL, counts, *size, *seed).map_err(|source| PipelineError::Io {
                path: out.clone(),
                source,
            })?;
            println!("wrote {n} images under {}", out.display());
            return Ok(());
        }
        Command::Index(c)
        | Command::Sample(c)
        | Command::Caption(c)
        | Command::Mask(c)
        | Command::Complete(c)
        | Command::Generate(c)
        | Command::Embed(c)
        | Command::Train(c)
        | Command::Evaluate(c)
        | Command::Report(c)
        | Command::Run(c) => c.clone(),
    };
    let cfg = load_config(&common)?;
    let ws = cfg.workspace();
    let resume = common.resume.is_some();
    let run_id = cfg.run_id();

    if let Command::Index(_) = cli.command {
        let index = stage_index(&cfg, &ws)?;
        for w in &index.warnings {
            log::warn!("{w}");
        }
        println!("{run_id}: indexed {} images", index.records.len());
        return Ok(());
    }
    if let Command::Report(_) = cli.command {
        let report = stage_report(&cfg)?;
        println!("{run_id}: report written to {}", ws.root.display());
        return finish(report.failed().first().and_then(|c| c.exit_code));
    }

    let backends = Backends::from_config(&cfg.backends)?;
    match cli.command {
        Command::Sample(_) => {
            let index = load_index(&ws)?;
            each_cell(&cfg, &backends, resume, |ctx| {
                let split = ctx.sample(&index)?;
                Ok(format!("{} train, {} val", split.train.len(), split.val.len()))
            })?;
        }
        Command::Caption(_) => each_cell(&cfg, &backends, resume, |ctx| {
            let caps = ctx.caption(&ctx.load_split()?)?;
            let ok = caps.iter().filter(|c| c.caption().is_some()).count();
            Ok(format!("{ok}/{} captions accepted", caps.len()))
        })?,
        Command::Mask(_) => each_cell(&cfg, &backends, resume, |ctx| {
            let masked = ctx.mask(&ctx.load_split()?, &ctx.load_captions()?)?;
            Ok(format!("{} masked captions", masked.len()))
        })?,
        Command::Complete(_) => each_cell(&cfg, &backends, resume, |ctx| {
            let done = ctx.complete(&ctx.load_masked()?)?;
            let ok = done.iter().filter(|c| c.completion.validation.is_accepted()).count();
            Ok(format!("{ok}/{} completions accepted", done.len()))
        })?,
        Command::Generate(_) => each_cell(&cfg, &backends, resume, |ctx| {
            let split = ctx.load_split()?;
            let captions = if cfg.strategy.needs_reference() {
                ctx.load_captions()?
            } else {
                Vec::new()
            };
            let completions = if cfg.strategy == PromptStrategy::Mlp {
                ctx.load_completions()?
            } else {
                Vec::new()
            };
            let set = ctx.generate(&split, &captions, &completions)?;
            Ok(format!("{} synthetic images", set.samples.len()))
        })?,
        Command::Embed(_) => {
            let index = load_index(&ws)?;
            let test = stage_embed_test(&cfg, &backends, &index, &ws)?;
            println!("test: {} x {}", test.n, test.d);
            each_cell(&cfg, &backends, resume, |ctx| {
                let (train, val, syn) = ctx.embed(&ctx.load_split()?, &ctx.load_synthetic()?)?;
                Ok(format!("{} train, {} val, {} synthetic", train.n, val.n, syn.n))
            })?;
        }
        Command::Train(_) => {
            let classes = load_index(&ws)?.run_styles();
            each_cell(&cfg, &backends, resume, |ctx| {
                let (train, val, syn) = ctx.load_cell_embeddings()?;
                let out = ctx.train(&classes, &train, &val, &syn)?;
                let epochs = |p: &Option<crate::pipeline::TrainedProbe>| {
                    p.as_ref().map(|p| p.history.epochs.len().to_string()).unwrap_or_else(|| "-".into())
                };
                Ok(format!(
                    "epochs real_only={} augmented={}",
                    epochs(&out.real_only),
                    epochs(&out.augmented)
                ))
            })?;
        }
        Command::Evaluate(_) => {
            let classes = load_index(&ws)?.run_styles();
            let test = load_test_embeddings(&ws)?;
            each_cell(&cfg, &backends, resume, |ctx| {
                let trained = ctx.load_trained()?;
                let syn = ctx.load_synthetic()?;
                let (_, _, syn_emb) = ctx.load_cell_embeddings()?;
                let m = ctx.evaluate(&classes, &test, &trained, &syn, &syn_emb)?;
                let acc = |v: &Option<crate::pipeline::VariantResult>| {
                    v.as_ref().map(|v| format!("{:.4}", v.accuracy)).unwrap_or_else(|| "-".into())
                };
                Ok(format!("accuracy real_only={} augmented={}", acc(&m.real_only), acc(&m.augmented)))
            })?;
        }
        Command::Run(_) => {
            let report = run_experiment(&cfg, &backends, resume)?;
            print!("{}", crate::pipeline::report_csv(&report));
            println!("{run_id}: report written to {}", ws.root.display());
            for c in report.failed() {
                eprintln!(
                    "cell n{}_s{} failed: {}",
                    c.n_shot,
                    c.seed,
                    c.error.as_deref().unwrap_or("unknown error")
                );
            }
            return finish(report.failed().first().and_then(|c| c.exit_code));
        }
        Command::Index(_) | Command::Report(_) | Command::Fixture { .. } => unreachable!(),
    }
    Ok(())
}

/// Partial failures surface through the exit code of the first failed cell.
fn finish(code: Option<i32>) -> Result<(), PipelineError> {
    match code {
        Some(code) => Err(PipelineError::CellsFailed(code)),
        None => Ok(()),
    }
}
