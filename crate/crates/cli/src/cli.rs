//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use surgphase_core::data::{generate_synthetic, load_annotations, write_canonical, write_synthetic, AnnotationFormat, SyntheticSpec};
use surgphase_core::features::FeatureCache;
use surgphase_core::stage1::Stage1Checkpoint;
use surgphase_core::tcn::TcnCheckpoint;
use surgphase_core::{Error, ErrorKind, Result};

use crate::config::PipelineConfig;
use crate::manifest::{self, Manifest};
use crate::pipeline::{self, Layout};

#[derive(Debug, Parser)]
#[command(name = "surgphase", version, about = "Two-stage surgical phase recognition")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Group,
}

#[derive(Debug, Subcommand)]
enum Group {
    /// Dataset ingestion and synthetic data.
    #[command(subcommand)]
    Data(DataCmd),
    /// Image encoder and prompt training.
    #[command(subcommand)]
    Stage1(Stage1Cmd),
    /// Temporal model training and inference.
    #[command(subcommand)]
    Stage2(Stage2Cmd),
    /// Metrics and ribbon plots.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// End-to-end runs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Debug, Subcommand)]
enum DataCmd {
    /// Convert dataset annotations to the canonical 1 fps layout.
    Ingest {
        #[arg(long)]
        format: String,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic dataset from a JSON or TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Pipeline configuration (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set stage1.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; beats the config file and the environment.
    #[arg(long)]
    output_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Raw inner-product logits instead of cosine similarity.
    #[arg(long)]
    no_normalize: bool,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref(), &self.overrides)?;
        cfg.apply_env();
        if let Some(o) = &self.output_root {
            cfg.eval.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.propagate_seed();
        }
        if self.no_normalize {
            cfg.stage1.head.normalize = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Stage1Cmd {
    /// Fine-tune the image encoder and prompts.
    Train(Common),
    /// Pick the learning rate on the validation split.
    LrSearch(Common),
    /// Cache frame features from a trained checkpoint.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val, test or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
}

#[derive(Debug, Subcommand)]
enum Stage2Cmd {
    /// Train the temporal model on cached features.
    Train(Common),
    /// Write per-video prediction TSVs.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction directory (default `<output root>/predictions`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Metrics over a directory of prediction TSVs.
    Run {
        #[arg(long)]
        preds: PathBuf,
        /// Canonical dataset root whose annotations replace the TSV ground truth.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// `phases.json` naming the phases.
        #[arg(long)]
        phases: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ribbon plots of ground truth against one or more prediction sets.
    Ribbon {
        #[arg(long)]
        preds: PathBuf,
        /// Only this video.
        #[arg(long)]
        video: Option<String>,
        /// Baseline predictions drawn under the ground truth.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Extra methods as NAME=DIR.
        #[arg(long = "method", value_name = "NAME=DIR")]
        methods: Vec<String>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        phases: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum PipelineCmd {
    /// Data, stage 1, extraction, stage 2, prediction and evaluation.
    All(Common),
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Training => 4,
        ErrorKind::Evaluation => 5,
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SURGPHASE_LOG")
        .format_timestamp(None)
        .try_init();
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.kind())
        }
    }
}

fn split_ids(split: &surgphase_core::data::DatasetSplit, name: &str) -> Result<Vec<String>> {
    if name == "all" {
        return Ok(split.all().cloned().collect());
    }
    Ok(split.part(name)?.to_vec())
}

/// Runs `body` with any stale manifest in `dir` removed first; `body`
/// returns the manifest to write on success.
fn with_manifest(dir: &Path, body: impl FnOnce() -> Result<Manifest>) -> Result<()> {
    manifest::clear(dir);
    let m = body()?;
    m.write(dir)?;
    Ok(())
}

fn dispatch(cmd: Group, argv: Vec<String>) -> Result<()> {
    match cmd {
        Group::Data(DataCmd::Ingest { format, root, out }) => with_manifest(&out.clone(), || {
            let fmt: AnnotationFormat = format.parse()?;
            let ds = load_annotations(&root, fmt)?;
            write_canonical(&out, &ds.vocab, &ds.videos)?;
            let mut copied = 0usize;
            for v in &ds.videos {
                let Some(paths) = &v.frame_paths else { continue };
                let dir = out.join("videos").join(&v.video_id).join("frames");
                if paths.first().is_some_and(|p| p.starts_with(&dir)) {
                    continue;
                }
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for p in paths {
                    let dst = dir.join(p.file_name().expect("frame file name"));
                    std::fs::copy(p, &dst).map_err(|e| Error::io(p, e))?;
                    copied += 1;
                }
            }
            log::info!("ingested {} videos ({copied} frames copied)", ds.videos.len());
            let mut m = Manifest::new("data ingest", argv);
            m.results = json!({"videos": ds.videos.len(), "phases": ds.vocab.names(), "format": fmt.as_str()});
            Ok(m.outputs(&out, &[out.join("phases.json"), out.join("annotations")]))
        }),
        Group::Data(DataCmd::Synth { spec, out }) => with_manifest(&out.clone(), || {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let s: SyntheticSpec = if spec.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?
            } else {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?
            };
            let ds = generate_synthetic(&s)?;
            write_synthetic(&ds, &out)?;
            let mut m = Manifest::new("data synth", argv);
            m.seed = Some(s.seed);
            m.results = json!({"videos": ds.videos.len(), "frames": ds.videos.iter().map(|v| v.frames.len()).sum::<usize>()});
            Ok(m.outputs(&out, &[out.join("phases.json"), out.join("annotations"), out.join("videos"), out.join("synthetic.json")]))
        }),
        Group::Stage1(Stage1Cmd::Train(common)) => {
            let cfg = common.resolve()?;
            let layout = Layout::new(cfg.out());
            with_manifest(&layout.stage1(), || {
                let ds = pipeline::prepare_dataset(&cfg)?;
                let split = pipeline::dataset_split(&cfg, &ds)?;
                let (_, outcome) = pipeline::run_stage1(&cfg, &ds, &split, &layout)?;
                let mut m = Manifest::new("stage1 train", argv).with_config(&cfg);
                m.reference_indices = Some(outcome.reference_indices.clone());
                m.results = serde_json::to_value(&outcome).expect("serialisable");
                Ok(m.outputs(&layout.stage1(), &[layout.stage1_checkpoint(), layout.stage1().join("training.json")]))
            })
        }
        Group::Stage1(Stage1Cmd::LrSearch(common)) => {
            let cfg = common.resolve()?;
            let layout = Layout::new(cfg.out());
            let dir = layout.stage1().join("lr-search");
            with_manifest(&dir, || {
                let ds = pipeline::prepare_dataset(&cfg)?;
                let split = pipeline::dataset_split(&cfg, &ds)?;
                let search = pipeline::stage1_lr_search(&cfg, &ds, &split)?;
                let path = dir.join("lr_search.json");
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                std::fs::write(&path, serde_json::to_string_pretty(&search).expect("serialisable") + "\n")
                    .map_err(|e| Error::io(&path, e))?;
                println!("best learning rate {:e}", search.best);
                let mut m = Manifest::new("stage1 lr-search", argv).with_config(&cfg);
                m.results = serde_json::to_value(&search).expect("serialisable");
                Ok(m.outputs(&dir, &[path]))
            })
        }
        Group::Stage1(Stage1Cmd::Extract { common, checkpoint, split }) => {
            let cfg = common.resolve()?;
            let layout = Layout::new(cfg.out());
            let dir = layout.features();
            with_manifest(&dir, || {
                let ck = Stage1Checkpoint::load(&checkpoint.unwrap_or_else(|| layout.stage1_checkpoint()))?;
                let ds = pipeline::prepare_dataset(&cfg)?;
                let sp = pipeline::dataset_split(&cfg, &ds)?;
                let ids = split_ids(&sp, &split)?;
                let cache = pipeline::run_extract(&cfg, &ds, &ck, &ids, &dir)?;
                let mut m = Manifest::new("stage1 extract", argv).with_config(&cfg);
                m.results = json!({"videos": ids.len(), "dim": cache.dim()});
                Ok(m.outputs(&dir, &[dir.join("index.json")]))
            })
        }
        Group::Stage2(Stage2Cmd::Train(common)) => {
            let cfg = common.resolve()?;
            let layout = Layout::new(cfg.out());
            with_manifest(&layout.stage2(), || {
                let ds = pipeline::prepare_dataset(&cfg)?;
                let split = pipeline::dataset_split(&cfg, &ds)?;
                let cache = FeatureCache::open(&layout.features())?;
                let (_, outcome) = pipeline::run_stage2(&cfg, &cache, &split, ds.vocab.len(), &layout)?;
                let mut m = Manifest::new("stage2 train", argv).with_config(&cfg);
                m.results = serde_json::to_value(&outcome).expect("serialisable");
                Ok(m.outputs(&layout.stage2(), &[layout.stage2_checkpoint(), layout.stage2().join("training.json")]))
            })
        }
        Group::Stage2(Stage2Cmd::Predict { common, split, checkpoint, out }) => {
            let cfg = common.resolve()?;
            let layout = Layout::new(cfg.out());
            let dir = out.unwrap_or_else(|| layout.predictions());
            with_manifest(&dir.clone(), || {
                let ck = TcnCheckpoint::load(&checkpoint.unwrap_or_else(|| layout.stage2_checkpoint()))?;
                let ds = pipeline::prepare_dataset(&cfg)?;
                let sp = pipeline::dataset_split(&cfg, &ds)?;
                let ids = split_ids(&sp, &split)?;
                let cache = FeatureCache::open(&layout.features())?;
                let recs = pipeline::run_predict(&ck, &cache, &ids, &dir)?;
                let mut m = Manifest::new("stage2 predict", argv).with_config(&cfg);
                m.results = json!({"videos": recs.len(), "split": split});
                let files: Vec<PathBuf> = recs
                    .iter()
                    .map(|r| surgphase_core::predictions::tsv_path(&dir, &r.video_id))
                    .collect();
                Ok(m.outputs(&dir, &files))
            })
        }
        Group::Eval(EvalCmd::Run { preds, gt, phases, out }) => with_manifest(&out.clone(), || {
            let vocab = phases.as_deref().map(pipeline::load_vocab).transpose()?;
            let (mut recs, mut vocab) = pipeline::read_predictions(&preds, vocab.as_ref())?;
            if let Some(g) = &gt {
                let v = pipeline::attach_ground_truth(&mut recs, g)?;
                if phases.is_none() {
                    vocab = v;
                }
            }
            let report = pipeline::run_eval(&recs, &vocab, &out)?;
            println!("{}", report.to_markdown().lines().take(6).collect::<Vec<_>>().join("\n"));
            let mut m = Manifest::new("eval run", argv);
            m.results = json!({"videos": recs.len(), "f1": report.f1});
            Ok(m.outputs(&out, &[out.join("report.json"), out.join("report.md")]))
        }),
        Group::Eval(EvalCmd::Ribbon { preds, video, baseline, methods, gt, phases, out }) => {
            with_manifest(&out.clone(), || {
                let vocab = phases.as_deref().map(pipeline::load_vocab).transpose()?;
                let (mut main, mut vocab) = pipeline::read_predictions(&preds, vocab.as_ref())?;
                if let Some(g) = &gt {
                    let v = pipeline::attach_ground_truth(&mut main, g)?;
                    if phases.is_none() {
                        vocab = v;
                    }
                }
                let mut sets = vec![("prediction".to_string(), main)];
                for m in &methods {
                    let (name, dir) = m
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("--method `{m}` is not NAME=DIR")))?;
                    sets.push((name.to_string(), pipeline::read_predictions(Path::new(dir), Some(&vocab))?.0));
                }
                let base = baseline
                    .as_deref()
                    .map(|b| pipeline::read_predictions(b, Some(&vocab)).map(|r| r.0))
                    .transpose()?;
                let written = pipeline::run_ribbons(
                    &sets,
                    base.as_deref().map(|b| ("baseline", b)),
                    &vocab,
                    video.as_deref(),
                    &out,
                )?;
                Ok(Manifest::new("eval ribbon", argv).outputs(&out, &written))
            })
        }
        Group::Pipeline(PipelineCmd::All(common)) => {
            let cfg = common.resolve()?;
            let root = cfg.out().to_path_buf();
            with_manifest(&root, || {
                let summary = pipeline::pipeline_all(&cfg)?;
                let layout = Layout::new(&root);
                println!(
                    "stage-1 test accuracy {:.4}, temporal model test accuracy {:.4}; report in {}",
                    summary.test_accuracy_stage1,
                    summary.test_accuracy_stage2,
                    layout.report().display()
                );
                let mut m = Manifest::new("pipeline all", argv).with_config(&cfg);
                m.reference_indices = Some(summary.stage1.reference_indices.clone());
                m.results = serde_json::to_value(&summary).expect("serialisable");
                Ok(m.outputs(
                    &root,
                    &[
                        layout.stage1_checkpoint(),
                        layout.features(),
                        layout.stage2_checkpoint(),
                        layout.predictions(),
                        layout.report().join("report.json"),
                        layout.report().join("report.md"),
                        root.join("summary.json"),
                    ],
                ))
            })
        }
    }
}
