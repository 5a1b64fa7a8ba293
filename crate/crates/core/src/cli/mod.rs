//! Command-line entry point: configuration, artifacts and subcommands.
//!
//! Every command builds the dataset from the config, then loads or produces
//! the artifacts it needs under the output directory: `model.vtim`,
//! `dirs.vtid`, `eval/*.json`, `sweep/*.json`, `stability.json`, and a
//! `manifest.json` describing the run.

mod config;
mod pipeline;

pub use config::{
    load_config, parse_config, parse_range, save_config, DatasetConfig, EvalConfig, ExtractionConfig,
    InterventionConfig, RunConfig, StageSeeds, Suite, SweepConfig, TrainingConfig,
};
pub use pipeline::{
    caption_scores, CaptionRun, CaptionScores, Condition, Pipeline, StabilityComparison, SweepOutcome,
};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VtiError};
use crate::model::{checkpoint_hash, read_vtim, write_vtim, ToyLvlm};
use crate::perturb::{Perturbation, PerturbationKind, PerturbationSpec};
use crate::scenes::write_manifest;
use crate::steering::{encode_vtid, read_vtid, write_vtid, SteeringSet};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "VTI_SEED";

#[derive(Debug, Parser)]
#[command(name = "vti", version, about = "Latent steering on a toy vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset and write its manifest.
    MakeData(Common),
    /// Train the toy model and write `model.vtim`.
    TrainToy(Common),
    /// Extract steering directions into a VTID file.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to use (default: `<output>/model.vtim`, trained if absent).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Destination (default: `<output>/dirs.vtid`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate vanilla, vision-only, text-only and combined intervention.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directions (default: `<output>/dirs.vtid`, extracted if absent).
        #[arg(long)]
        dirs: Option<PathBuf>,
    },
    /// Grid search over strengths on the validation split.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dirs: Option<PathBuf>,
        /// Inclusive `start:stop:step`.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        betas: Option<String>,
    },
    /// Feature variance under perturbation, with and without the vision shift.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dirs: Option<PathBuf>,
        /// Comma-separated perturbation kinds.
        #[arg(long)]
        kinds: Option<String>,
        /// Perturbed copies per image.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
    },
}

/// Flags shared by every command; each overrides one config field.
#[derive(Debug, Clone, Default, Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Take the config from a previous run's manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_scenes: Option<usize>,
    #[arg(long)]
    p_bias: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extraction examples `N`.
    #[arg(long)]
    examples: Option<usize>,
    /// Masks per image `m`.
    #[arg(long)]
    masks: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Comma-separated: chair, pope, stability, attention, probe, all.
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

/// What a command did, written to `<output>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: StageSeeds,
    pub checkpoint_hash: Option<String>,
    pub directions_hash: Option<String>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| VtiError::config("manifest", e.to_string()))
    }
}

/// Runs `argv` (program name first) and returns the process exit code:
/// 0 on success, 1 for usage or validation errors, 2 for runtime errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error: validation problems are 1, the rest 2.
pub fn exit_code(e: &VtiError) -> i32 {
    match e {
        VtiError::Config { .. } | VtiError::Spec(_) => 1,
        _ => 2,
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut c = match (&common.config, &common.manifest) {
        (Some(p), _) => config::parse_config(&std::fs::read_to_string(p)?)?,
        (None, Some(p)) => RunManifest::read(p)?.config,
        (None, None) => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        c.seed = v
            .trim()
            .parse()
            .map_err(|_| VtiError::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
    }
    macro_rules! set {
        ($flag:ident => $($field:tt)+) => {
            if let Some(v) = common.$flag.clone() {
                c.$($field)+ = v;
            }
        };
    }
    set!(seed => seed);
    set!(n_scenes => dataset.n_scenes);
    set!(p_bias => dataset.p_bias);
    set!(pool_size => dataset.pool_size);
    set!(epochs => training.epochs);
    set!(lr => training.lr);
    set!(batch_size => training.batch_size);
    set!(examples => extraction.examples);
    set!(masks => extraction.masks);
    set!(mask_ratio => extraction.mask_ratio);
    set!(alpha => intervention.alpha);
    set!(beta => intervention.beta);
    set!(max_new_tokens => eval.max_new_tokens);
    set!(output_dir => output);
    if let Some(s) = &common.suite {
        c.eval.suites = Suite::parse_list(s)?;
    }
    c.validate()?;
    Ok(c)
}

/// Output directory plus the artifacts written so far.
struct Run {
    pipeline: Pipeline,
    command: &'static str,
    artifacts: Vec<String>,
    checkpoint: Option<String>,
    directions: Option<String>,
}

impl Run {
    fn new(common: &Common, command: &'static str) -> Result<Self> {
        let config = resolve(common)?;
        std::fs::create_dir_all(&config.output)?;
        log::info!("{command}: output in {}", config.output.display());
        Ok(Run {
            pipeline: Pipeline::new(config)?,
            command,
            artifacts: Vec::new(),
            checkpoint: None,
            directions: None,
        })
    }

    fn dir(&self) -> &Path {
        &self.pipeline.config.output
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir().join(rel)
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.artifacts.push(rel.into());
        Ok(())
    }

    /// Loads `explicit`, else `<output>/model.vtim`, else trains and saves.
    fn model(&mut self, explicit: Option<&Path>) -> Result<ToyLvlm> {
        let default = self.path("model.vtim");
        let path = explicit.map(Path::to_path_buf).unwrap_or(default.clone());
        let model = if path.exists() {
            log::info!("loading checkpoint {}", path.display());
            let m = read_vtim(&path)?;
            if m.config() != self.pipeline.config.model {
                return Err(VtiError::config("model", "checkpoint architecture differs from the config"));
            }
            m
        } else if explicit.is_some() {
            return Err(VtiError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("checkpoint {} not found", path.display()),
            )));
        } else {
            self.train()?
        };
        self.checkpoint = Some(checkpoint_hash(&model)?);
        Ok(model)
    }

    fn train(&mut self) -> Result<ToyLvlm> {
        log::info!("training on {} scenes", self.pipeline.data.train.len());
        let out = self.pipeline.train()?;
        write_vtim(self.path("model.vtim"), &out.model)?;
        self.artifacts.push("model.vtim".into());
        #[derive(Serialize)]
        struct TrainRecord<'a> {
            checkpoint_hash: String,
            loss_curve: &'a [f64],
        }
        let rec = TrainRecord {
            checkpoint_hash: checkpoint_hash(&out.model)?,
            loss_curve: &out.loss_curve,
        };
        self.write_json("train.json", &rec)?;
        Ok(out.model)
    }

    /// Loads `explicit`, else `<output>/dirs.vtid`, else extracts and saves.
    fn dirs(&mut self, model: &ToyLvlm, explicit: Option<&Path>) -> Result<SteeringSet> {
        let path = explicit.map(Path::to_path_buf).unwrap_or(self.path("dirs.vtid"));
        let set = if path.exists() {
            log::info!("loading directions {}", path.display());
            read_vtid(&path)?
        } else if explicit.is_some() {
            return Err(VtiError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("directions {} not found", path.display()),
            )));
        } else {
            self.extract(model, &path)?
        };
        self.directions = Some(hex::encode(Sha256::digest(encode_vtid(&set)?)));
        Ok(set)
    }

    fn extract(&mut self, model: &ToyLvlm, path: &Path) -> Result<SteeringSet> {
        log::info!("extracting directions from {} examples", self.pipeline.config.extraction.examples);
        let set = self.pipeline.extract(model)?;
        write_vtid(path, &set)?;
        if let Ok(rel) = path.strip_prefix(self.dir()) {
            self.artifacts.push(rel.to_string_lossy().into_owned());
        }
        Ok(set)
    }

    fn finish(mut self) -> Result<()> {
        let c = &self.pipeline.config;
        self.artifacts.sort();
        self.artifacts.dedup();
        let manifest = RunManifest {
            command: self.command.into(),
            config_hash: c.hash()?,
            seeds: c.seeds(),
            checkpoint_hash: self.checkpoint.take(),
            directions_hash: self.directions.take(),
            artifacts: self.artifacts.clone(),
            config: c.portable(),
        };
        std::fs::write(self.path("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::MakeData(common) => {
            let mut run = Run::new(&common, "make-data")?;
            write_manifest(run.path("data"), &run.pipeline.data)?;
            run.artifacts.push("data/manifest.jsonl".into());
            run.finish()
        }
        Command::TrainToy(common) => {
            let mut run = Run::new(&common, "train-toy")?;
            let model = run.train()?;
            run.checkpoint = Some(checkpoint_hash(&model)?);
            run.finish()
        }
        Command::Extract { common, model, out } => {
            let mut run = Run::new(&common, "extract")?;
            let m = run.model(model.as_deref())?;
            let path = out.unwrap_or_else(|| run.path("dirs.vtid"));
            let set = run.extract(&m, &path)?;
            run.directions = Some(hex::encode(Sha256::digest(encode_vtid(&set)?)));
            run.finish()
        }
        Command::Eval { common, model, dirs } => {
            let mut run = Run::new(&common, "eval")?;
            let m = run.model(model.as_deref())?;
            let d = run.dirs(&m, dirs.as_deref())?;
            let reports = run.pipeline.evaluate_all(&m, &d)?;
            for r in &reports {
                log::info!(
                    "{}: chair_s {:?} chair_i {:?} recall {:?} avg_len {:?}",
                    r.condition,
                    r.chair_s,
                    r.chair_i,
                    r.recall,
                    r.avg_len
                );
                run.write_json(&format!("eval/{}.json", r.condition), r)?;
            }
            run.finish()
        }
        Command::Sweep {
            common,
            model,
            dirs,
            alphas,
            betas,
        } => {
            let mut run = Run::new(&common, "sweep")?;
            if let Some(a) = alphas {
                run.pipeline.config.sweep.alphas = a;
            }
            if let Some(b) = betas {
                run.pipeline.config.sweep.betas = b;
            }
            run.pipeline.config.validate()?;
            let (alphas, betas) = run.pipeline.sweep_grid()?;
            let m = run.model(model.as_deref())?;
            let d = run.dirs(&m, dirs.as_deref())?;
            let outcome = run.pipeline.sweep(&m, &d, &alphas, &betas)?;
            for p in &outcome.points {
                run.write_json(&format!("sweep/a{:.4}_b{:.4}.json", p.alpha, p.beta), p)?;
            }
            log::info!("sweep picked alpha {} beta {}", outcome.best.0, outcome.best.1);
            run.write_json("sweep/index.json", &outcome)?;
            run.finish()
        }
        Command::Stability {
            common,
            model,
            dirs,
            kinds,
            k,
            images,
        } => {
            let mut run = Run::new(&common, "stability")?;
            {
                let e = &mut run.pipeline.config.eval;
                if let Some(kinds) = kinds {
                    e.stability_kinds = kinds
                        .split(',')
                        .map(|s| s.trim().parse::<PerturbationKind>())
                        .collect::<Result<Vec<_>>>()?;
                }
                if let Some(k) = k {
                    e.stability_k = k;
                }
                if let Some(n) = images {
                    e.stability_images = n;
                }
            }
            run.pipeline.config.validate()?;
            let m = run.model(model.as_deref())?;
            let d = run.dirs(&m, dirs.as_deref())?;
            let report = stability_comparison(&run.pipeline, &m, &d)?;
            run.write_json("stability.json", &report)?;
            run.finish()
        }
    }
}

/// Variance with and without the vision shift at the configured alpha, and
/// the probe on clean versus heavily averaged features.
pub fn stability_comparison(p: &Pipeline, model: &ToyLvlm, dirs: &SteeringSet) -> Result<StabilityComparison> {
    let alpha = p.config.intervention.alpha;
    let c = model.config();
    let vanilla = p.stability(model, &dirs.hooks_at(&c, 0.0, 0.0)?)?;
    let intervened = p.stability(model, &dirs.hooks_at(&c, alpha, 0.0)?)?;
    let reduced = vanilla
        .iter()
        .filter(|(k, v)| intervened.get(*k).is_some_and(|i| i.mean_var < v.mean_var))
        .map(|(k, _)| k.clone())
        .collect();
    let heavy = PerturbationSpec::new(
        Perturbation::PatchMask {
            mask_ratio: p.config.extraction.mask_ratio,
            patch_size: c.patch_size,
        },
        crate::rng::derive_seed(p.config.seeds().evaluation, 4),
    );
    let mut probe = std::collections::BTreeMap::new();
    probe.insert("clean".to_string(), p.embedding_probe(model)?);
    probe.insert("averaged".to_string(), p.averaged_probe(model, &heavy, p.config.extraction.masks)?);
    Ok(StabilityComparison {
        alpha,
        vanilla,
        intervened,
        reduced,
        probe,
    })
}
