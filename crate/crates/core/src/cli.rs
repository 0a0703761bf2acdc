//! Command-line entry point.
//!
//! Every subcommand that evaluates a dataset writes its reports into `--out`
//! together with `provenance.json`. Exit status is 0 on success, 1 when the
//! run failed or any sample failed (details in `errors.log`), and 2 for
//! usage errors, in which case nothing is written.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backends::{FixtureBackend, VisionBackend};
use crate::boxgeom::MarginRatio;
use crate::datasets::{
    filter_by_object_size, generate_synthetic_manifest, write_classes, DatasetManifest, SynthParams,
};
use crate::detection::DetectionStrategy;
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_report, emit_report, logit_dump, similarity_report, Harness, ReportFormat, Table,
};
use crate::fusion::{Aggregation, PromptMode, TextClassBank, DEFAULT_TEMPLATE};
use crate::pipeline::{AugMode, GcConfig, PredictionRecord, RaugFrame};
use crate::prompts::{
    build_bank, category_prompts, description_prompts, detection_prompts, load_prompt_file,
};

fn serde_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "guided-crop",
    version,
    about = "Zero-shot classification with guided cropping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify every sample of a manifest.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        /// Run guided cropping in addition to the baseline.
        #[arg(long)]
        guided: bool,
    },
    /// Accuracy over a grid of margin ratios.
    SweepMargin {
        #[command(flatten)]
        run: RunArgs,
        /// `start:stop:step` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0:1:0.1")]
        alphas: String,
    },
    /// Accuracy of every method on nested object-size subsets.
    SweepSize {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Prediction stability under random crops of the full image.
    Stability {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        n_crops: usize,
    },
    /// Classify from detector scores alone.
    OwlEval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a synthetic manifest with its fixture file.
    GenSynth {
        /// JSON file with generator parameters; omitted fields keep defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the subset of samples with small relative object size.
    FilterSm {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.2)]
        max_object_size: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// JSON-lines dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Class names, one per line. Defaults to classes.txt next to the manifest.
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// fixture | runtime
    #[arg(long, default_value = "fixture")]
    backend: String,
    /// Model directory. Defaults to the manifest directory.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    /// Description prompts (JSON: class name to list of prompts).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// category | descriptions
    #[arg(long, default_value = "category", value_parser = serde_enum::<PromptMode>)]
    prompt_mode: PromptMode,
    /// Category prompt template; `{name}` is replaced by the class name.
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
    /// logit | embedding
    #[arg(long, default_value = "logit", value_parser = serde_enum::<Aggregation>)]
    aggregation: Aggregation,
    /// none | raug | maug
    #[arg(long, default_value = "none", value_parser = serde_enum::<AugMode>)]
    aug: AugMode,
    #[arg(long, default_value_t = GcConfig::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 11)]
    n_aug: usize,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    /// cropped | original
    #[arg(long, default_value = "cropped", value_parser = serde_enum::<RaugFrame>)]
    raug_frame: RaugFrame,
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f64,
    /// multi | single
    #[arg(long, default_value = "multi", value_parser = serde_enum::<DetectionStrategy>)]
    detection: DetectionStrategy,
    /// Detections scoring below this are ignored.
    #[arg(long, default_value_t = 0.0)]
    score_floor: f64,
    /// Keep only samples whose relative object size is at most this.
    #[arg(long)]
    max_object_size: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<GcConfig> {
        Ok(GcConfig {
            k: self.k,
            alpha: MarginRatio::new(self.alpha)?,
            aug: self.aug,
            n_aug: self.n_aug,
            beta: self.beta,
            raug_frame: self.raug_frame,
            logit_scale: self.logit_scale,
            detection: self.detection,
            seed: self.seed,
            score_floor: self.score_floor,
        })
    }
}

impl DataArgs {
    fn classes_path(&self) -> PathBuf {
        self.classes.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .unwrap_or(Path::new("."))
                .join("classes.txt")
        })
    }

    fn load(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.manifest, &self.classes_path())
    }
}

/// Parse `argv` (including the program name) and run. Returns the exit
/// status.
pub fn parse_and_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli.command, &argv) {
        Ok(0) => 0,
        Ok(failed) => {
            eprintln!("{failed} sample(s) failed; see errors.log");
            1
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn usage(e: Error) -> Failure {
    match e {
        Error::InvalidParameter(m) => Failure::Usage(m),
        other => Failure::Run(other),
    }
}

/// Number of failed samples on success.
fn execute(cmd: Command, argv: &[String]) -> std::result::Result<usize, Failure> {
    match cmd {
        Command::GenSynth {
            params,
            n_samples,
            seed,
            out,
        } => {
            let mut p = match params {
                Some(path) => {
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_slice(&bytes).map_err(|e| Error::parse(&path, e))?
                }
                None => SynthParams::default(),
            };
            if let Some(n) = n_samples {
                p.n_samples = n;
            }
            p.validate().map_err(usage)?;
            let (manifest, fixture) = generate_synthetic_manifest(&p, seed)?;
            create_dir(&out)?;
            manifest.write_jsonl(&out.join("synth.jsonl"))?;
            write_classes(&out.join("classes.txt"), &manifest.classes)?;
            write_json(&out.join(FixtureBackend::FILE_NAME), &fixture)?;
            write_json(
                &out.join("provenance.json"),
                &serde_json::json!({"command": "gen-synth", "argv": argv, "seed": seed, "params": p}),
            )?;
            Ok(0)
        }
        Command::FilterSm {
            data,
            max_object_size,
            out,
        } => {
            if !(0.0..=1.0).contains(&max_object_size) {
                return Err(Failure::Usage(
                    "--max-object-size must lie in [0, 1]".into(),
                ));
            }
            let manifest = data.load()?.with_sizes()?;
            let subset = filter_by_object_size(&manifest, max_object_size)?;
            create_dir(&out)?;
            let stem = data
                .manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "manifest".into());
            subset.write_jsonl(&out.join(format!("{stem}_sm.jsonl")))?;
            write_classes(&out.join("classes.txt"), &subset.classes)?;
            write_json(
                &out.join("provenance.json"),
                &serde_json::json!({
                    "command": "filter-sm",
                    "argv": argv,
                    "manifest_sha256": file_sha256(&data.manifest)?,
                    "max_object_size": max_object_size,
                    "boundary": "inclusive (size <= max)",
                    "samples_in": manifest.len(),
                    "samples_out": subset.len(),
                }),
            )?;
            Ok(0)
        }
        Command::Classify { run, guided } => {
            with_backend(&run, argv, Experiment::Classify { guided })
        }
        Command::SweepMargin { run, alphas } => {
            let grid = parse_alphas(&alphas).map_err(Failure::Usage)?;
            with_backend(&run, argv, Experiment::SweepMargin(grid))
        }
        Command::SweepSize { run } => with_backend(&run, argv, Experiment::SweepSize),
        Command::Stability { run, n_crops } => {
            if n_crops == 0 {
                return Err(Failure::Usage("--n-crops must be >= 1".into()));
            }
            with_backend(&run, argv, Experiment::Stability { n_crops })
        }
        Command::OwlEval { run } => with_backend(&run, argv, Experiment::OwlEval),
    }
}

enum Experiment {
    Classify { guided: bool },
    SweepMargin(Vec<f64>),
    SweepSize,
    Stability { n_crops: usize },
    OwlEval,
}

impl Experiment {
    fn name(&self) -> &'static str {
        match self {
            Experiment::Classify { .. } => "classify",
            Experiment::SweepMargin(_) => "sweep-margin",
            Experiment::SweepSize => "sweep-size",
            Experiment::Stability { .. } => "stability",
            Experiment::OwlEval => "owl-eval",
        }
    }
}

/// Parse `start:stop:step` (inclusive) or `a,b,c`.
pub fn parse_alphas(spec: &str) -> std::result::Result<Vec<f64>, String> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number '{s}' in --alphas"))
    };
    let values = match spec.split(':').collect::<Vec<_>>().as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err("--alphas range needs step > 0 and stop >= start".into());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect()
        }
        [_] => spec
            .split(',')
            .map(num)
            .collect::<std::result::Result<Vec<_>, _>>()?,
        _ => return Err(format!("cannot parse --alphas '{spec}'")),
    };
    if let Some(bad) = values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(format!("alpha {bad} outside [0, 1]"));
    }
    Ok(values)
}

fn with_backend(
    run: &RunArgs,
    argv: &[String],
    exp: Experiment,
) -> std::result::Result<usize, Failure> {
    let cfg = run.config().map_err(usage)?;
    if let Some(m) = run.max_object_size {
        if !(0.0..=1.0).contains(&m) {
            return Err(Failure::Usage(
                "--max-object-size must lie in [0, 1]".into(),
            ));
        }
    }
    if run.parallelism == 0 {
        return Err(Failure::Usage("--parallelism must be >= 1".into()));
    }
    if run.prompt_mode == PromptMode::Descriptions && run.prompts.is_none() {
        return Err(Failure::Usage(
            "--prompt-mode descriptions needs --prompts".into(),
        ));
    }
    let model_dir = run.model_dir.clone().unwrap_or_else(|| {
        run.data
            .manifest
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    match run.backend.as_str() {
        "fixture" => {
            let backend = FixtureBackend::from_path(&model_dir)?;
            run_experiment(&backend, run, cfg, argv, exp)
        }
        #[cfg(feature = "runtime")]
        "runtime" => {
            let backend = crate::backends::runtime::RuntimeBackend::load(&model_dir)?;
            run_experiment(&backend, run, cfg, argv, exp)
        }
        #[cfg(not(feature = "runtime"))]
        "runtime" => Err(Failure::Usage(
            "this build does not include the runtime backend".into(),
        )),
        other => Err(Failure::Usage(format!(
            "unknown backend '{other}' (expected fixture or runtime)"
        ))),
    }
}

fn run_experiment<B: VisionBackend + Sync>(
    backend: &B,
    run: &RunArgs,
    cfg: GcConfig,
    argv: &[String],
    exp: Experiment,
) -> std::result::Result<usize, Failure> {
    let mut manifest = run.data.load()?;
    cfg.validate(manifest.classes.len()).map_err(usage)?;
    let needs_sizes = run.max_object_size.is_some() || matches!(exp, Experiment::SweepSize);
    if needs_sizes {
        manifest = manifest.with_sizes()?;
    }
    if let Some(max) = run.max_object_size {
        manifest = filter_by_object_size(&manifest, max)?;
    }
    let bank = class_bank(backend, run, &manifest.classes)?;
    let det_prompts = detection_prompts(&manifest.classes);
    let warnings = cfg.warnings();
    for w in &warnings {
        log::warn!("{w}");
    }
    let harness = Harness::new(backend, &bank, &det_prompts, cfg.clone(), run.parallelism);

    let out = &run.out;
    create_dir(out)?;
    let mut failed: Vec<(String, String)> = Vec::new();
    let mut extra = serde_json::Map::new();
    match &exp {
        Experiment::Classify { guided } => {
            let records = harness.run(&manifest, cfg.aug, None, *guided)?;
            collect_errors(&records, &mut failed);
            crate::eval::report::write_jsonl(&records, &out.join("predictions.jsonl"))?;
            let config = if *guided { "gc" } else { "baseline" };
            let mut acc = Table::new(
                "accuracy",
                &[
                    "config", "dataset", "samples", "errors", "top1", "top5", "top10",
                ],
            );
            let mut reports = vec![accuracy_report(&records, config, &manifest.name)];
            if *guided {
                let base: Vec<PredictionRecord> = records
                    .iter()
                    .cloned()
                    .map(|mut r| {
                        r.gc = None;
                        r
                    })
                    .collect();
                reports.insert(0, accuracy_report(&base, "baseline", &manifest.name));
            }
            for r in reports {
                acc.push(vec![
                    r.config.into(),
                    r.dataset.into(),
                    r.samples.into(),
                    r.errors.into(),
                    r.top1.into(),
                    r.top5.into(),
                    r.top10.into(),
                ]);
            }
            emit_report(&acc, ReportFormat::Csv, &out.join("accuracy.csv"))?;
            emit_report(
                &logit_dump(&records, &manifest.classes),
                ReportFormat::Csv,
                &out.join("logits.csv"),
            )?;
            let sim = similarity_report(&records);
            let mut t = Table::new("similarity", &["method", "mean_max_logit", "correct"]);
            t.push(vec![
                "baseline".into(),
                sim.baseline.into(),
                sim.baseline_correct.into(),
            ]);
            if *guided {
                t.push(vec!["gc".into(), sim.gc.into(), sim.gc_correct.into()]);
            }
            emit_report(&t, ReportFormat::Csv, &out.join("similarity.csv"))?;
        }
        Experiment::SweepMargin(alphas) => {
            let t = harness.margin_sweep(&manifest, alphas)?;
            emit_report(&t, ReportFormat::Csv, &out.join("margin_sweep.csv"))?;
            emit_report(&t, ReportFormat::Json, &out.join("margin_sweep.json"))?;
        }
        Experiment::SweepSize => {
            let t = harness.object_size_sweep(&manifest)?;
            emit_report(&t, ReportFormat::Csv, &out.join("size_sweep.csv"))?;
            emit_report(&t, ReportFormat::Json, &out.join("size_sweep.json"))?;
        }
        Experiment::Stability { n_crops } => {
            let r = harness.stability(&manifest, *n_crops, cfg.beta)?;
            emit_report(
                &r.sample_table(),
                ReportFormat::Csv,
                &out.join("stability.csv"),
            )?;
            emit_report(
                &r.histogram_table(),
                ReportFormat::Csv,
                &out.join("stability_histogram.csv"),
            )?;
            extra.insert("stable_fraction".into(), r.stable_fraction.into());
            extra.insert("mean_std".into(), r.mean_std.into());
            extra.insert("mean_true_prob".into(), r.mean_true_prob.into());
        }
        Experiment::OwlEval => {
            let r = harness.owl_classifier(&manifest)?;
            let mut t = Table::new(
                "owl_eval",
                &[
                    "config", "dataset", "samples", "errors", "top1", "top5", "top10",
                ],
            );
            t.push(vec![
                r.config.as_str().into(),
                r.dataset.as_str().into(),
                r.samples.into(),
                r.errors.into(),
                r.top1.into(),
                r.top5.into(),
                r.top10.into(),
            ]);
            emit_report(&t, ReportFormat::Csv, &out.join("owl_eval.csv"))?;
            if r.errors > 0 {
                failed.push(("owl-eval".into(), format!("{} sample(s) failed", r.errors)));
            }
        }
    }

    let errors_path = out.join("errors.log");
    if failed.is_empty() {
        if errors_path.exists() {
            std::fs::remove_file(&errors_path).map_err(|e| Error::io(&errors_path, e))?;
        }
    } else {
        let text: String = failed
            .iter()
            .map(|(id, e)| format!("{id}\t{e}\n"))
            .collect();
        std::fs::write(&errors_path, text).map_err(|e| Error::io(&errors_path, e))?;
    }

    let provenance = serde_json::json!({
        "command": exp.name(),
        "argv": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "warnings": warnings,
        "prompt_mode": run.prompt_mode,
        "template": run.template,
        "aggregation": run.aggregation,
        "prompts_sha256": run.prompts.as_deref().map(file_sha256).transpose()?,
        "backend": {"name": backend.name(), "fingerprint": backend.fingerprint()},
        "manifest": {
            "path": run.data.manifest,
            "sha256": file_sha256(&run.data.manifest)?,
            "classes_sha256": file_sha256(&run.data.classes_path())?,
            "samples": manifest.len(),
            "max_object_size": run.max_object_size,
        },
        "parallelism": run.parallelism,
        "summary": extra,
    });
    write_json(&out.join("provenance.json"), &provenance)?;
    Ok(failed.len())
}

fn class_bank<B: VisionBackend>(
    backend: &B,
    run: &RunArgs,
    classes: &[String],
) -> Result<TextClassBank> {
    let prompts = match run.prompt_mode {
        PromptMode::Category => category_prompts(classes, &run.template),
        PromptMode::Descriptions => {
            let path = run
                .prompts
                .as_deref()
                .ok_or_else(|| Error::InvalidParameter("descriptions need --prompts".into()))?;
            description_prompts(classes, &load_prompt_file(path)?)?
        }
    };
    build_bank(backend, classes, &prompts, run.prompt_mode, run.aggregation)
}

fn collect_errors(records: &[PredictionRecord], failed: &mut Vec<(String, String)>) {
    for r in records {
        if let Some(e) = &r.error {
            failed.push((r.id.clone(), e.clone()));
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
