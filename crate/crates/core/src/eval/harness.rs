use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{population_std, top1, topk_accuracy, AccuracyReport, REPORT_KS};
use super::report::{Cell, Table};
use crate::backends::VisionBackend;
use crate::boxgeom::{raug_boxes, MarginRatio};
use crate::datasets::{size_sweep_thresholds, DatasetManifest};
use crate::detection::owl_classifier_logits;
use crate::error::{Error, Result};
use crate::fusion::{clip_logits, LogitVector, TextClassBank};
use crate::parallel::map_ordered;
use crate::pipeline::{AugMode, GcConfig, Pipeline, PredictionRecord};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    BaselineRaug,
    Gc,
    GcRaug,
    GcMaug,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::BaselineRaug,
        Method::Gc,
        Method::GcRaug,
        Method::GcMaug,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::BaselineRaug => "baseline_raug",
            Method::Gc => "gc",
            Method::GcRaug => "gc_raug",
            Method::GcMaug => "gc_maug",
        }
    }

    pub fn aug(self) -> AugMode {
        match self {
            Method::Baseline | Method::Gc => AugMode::None,
            Method::BaselineRaug | Method::GcRaug => AugMode::Raug,
            Method::GcMaug => AugMode::Maug,
        }
    }

    pub fn guided(self) -> bool {
        matches!(self, Method::Gc | Method::GcRaug | Method::GcMaug)
    }
}

/// Backend, class bank and base configuration shared by all experiments.
pub struct Harness<'a, B: VisionBackend> {
    pub backend: &'a B,
    pub bank: &'a TextClassBank,
    pub det_prompts: &'a [String],
    pub cfg: GcConfig,
    pub parallelism: usize,
}

impl<'a, B: VisionBackend + Sync> Harness<'a, B> {
    pub fn new(
        backend: &'a B,
        bank: &'a TextClassBank,
        det_prompts: &'a [String],
        cfg: GcConfig,
        parallelism: usize,
    ) -> Self {
        Self {
            backend,
            bank,
            det_prompts,
            cfg,
            parallelism,
        }
    }

    /// Run the pipeline with the base configuration modified by `aug` and
    /// `alpha`.
    pub fn run(
        &self,
        manifest: &DatasetManifest,
        aug: AugMode,
        alpha: Option<MarginRatio>,
        guided: bool,
    ) -> Result<Vec<PredictionRecord>> {
        let cfg = GcConfig {
            aug,
            alpha: alpha.unwrap_or(self.cfg.alpha),
            ..self.cfg.clone()
        };
        Pipeline::new(self.backend, self.bank, self.det_prompts.to_vec(), cfg)?.run_dataset(
            manifest,
            guided,
            self.parallelism,
        )
    }

    /// Records for each method, with predictions of that method. Methods
    /// sharing an augmentation mode share one run.
    pub fn run_methods(
        &self,
        manifest: &DatasetManifest,
        methods: &[Method],
    ) -> Result<BTreeMap<Method, Vec<PredictionRecord>>> {
        let mut by_aug: BTreeMap<AugMode, bool> = BTreeMap::new();
        for m in methods {
            *by_aug.entry(m.aug()).or_insert(false) |= m.guided();
        }
        let mut runs = BTreeMap::new();
        for (aug, guided) in by_aug {
            runs.insert(aug, self.run(manifest, aug, None, guided)?);
        }
        Ok(methods
            .iter()
            .map(|&m| {
                let mut recs = runs[&m.aug()].clone();
                if !m.guided() {
                    recs.iter_mut().for_each(|r| r.gc = None);
                }
                (m, recs)
            })
            .collect())
    }

    /// Top-1 accuracy per α for GC and GC+RAug. Baseline and GC+MAug do not
    /// depend on α and are repeated on every row.
    pub fn margin_sweep(&self, manifest: &DatasetManifest, alphas: &[f64]) -> Result<Table> {
        let alphas = alphas
            .iter()
            .map(|&a| MarginRatio::new(a))
            .collect::<Result<Vec<_>>>()?;
        let constant = self.run_methods(manifest, &[Method::Baseline, Method::GcMaug])?;
        let acc =
            |recs: &[PredictionRecord]| -> Cell { top1(&recs.iter().collect::<Vec<_>>()).into() };
        let baseline = acc(&constant[&Method::Baseline]);
        let maug = acc(&constant[&Method::GcMaug]);

        let mut table = Table::new(
            "margin_sweep",
            &["alpha", "baseline", "gc", "gc_raug", "gc_maug"],
        )
        .note("metric", "top-1 accuracy (%)")
        .note("gc_maug", "independent of alpha");
        for alpha in alphas {
            let gc = self.run(manifest, AugMode::None, Some(alpha), true)?;
            let gc_raug = self.run(manifest, AugMode::Raug, Some(alpha), true)?;
            table.push(vec![
                alpha.value().into(),
                baseline.clone(),
                acc(&gc),
                acc(&gc_raug),
                maug.clone(),
            ]);
        }
        Ok(table)
    }

    /// Top-1 accuracy of every method on the samples whose relative object
    /// size is at most each sweep threshold.
    pub fn object_size_sweep(&self, manifest: &DatasetManifest) -> Result<Table> {
        let sizes = sample_sizes(manifest)?;
        let runs = self.run_methods(manifest, &Method::ALL)?;
        Ok(size_sweep_table(&sizes, &runs))
    }

    /// Prediction stability of the plain classifier under random crops.
    pub fn stability(
        &self,
        manifest: &DatasetManifest,
        n_crops: usize,
        beta: f64,
    ) -> Result<StabilityReport> {
        let per_sample = map_ordered(&manifest.samples, self.parallelism, |s| {
            let image = self.backend.load_image(&s.image, &manifest.base_dir)?;
            let dims = self.backend.dims(&image);
            let crop_seed = seed::derive(seed::sample_seed(self.cfg.seed, &s.id), &[b"stability"]);
            let mut probs = Vec::with_capacity(n_crops);
            let mut preds = Vec::with_capacity(n_crops);
            for b in raug_boxes(dims, n_crops, beta, crop_seed)? {
                let emb = self.backend.encode_image(&image, &b)?;
                let logits = clip_logits(self.bank, &emb, self.cfg.logit_scale)?;
                probs.push(logits.softmax()[s.label]);
                preds.push(logits.ranking()[0]);
            }
            Ok(sample_stability(&s.id, &probs, &preds))
        })?;
        let samples = per_sample
            .into_iter()
            .zip(&manifest.samples)
            .map(|(r, s)| r.map_err(|e: Error| e.for_sample(&s.id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(StabilityReport::from_samples(
            samples,
            n_crops,
            beta,
            self.cfg.logit_scale,
        ))
    }

    /// Classify with detection scores alone: one detector pass over all
    /// class prompts per image.
    pub fn owl_classifier(&self, manifest: &DatasetManifest) -> Result<AccuracyReport> {
        let n = self.bank.len();
        let out = map_ordered(&manifest.samples, self.parallelism, |s| {
            let image = self.backend.load_image(&s.image, &manifest.base_dir)?;
            let dets = self.backend.detect(&image, self.det_prompts)?;
            Ok::<_, Error>(owl_classifier_logits(&dets, n).ranking())
        })?;
        let mut rankings = Vec::new();
        let mut labels = Vec::new();
        let mut errors = 0;
        for (r, s) in out.into_iter().zip(&manifest.samples) {
            match r {
                Ok(rank) => {
                    rankings.push(rank);
                    labels.push(s.label);
                }
                Err(e) => {
                    log::warn!("{}", e.for_sample(&s.id));
                    errors += 1;
                }
            }
        }
        let acc = topk_accuracy(&rankings, &labels, &REPORT_KS)?;
        Ok(AccuracyReport {
            config: "owl_classifier".into(),
            dataset: manifest.name.clone(),
            samples: labels.len(),
            errors,
            top1: acc[0],
            top5: acc[1],
            top10: acc[2],
        })
    }
}

fn sample_sizes(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            s.size.ok_or_else(|| {
                Error::InvalidInput(format!("sample {} has no computed object size", s.id))
            })
        })
        .collect()
}

/// Size-sweep table from per-method records aligned with `sizes`.
pub fn size_sweep_table(sizes: &[f64], runs: &BTreeMap<Method, Vec<PredictionRecord>>) -> Table {
    let mut columns = vec!["threshold", "samples"];
    columns.extend(runs.keys().map(|m| m.label()));
    let mut table = Table::new("object_size_sweep", &columns)
        .note("metric", "top-1 accuracy (%)")
        .note("filter", "relative object size <= threshold");
    for t in size_sweep_thresholds() {
        let keep: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] <= t).collect();
        let mut row: Vec<Cell> = vec![t.into(), keep.len().into()];
        for recs in runs.values() {
            let subset: Vec<&PredictionRecord> = keep.iter().map(|&i| &recs[i]).collect();
            row.push(top1(&subset).into());
        }
        table.push(row);
    }
    table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStability {
    pub id: String,
    pub true_probs: Vec<f64>,
    pub std: f64,
    pub distinct_predictions: usize,
}

impl SampleStability {
    pub fn stable(&self) -> bool {
        self.distinct_predictions == 1
    }
}

pub fn sample_stability(id: &str, true_probs: &[f64], predictions: &[usize]) -> SampleStability {
    let mut distinct = predictions.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    SampleStability {
        id: id.to_string(),
        true_probs: true_probs.to_vec(),
        std: population_std(true_probs),
        distinct_predictions: distinct.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n_crops: usize,
    pub beta: f64,
    pub logit_scale: f64,
    pub samples: Vec<SampleStability>,
    /// Number of samples per count of distinct predictions.
    pub histogram: BTreeMap<usize, usize>,
    pub stable_fraction: f64,
    pub mean_std: f64,
    pub mean_true_prob: f64,
}

impl StabilityReport {
    pub fn from_samples(
        samples: Vec<SampleStability>,
        n_crops: usize,
        beta: f64,
        logit_scale: f64,
    ) -> Self {
        let mut histogram = BTreeMap::new();
        for s in &samples {
            *histogram.entry(s.distinct_predictions).or_insert(0) += 1;
        }
        let n = samples.len().max(1) as f64;
        let stable = samples.iter().filter(|s| s.stable()).count() as f64;
        let probs: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.true_probs.iter().copied())
            .collect();
        Self {
            n_crops,
            beta,
            logit_scale,
            stable_fraction: if samples.is_empty() { 0.0 } else { stable / n },
            mean_std: samples.iter().map(|s| s.std).sum::<f64>() / n,
            mean_true_prob: probs.iter().sum::<f64>() / probs.len().max(1) as f64,
            samples,
            histogram,
        }
    }

    pub fn sample_table(&self) -> Table {
        let mut t = Table::new(
            "stability",
            &[
                "id",
                "std_true_prob",
                "mean_true_prob",
                "distinct_predictions",
            ],
        )
        .note(
            "probability",
            format!("softmax of logits at scale {}", self.logit_scale),
        )
        .note("std", "population (divide by n)");
        for s in &self.samples {
            let mean = s.true_probs.iter().sum::<f64>() / s.true_probs.len().max(1) as f64;
            t.push(vec![
                s.id.as_str().into(),
                s.std.into(),
                mean.into(),
                s.distinct_predictions.into(),
            ]);
        }
        t
    }

    pub fn histogram_table(&self) -> Table {
        let mut t = Table::new("stability_histogram", &["distinct_predictions", "samples"]);
        for (k, v) in &self.histogram {
            t.push(vec![(*k).into(), (*v).into()]);
        }
        t
    }
}

/// Mean winning logit over correctly classified samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub baseline: Option<f64>,
    pub gc: Option<f64>,
    pub baseline_correct: usize,
    pub gc_correct: usize,
}

pub fn similarity_report(records: &[PredictionRecord]) -> SimilarityReport {
    let mut base = Vec::new();
    let mut gc = Vec::new();
    for r in records.iter().filter(|r| r.error.is_none()) {
        let Some(label) = r.label else { continue };
        if let Some(b) = &r.baseline {
            if b.prediction == label {
                base.push(max(r.baseline_logits()));
            }
        }
        if let Some(g) = &r.gc {
            if g.prediction == label {
                gc.push(max(&g.final_logits));
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    SimilarityReport {
        baseline: mean(&base),
        gc: mean(&gc),
        baseline_correct: base.len(),
        gc_correct: gc.len(),
    }
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Top-5 logits of each sample's configured method, one row per rank.
pub fn logit_dump(records: &[PredictionRecord], classes: &[String]) -> Table {
    let mut t = Table::new(
        "logit_dump",
        &["id", "label", "method", "rank", "class", "logit"],
    );
    for r in records.iter().filter(|r| r.error.is_none()) {
        let label: Cell = r.label.map_or(Cell::Absent, |l| l.into());
        let (method, entries): (&str, Vec<(usize, f64)>) = match &r.gc {
            Some(gc) => {
                let lv = LogitVector::new(gc.final_logits.clone(), 1.0);
                (
                    "gc",
                    lv.ranking()
                        .into_iter()
                        .map(|m| (gc.top_k.classes()[m], gc.final_logits[m]))
                        .collect(),
                )
            }
            None => {
                let logits = r.baseline_logits();
                let lv = LogitVector::new(logits.to_vec(), 1.0);
                (
                    "baseline",
                    lv.ranking().into_iter().map(|c| (c, logits[c])).collect(),
                )
            }
        };
        for (rank, (class, logit)) in entries.into_iter().take(5).enumerate() {
            t.push(vec![
                r.id.as_str().into(),
                label.clone(),
                method.into(),
                (rank + 1).into(),
                classes
                    .get(class)
                    .map_or(Cell::Int(class as i64), |c| c.as_str().into()),
                logit.into(),
            ]);
        }
    }
    t
}
