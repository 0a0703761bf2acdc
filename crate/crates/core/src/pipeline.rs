//! Baseline and guided-cropping classification flows.
//!
//! Guided cropping runs in this order for every image:
//!
//! 1. full-image logits over all classes (never augmented);
//! 2. top-k classes of those logits;
//! 3. candidate boxes from the detector for the top-k prompts;
//! 4. the highest-score candidate as primary box, or the full image when the
//!    detector found nothing;
//! 5. square adjustment;
//! 6. crop boxes: one α-margin box, random crops of the α-margin crop, or the
//!    multi-margin chain (α unused);
//! 7. top-k logits for each crop, averaged;
//! 8. argmax within top-k.

use serde::{Deserialize, Serialize};

use crate::backends::VisionBackend;
use crate::boxgeom::{
    enlarge_margin, maug_boxes, raug_boxes, square_adjust, BBox, ImageDims, MarginRatio,
};
use crate::datasets::DatasetManifest;
use crate::detection::{extract_candidates, primary_box, Detection, DetectionStrategy};
use crate::error::{Error, Result};
use crate::fusion::{
    average_logits, clip_logits, gc_logits, predict, top_k, Embedding, LogitVector, TextClassBank,
    TopKSet, DEFAULT_LOGIT_SCALE,
};
use crate::parallel::map_ordered;
use crate::seed;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    #[default]
    None,
    Raug,
    Maug,
}

/// Frame in which random crops of the α-margin crop are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaugFrame {
    /// Crop the resized α-margin image, then resize again.
    #[default]
    Cropped,
    /// Map the crop boxes back to the original image and crop once.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcConfig {
    pub k: usize,
    pub alpha: MarginRatio,
    pub aug: AugMode,
    pub n_aug: usize,
    pub beta: f64,
    pub raug_frame: RaugFrame,
    pub logit_scale: f64,
    pub detection: DetectionStrategy,
    pub seed: u64,
    /// Detections scoring below this count as misses.
    pub score_floor: f64,
}

impl GcConfig {
    pub const DEFAULT_ALPHA: f64 = 0.2;
}

impl Default for GcConfig {
    fn default() -> Self {
        Self {
            k: 5,
            alpha: MarginRatio::new(Self::DEFAULT_ALPHA).expect("default margin in range"),
            aug: AugMode::None,
            n_aug: 11,
            beta: 0.9,
            raug_frame: RaugFrame::Cropped,
            logit_scale: DEFAULT_LOGIT_SCALE,
            detection: DetectionStrategy::MultiPass,
            seed: 0,
            score_floor: 0.0,
        }
    }
}

impl GcConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.k == 0 || self.k > n_classes {
            return Err(Error::InvalidParameter(format!(
                "k must lie in 1..={n_classes}, got {}",
                self.k
            )));
        }
        match self.aug {
            AugMode::Maug if self.n_aug < 2 => {
                return Err(Error::InvalidParameter(
                    "multi-margin augmentation needs n_aug >= 2".into(),
                ))
            }
            AugMode::Raug if self.n_aug == 0 => {
                return Err(Error::InvalidParameter("n_aug must be >= 1".into()))
            }
            _ => {}
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidParameter(
                "logit_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Warnings about settings that have no effect.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.aug == AugMode::Maug && self.alpha.value() != Self::DEFAULT_ALPHA {
            w.push(format!(
                "alpha={} is ignored with multi-margin augmentation",
                self.alpha.value()
            ));
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub prediction: usize,
    /// Averaged random-crop logits; absent when equal to the preliminary
    /// logits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcRecord {
    pub prediction: usize,
    pub top_k: TopKSet,
    /// Absent when the detector returned no candidate.
    pub primary: Option<Detection>,
    pub crops: Vec<BBox>,
    pub aug_logits: Vec<Vec<f64>>,
    pub final_logits: Vec<f64>,
}

impl GcRecord {
    pub fn fallback(&self) -> bool {
        self.primary.is_none()
    }

    /// Refined top-k order followed by the remaining classes in preliminary
    /// order.
    pub fn ranking(&self, preliminary: &[f64]) -> Vec<usize> {
        let refined = LogitVector::new(self.final_logits.clone(), 1.0);
        let mut order: Vec<usize> = refined
            .ranking()
            .into_iter()
            .map(|m| self.top_k.classes()[m])
            .collect();
        // keep the predicted class first under ties
        if let Some(pos) = order.iter().position(|&c| c == self.prediction) {
            let p = order.remove(pos);
            order.insert(0, p);
        }
        let rest = LogitVector::new(preliminary.to_vec(), 1.0)
            .ranking()
            .into_iter()
            .filter(|c| !self.top_k.contains(*c));
        order.extend(rest);
        order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preliminary_logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gc: Option<GcRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    fn failed(id: &str, label: Option<usize>, err: Error) -> Self {
        Self {
            id: id.to_string(),
            label,
            preliminary_logits: Vec::new(),
            baseline: None,
            gc: None,
            error: Some(err.to_string()),
        }
    }

    pub fn baseline_logits(&self) -> &[f64] {
        self.baseline
            .as_ref()
            .and_then(|b| b.logits.as_deref())
            .unwrap_or(&self.preliminary_logits)
    }

    /// Final prediction of the configured method.
    pub fn prediction(&self) -> Option<usize> {
        match (&self.gc, &self.baseline) {
            (Some(gc), _) => Some(gc.prediction),
            (None, Some(b)) => Some(b.prediction),
            _ => None,
        }
    }

    /// Class ranking of the configured method, best first.
    pub fn ranking(&self) -> Option<Vec<usize>> {
        if self.error.is_some() {
            return None;
        }
        Some(match &self.gc {
            Some(gc) => gc.ranking(&self.preliminary_logits),
            None => LogitVector::new(self.baseline_logits().to_vec(), 1.0).ranking(),
        })
    }
}

/// Classifier bound to a backend, class bank and configuration.
pub struct Pipeline<'a, B: VisionBackend> {
    backend: &'a B,
    bank: &'a TextClassBank,
    det_prompts: Vec<String>,
    cfg: GcConfig,
}

impl<'a, B: VisionBackend> Pipeline<'a, B> {
    pub fn new(
        backend: &'a B,
        bank: &'a TextClassBank,
        det_prompts: Vec<String>,
        cfg: GcConfig,
    ) -> Result<Self> {
        cfg.validate(bank.len())?;
        if det_prompts.len() != bank.len() {
            return Err(Error::InvalidInput(format!(
                "{} detection prompts for {} classes",
                det_prompts.len(),
                bank.len()
            )));
        }
        Ok(Self {
            backend,
            bank,
            det_prompts,
            cfg,
        })
    }

    pub fn config(&self) -> &GcConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &B {
        self.backend
    }

    pub fn bank(&self) -> &TextClassBank {
        self.bank
    }

    fn crop_logits(&self, image: &B::Image, crop: &BBox) -> Result<LogitVector> {
        let emb = self.backend.encode_image(image, crop)?;
        clip_logits(self.bank, &emb, self.cfg.logit_scale)
    }

    /// Full-image logits over all classes.
    pub fn preliminary(&self, image: &B::Image) -> Result<LogitVector> {
        let dims = self.backend.dims(image);
        self.crop_logits(image, &dims.full_box())
    }

    /// Baseline classification over all classes, with optional random-crop
    /// augmentation. Multi-margin augmentation needs a primary box and does
    /// not apply here.
    pub fn classify_baseline(
        &self,
        image: &B::Image,
        preliminary: &LogitVector,
        sample_seed: u64,
    ) -> Result<BaselineRecord> {
        if self.cfg.aug != AugMode::Raug {
            return Ok(BaselineRecord {
                prediction: predict(preliminary, None),
                logits: None,
            });
        }
        let dims = self.backend.dims(image);
        let boxes = raug_boxes(
            dims,
            self.cfg.n_aug,
            self.cfg.beta,
            seed::derive(sample_seed, &[b"baseline-raug"]),
        )?;
        let logits = boxes
            .iter()
            .map(|b| self.crop_logits(image, b))
            .collect::<Result<Vec<_>>>()?;
        let avg = average_logits(&logits)?;
        Ok(BaselineRecord {
            prediction: predict(&avg, None),
            logits: Some(avg.scores),
        })
    }

    /// Random boxes in the resized α-margin frame.
    fn raug_local_boxes(&self, sample_seed: u64) -> Result<Vec<BBox>> {
        let frame = ImageDims::square(self.backend.input_side())?;
        raug_boxes(
            frame,
            self.cfg.n_aug,
            self.cfg.beta,
            seed::derive(sample_seed, &[b"gc-raug"]),
        )
    }

    /// Crop boxes in original image coordinates for the configured
    /// augmentation around a square primary box.
    pub fn crop_boxes(
        &self,
        square: &BBox,
        dims: ImageDims,
        sample_seed: u64,
    ) -> Result<Vec<BBox>> {
        match self.cfg.aug {
            AugMode::None => Ok(vec![enlarge_margin(square, dims, self.cfg.alpha)]),
            AugMode::Raug => {
                let margin_box = enlarge_margin(square, dims, self.cfg.alpha);
                let side = self.backend.input_side() as f64;
                Ok(self
                    .raug_local_boxes(sample_seed)?
                    .iter()
                    .map(|b| margin_box.compose(b, side).clamp_to(dims))
                    .collect())
            }
            AugMode::Maug => maug_boxes(square, dims, self.cfg.n_aug),
        }
    }

    fn crop_embeddings(
        &self,
        image: &B::Image,
        square: &BBox,
        dims: ImageDims,
        sample_seed: u64,
    ) -> Result<(Vec<BBox>, Vec<Embedding>)> {
        let crops = self.crop_boxes(square, dims, sample_seed)?;
        if self.cfg.aug == AugMode::Raug && self.cfg.raug_frame == RaugFrame::Cropped {
            let margin_box = enlarge_margin(square, dims, self.cfg.alpha);
            let resized = self.backend.crop(image, &margin_box)?;
            let embeddings = self
                .raug_local_boxes(sample_seed)?
                .iter()
                .map(|b| self.backend.encode_image(&resized, b))
                .collect::<Result<Vec<_>>>()?;
            return Ok((crops, embeddings));
        }
        let embeddings = crops
            .iter()
            .map(|c| self.backend.encode_image(image, c))
            .collect::<Result<Vec<_>>>()?;
        Ok((crops, embeddings))
    }

    pub fn classify_gc(
        &self,
        image: &B::Image,
        preliminary: &LogitVector,
        sample_seed: u64,
    ) -> Result<GcRecord> {
        let dims = self.backend.dims(image);
        let topk = top_k(preliminary, self.cfg.k)?;
        let candidates = extract_candidates(
            self.cfg.detection,
            self.backend,
            image,
            &topk,
            &self.det_prompts,
            self.cfg.score_floor,
        )?;
        let primary = primary_box(&candidates).ok().cloned();
        let base = primary
            .as_ref()
            .map_or(dims.full_box(), |d| d.bbox.clamp_to(dims));
        let square = square_adjust(&base, dims);
        let (crops, embeddings) = self.crop_embeddings(image, &square, dims, sample_seed)?;

        let per_crop = embeddings
            .iter()
            .map(|e| gc_logits(self.bank, &topk, e, self.cfg.logit_scale))
            .collect::<Result<Vec<_>>>()?;
        let final_logits = average_logits(&per_crop)?;
        Ok(GcRecord {
            prediction: predict(&final_logits, Some(&topk)),
            top_k: topk,
            primary,
            crops,
            aug_logits: per_crop.into_iter().map(|l| l.scores).collect(),
            final_logits: final_logits.scores,
        })
    }

    /// Classify one image: baseline always, guided cropping when `guided`.
    pub fn classify(
        &self,
        image: &B::Image,
        sample_id: &str,
        label: Option<usize>,
        guided: bool,
    ) -> Result<PredictionRecord> {
        let sample_seed = seed::sample_seed(self.cfg.seed, sample_id);
        let preliminary = self.preliminary(image)?;
        let baseline = self.classify_baseline(image, &preliminary, sample_seed)?;
        let gc = if guided {
            Some(self.classify_gc(image, &preliminary, sample_seed)?)
        } else {
            None
        };
        Ok(PredictionRecord {
            id: sample_id.to_string(),
            label,
            preliminary_logits: preliminary.scores,
            baseline: Some(baseline),
            gc,
            error: None,
        })
    }
}

impl<'a, B: VisionBackend + Sync> Pipeline<'a, B> {
    /// One record per manifest sample, in manifest order. Failures are kept
    /// as per-sample error records.
    pub fn run_dataset(
        &self,
        manifest: &DatasetManifest,
        guided: bool,
        parallelism: usize,
    ) -> Result<Vec<PredictionRecord>>
    where
        Self: Sync,
    {
        map_ordered(&manifest.samples, parallelism, |s| {
            let label = Some(s.label);
            self.backend
                .load_image(&s.image, &manifest.base_dir)
                .and_then(|img| self.classify(&img, &s.id, label, guided))
                .unwrap_or_else(|e| PredictionRecord::failed(&s.id, label, e.for_sample(&s.id)))
        })
    }
}
