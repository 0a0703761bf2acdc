//! Candidate box extraction from an open-vocabulary detector, primary box
//! selection, and the detector-as-classifier baseline.

use serde::{Deserialize, Serialize};

use crate::backends::VisionBackend;
use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::fusion::{LogitVector, TopKSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DetectionStrategy {
    /// One detector pass per top-k class prompt.
    #[default]
    #[serde(rename = "multi")]
    MultiPass,
    /// One detector pass with all top-k prompts.
    #[serde(rename = "single")]
    SinglePass,
}

/// Candidate boxes for one image, ordered by the rank of their class in the
/// requesting top-k set.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub detections: Vec<Detection>,
    pub source: DetectionStrategy,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }
}

fn best_above(dets: Vec<Detection>, floor: f64) -> Option<Detection> {
    dets.into_iter()
        .filter(|d| d.score >= floor)
        .reduce(|best, d| if d.score > best.score { d } else { best })
}

/// Query the detector once per top-k class and keep each pass's max-score
/// box. Classes whose pass yields nothing at or above `score_floor` are
/// skipped.
pub fn extract_candidates_multipass<B: VisionBackend>(
    backend: &B,
    image: &B::Image,
    topk: &TopKSet,
    det_prompts: &[String],
    score_floor: f64,
) -> Result<CandidateSet> {
    let mut detections = Vec::with_capacity(topk.len());
    for &class in topk.classes() {
        let prompt = prompt_for(det_prompts, class)?;
        let found = backend.detect(image, std::slice::from_ref(prompt))?;
        if let Some(mut d) = best_above(found, score_floor) {
            d.class_index = class;
            detections.push(d);
        }
    }
    Ok(CandidateSet {
        detections,
        source: DetectionStrategy::MultiPass,
    })
}

/// Query the detector once with every top-k prompt and use its output
/// directly.
pub fn extract_candidates_singlepass<B: VisionBackend>(
    backend: &B,
    image: &B::Image,
    topk: &TopKSet,
    det_prompts: &[String],
    score_floor: f64,
) -> Result<CandidateSet> {
    let prompts = topk
        .classes()
        .iter()
        .map(|&c| prompt_for(det_prompts, c).cloned())
        .collect::<Result<Vec<_>>>()?;
    let mut detections: Vec<Detection> = backend
        .detect(image, &prompts)?
        .into_iter()
        .filter(|d| d.score >= score_floor && d.class_index < topk.len())
        .collect();
    detections.sort_by_key(|d| d.class_index);
    for d in &mut detections {
        d.class_index = topk.classes()[d.class_index];
    }
    Ok(CandidateSet {
        detections,
        source: DetectionStrategy::SinglePass,
    })
}

pub fn extract_candidates<B: VisionBackend>(
    strategy: DetectionStrategy,
    backend: &B,
    image: &B::Image,
    topk: &TopKSet,
    det_prompts: &[String],
    score_floor: f64,
) -> Result<CandidateSet> {
    match strategy {
        DetectionStrategy::MultiPass => {
            extract_candidates_multipass(backend, image, topk, det_prompts, score_floor)
        }
        DetectionStrategy::SinglePass => {
            extract_candidates_singlepass(backend, image, topk, det_prompts, score_floor)
        }
    }
}

fn prompt_for(det_prompts: &[String], class: usize) -> Result<&String> {
    det_prompts.get(class).ok_or_else(|| {
        Error::InvalidInput(format!(
            "no detection prompt for class {class} ({} prompts)",
            det_prompts.len()
        ))
    })
}

/// Highest-score candidate. Ties go to the candidate listed first, which is
/// the class ranked higher in top-k.
pub fn primary_box(candidates: &CandidateSet) -> Result<&Detection> {
    let mut iter = candidates.detections.iter();
    let first = iter.next().ok_or(Error::NoCandidate)?;
    Ok(iter.fold(first, |best, d| if d.score > best.score { d } else { best }))
}

/// Class logits from detections alone: the maximum box score per class, zero
/// for classes without a box.
pub fn owl_classifier_logits(all_detections: &[Detection], n_classes: usize) -> LogitVector {
    let mut scores = vec![0.0; n_classes];
    for d in all_detections {
        if let Some(s) = scores.get_mut(d.class_index) {
            *s = f64::max(*s, d.score);
        }
    }
    LogitVector::new(scores, 1.0)
}
