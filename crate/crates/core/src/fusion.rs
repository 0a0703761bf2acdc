//! Similarity scoring between image and class-text embeddings.
//!
//! Embeddings are unit-normalized at the backend boundary. Logits are the
//! cosine similarity times an explicit scale, so decisions never depend on
//! the scale while reported magnitudes match contrastive-model conventions.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
pub const DEFAULT_TEMPLATE: &str = "a photo of a {name}";

/// Unit-norm feature vector shared by the image and text encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    /// Normalize `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidInput(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wrap a vector that is already unit length.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if (norm - 1.0).abs() > Self::NORM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "embedding norm {norm} is not 1 within {}",
                Self::NORM_TOLERANCE
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidInput(format!(
                "embedding dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::from_unit(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean of the prompt embeddings of one class, renormalized.
pub fn class_text_embedding(prompt_embeddings: &[Embedding]) -> Result<Embedding> {
    let first = prompt_embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("class has no prompt embeddings".into()))?;
    if prompt_embeddings.len() == 1 {
        return Ok(first.clone());
    }
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for e in prompt_embeddings {
        if e.dim() != dim {
            return Err(Error::InvalidInput(format!(
                "prompt embedding dimension mismatch: {} vs {dim}",
                e.dim()
            )));
        }
        for (s, v) in sum.iter_mut().zip(e.as_slice()) {
            *s += v;
        }
    }
    let n = prompt_embeddings.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    if l2(&mean) <= f64::EPSILON {
        return Err(Error::DegeneratePrompt(format!(
            "{} prompts",
            prompt_embeddings.len()
        )));
    }
    Embedding::normalized(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Category,
    Descriptions,
}

/// How multiple prompts of one class are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Average the per-prompt logits.
    #[default]
    Logit,
    /// Score against the renormalized mean prompt embedding.
    Embedding,
}

/// Text embeddings for every class of a classification problem.
#[derive(Debug, Clone)]
pub struct TextClassBank {
    classes: Vec<String>,
    prompts: Vec<Vec<Embedding>>,
    class_embeddings: Vec<Embedding>,
    mode: PromptMode,
    aggregation: Aggregation,
}

impl TextClassBank {
    pub fn new(
        classes: Vec<String>,
        prompts: Vec<Vec<Embedding>>,
        mode: PromptMode,
        aggregation: Aggregation,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidInput(
                "class bank needs at least one class".into(),
            ));
        }
        if classes.len() != prompts.len() {
            return Err(Error::InvalidInput(format!(
                "{} class names but {} prompt sets",
                classes.len(),
                prompts.len()
            )));
        }
        let class_embeddings = prompts
            .iter()
            .zip(&classes)
            .map(|(p, name)| {
                class_text_embedding(p).map_err(|e| match e {
                    Error::DegeneratePrompt(_) => Error::DegeneratePrompt(name.clone()),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = class_embeddings[0].dim();
        if class_embeddings.iter().any(|e| e.dim() != dim) {
            return Err(Error::InvalidInput(
                "class embeddings have mixed dimensions".into(),
            ));
        }
        Ok(Self {
            classes,
            prompts,
            class_embeddings,
            mode,
            aggregation,
        })
    }

    /// One embedding per class, used as-is.
    pub fn from_class_embeddings(classes: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        let prompts = embeddings.into_iter().map(|e| vec![e]).collect();
        Self::new(classes, prompts, PromptMode::Category, Aggregation::Logit)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.class_embeddings[0].dim()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn class_embedding(&self, class: usize) -> &Embedding {
        &self.class_embeddings[class]
    }

    /// Unscaled similarity of one class against an image embedding.
    pub fn similarity(&self, class: usize, image: &Embedding) -> Result<f64> {
        match self.aggregation {
            Aggregation::Embedding => self.class_embeddings[class].dot(image),
            Aggregation::Logit => {
                let prompts = &self.prompts[class];
                let mut sum = 0.0;
                for p in prompts {
                    sum += p.dot(image)?;
                }
                Ok(sum / prompts.len() as f64)
            }
        }
    }
}

/// Per-class similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub scores: Vec<f64>,
    pub scale: f64,
}

impl LogitVector {
    pub fn new(scores: Vec<f64>, scale: f64) -> Self {
        Self { scores, scale }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Softmax of the scaled scores.
    pub fn softmax(&self) -> Vec<f64> {
        let max = self
            .scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// All positions, highest score first, ties to the lower position.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| desc_then_index(self.scores[a], a, self.scores[b], b));
        idx
    }
}

fn desc_then_index(sa: f64, a: usize, sb: f64, b: usize) -> Ordering {
    sb.total_cmp(&sa).then(a.cmp(&b))
}

/// Ordered top-k class indices, highest preliminary logit first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopKSet(Vec<usize>);

impl TopKSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() || indices.is_empty() {
            return Err(Error::InvalidInput(
                "top-k set needs distinct, non-empty indices".into(),
            ));
        }
        Ok(Self(indices))
    }

    pub fn classes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.contains(&class)
    }

    /// Position of a class within the set.
    pub fn rank_of(&self, class: usize) -> Option<usize> {
        self.0.iter().position(|&c| c == class)
    }
}

pub fn clip_logits(bank: &TextClassBank, image: &Embedding, scale: f64) -> Result<LogitVector> {
    check_dim(bank, image)?;
    let scores = (0..bank.len())
        .map(|j| bank.similarity(j, image).map(|s| scale * s))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitVector::new(scores, scale))
}

pub fn top_k(logits: &LogitVector, k: usize) -> Result<TopKSet> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidParameter(format!(
            "k must lie in 1..={}, got {k}",
            logits.len()
        )));
    }
    let mut ranked = logits.ranking();
    ranked.truncate(k);
    Ok(TopKSet(ranked))
}

/// Logits of the top-k classes only, in top-k order.
pub fn gc_logits(
    bank: &TextClassBank,
    topk: &TopKSet,
    crop: &Embedding,
    scale: f64,
) -> Result<LogitVector> {
    check_dim(bank, crop)?;
    let scores = topk
        .classes()
        .iter()
        .map(|&j| {
            if j >= bank.len() {
                return Err(Error::InvalidInput(format!(
                    "top-k class {j} outside bank of {}",
                    bank.len()
                )));
            }
            bank.similarity(j, crop).map(|s| scale * s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitVector::new(scores, scale))
}

pub fn average_logits(list: &[LogitVector]) -> Result<LogitVector> {
    let first = list
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average an empty logit list".into()))?;
    let n = first.len();
    let mut sum = vec![0.0; n];
    for l in list {
        if l.len() != n {
            return Err(Error::InvalidInput(format!(
                "logit length mismatch: {} vs {n}",
                l.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(&l.scores) {
            *s += v;
        }
    }
    let count = list.len() as f64;
    Ok(LogitVector::new(
        sum.into_iter().map(|s| s / count).collect(),
        first.scale,
    ))
}

/// Argmax class. With `index_map`, position `m` of the logits stands for
/// class `index_map[m]`; ties go to the lower class index after mapping.
pub fn predict(logits: &LogitVector, index_map: Option<&TopKSet>) -> usize {
    let class_of = |m: usize| index_map.map_or(m, |t| t.0[m]);
    let mut best = 0;
    for m in 1..logits.len() {
        let (s, b) = (logits.scores[m], logits.scores[best]);
        if s > b || (s == b && class_of(m) < class_of(best)) {
            best = m;
        }
    }
    class_of(best)
}

fn check_dim(bank: &TextClassBank, image: &Embedding) -> Result<()> {
    if bank.dim() != image.dim() {
        return Err(Error::InvalidInput(format!(
            "image embedding has dimension {}, text bank has {}",
            image.dim(),
            bank.dim()
        )));
    }
    Ok(())
}
