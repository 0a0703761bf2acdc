//! Seeded synthetic scenes for the fixture backend.
//!
//! Every sample has one object of its true class on a background whose
//! feature leans toward a randomly chosen distractor class. How far it leans
//! is the `confusability`; how much of the image the object covers is drawn
//! from `object_size_range`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, SampleRecord};
use crate::backends::fixture::{
    AbsentPolicy, Background, DetectorFixture, FixtureSet, SceneObject, SceneSpec,
};
use crate::boxgeom::{relative_object_size, BBox, ImageDims};
use crate::error::{Error, Result};
use crate::fusion::Embedding;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_samples: usize,
    pub n_classes: usize,
    pub embedding_dim: usize,
    pub image_side: u32,
    /// Inclusive range of relative object sizes.
    pub object_size_range: (f64, f64),
    /// Cosine between a background feature and its distractor class text.
    pub confusability: f64,
    /// Relative amplitude of the random component in object features.
    pub object_noise: f64,
    /// Shared component between class text features (fine-grained classes).
    pub class_similarity: f64,
    pub jitter: f64,
    /// Per-pass detector failure probability.
    pub fault_rate: f64,
    pub absent: AbsentPolicy,
    pub score_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_classes: 20,
            embedding_dim: 64,
            image_side: 224,
            object_size_range: (0.02, 0.2),
            confusability: 0.2,
            object_noise: 0.3,
            class_similarity: 0.0,
            jitter: 0.05,
            fault_rate: 0.0,
            absent: AbsentPolicy::MostSimilar,
            score_noise: 0.0,
        }
    }
}

impl SynthParams {
    /// Small objects on confusable backgrounds. Same as the default.
    pub fn small_object_suite() -> Self {
        Self::default()
    }

    /// Object sizes spanning the whole image, for size sweeps.
    pub fn size_sweep_suite() -> Self {
        Self {
            object_size_range: (0.02, 1.0),
            ..Self::default()
        }
    }

    /// Every detector pass fails with probability 0.3.
    pub fn fault_suite() -> Self {
        Self {
            fault_rate: 0.3,
            ..Self::default()
        }
    }

    /// Fine-grained classes with noisy, uncalibrated detection scores.
    pub fn confusable_suite() -> Self {
        Self {
            object_size_range: (0.02, 1.0),
            class_similarity: 0.9,
            score_noise: 0.2,
            ..Self::default()
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_size_range;
        let checks = [
            (self.n_classes >= 2, "n_classes must be >= 2"),
            (self.embedding_dim >= 2, "embedding_dim must be >= 2"),
            (self.image_side >= 2, "image_side must be >= 2"),
            (
                lo > 0.0 && lo <= hi && hi <= 1.0,
                "object_size_range must satisfy 0 < lo <= hi <= 1",
            ),
            (
                (0.0..=1.0).contains(&self.confusability),
                "confusability must lie in [0, 1]",
            ),
            (
                (0.0..1.0).contains(&self.class_similarity),
                "class_similarity must lie in [0, 1)",
            ),
            (self.object_noise >= 0.0, "object_noise must be >= 0"),
            (
                (0.0..0.5).contains(&self.jitter),
                "jitter must lie in [0, 0.5)",
            ),
            (
                (0.0..=1.0).contains(&self.fault_rate),
                "fault_rate must lie in [0, 1]",
            ),
            (self.score_noise >= 0.0, "score_noise must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidParameter((*msg).into())),
            None => Ok(()),
        }
    }
}

pub fn class_name(i: usize) -> String {
    format!("class_{i:03}")
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn mix(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Result<Embedding> {
    Embedding::normalized(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

/// Generate a manifest and the matching fixture set. Pure function of
/// `(params, seed)`.
pub fn generate_synthetic_manifest(
    params: &SynthParams,
    seed: u64,
) -> Result<(DatasetManifest, FixtureSet)> {
    params.validate()?;
    let dim = params.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[b"synth"]));

    let common = gaussian_unit(&mut rng, dim);
    let g = params.class_similarity;
    let text: Vec<Embedding> = (0..params.n_classes)
        .map(|_| {
            let own = gaussian_unit(&mut rng, dim);
            mix(&common, g.sqrt(), &own, (1.0 - g).sqrt())
        })
        .collect::<Result<_>>()?;
    let classes: Vec<String> = (0..params.n_classes).map(class_name).collect();

    let side = params.image_side;
    let dims = ImageDims::square(side)?;
    let w = side as f64;
    let (lo, hi) = params.object_size_range;
    let c = params.confusability;

    let mut samples = Vec::with_capacity(params.n_samples);
    let mut scenes = BTreeMap::new();
    for i in 0..params.n_samples {
        let id = format!("synth-{i:05}");
        let label = rng.gen_range(0..params.n_classes);
        let distractor = (label + rng.gen_range(1..params.n_classes)) % params.n_classes;

        let obj_noise = gaussian_unit(&mut rng, dim);
        let object_feature = mix(text[label].as_slice(), 1.0, &obj_noise, params.object_noise)?;
        let bg_noise = gaussian_unit(&mut rng, dim);
        let bg_feature = mix(
            text[distractor].as_slice(),
            c,
            &bg_noise,
            (1.0 - c * c).sqrt(),
        )?;

        let s = rng.gen_range(lo..=hi);
        let a = (s.sqrt() * w).min(w);
        let x = rng.gen_range(0.0..=w - a);
        let y = rng.gen_range(0.0..=w - a);
        let bbox = BBox::new(x, y, x + a, y + a);

        scenes.insert(
            id.clone(),
            SceneSpec {
                dims,
                background: Background {
                    class: Some(classes[distractor].clone()),
                    feature: bg_feature,
                },
                objects: vec![SceneObject {
                    class: classes[label].clone(),
                    bbox,
                    feature: object_feature,
                }],
                seed: seed::derive(seed, &[b"scene", id.as_bytes()]),
            },
        );
        samples.push(SampleRecord {
            id: id.clone(),
            image: id,
            label,
            bbox: Some(bbox),
            mask: None,
            width: Some(side),
            height: Some(side),
            size: Some(relative_object_size(&bbox, dims)),
        });
    }

    let fixture = FixtureSet {
        embedding_dim: dim,
        text_features: classes.iter().cloned().zip(text).collect(),
        prompt_noise: 0.0,
        detector: DetectorFixture {
            jitter: params.jitter,
            failure_rate: params.fault_rate,
            absent: params.absent,
            score_noise: params.score_noise,
        },
        scenes,
    };
    let manifest = DatasetManifest::new("synthetic", classes, samples)?;
    Ok((manifest, fixture))
}
