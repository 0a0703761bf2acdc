//! Analytic fixture backend.
//!
//! A scene is a background feature plus boxed objects with their own
//! features. Encoding a crop mixes the features by their share of the crop
//! area, which reproduces the failure mode guided cropping targets: a small
//! object is drowned out by a large, confusable background. The detector
//! returns (optionally jittered) object boxes scored by feature similarity,
//! with seed-deterministic fault injection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::VisionBackend;
use crate::boxgeom::{BBox, ImageDims};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::fusion::Embedding;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub feature: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: String,
    pub bbox: BBox,
    pub feature: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: ImageDims,
    pub background: Background,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    /// Seed for the scene's detector randomness.
    #[serde(default)]
    pub seed: u64,
}

/// What the detector reports for a prompt whose class is not in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentPolicy {
    /// Nothing.
    #[default]
    NoBox,
    /// The box of the most similar object, as a real detector confusing
    /// fine-grained classes would.
    MostSimilar,
    /// A background box scored against the background feature.
    Decoy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorFixture {
    /// Max corner offset as a fraction of the box extent on that axis.
    pub jitter: f64,
    /// Probability that a whole forward pass returns nothing.
    pub failure_rate: f64,
    pub absent: AbsentPolicy,
    /// Amplitude of uniform noise added to the cosine before score mapping.
    pub score_noise: f64,
}

impl Default for DetectorFixture {
    fn default() -> Self {
        Self {
            jitter: 0.0,
            failure_rate: 0.0,
            absent: AbsentPolicy::NoBox,
            score_noise: 0.0,
        }
    }
}

/// Everything a fixture backend serves: class text features, detector
/// behaviour and scenes keyed by image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSet {
    pub embedding_dim: usize,
    pub text_features: BTreeMap<String, Embedding>,
    /// Perturbation applied to prompts that are not a bare class name.
    #[serde(default)]
    pub prompt_noise: f64,
    #[serde(default)]
    pub detector: DetectorFixture,
    pub scenes: BTreeMap<String, SceneSpec>,
}

impl FixtureSet {
    pub fn validate(&self) -> Result<()> {
        let dim_ok = |e: &Embedding| e.dim() == self.embedding_dim;
        if let Some((name, _)) = self.text_features.iter().find(|(_, e)| !dim_ok(e)) {
            return Err(Error::InvalidInput(format!(
                "text feature '{name}' does not have dimension {}",
                self.embedding_dim
            )));
        }
        for (id, scene) in &self.scenes {
            if !dim_ok(&scene.background.feature)
                || !scene.objects.iter().all(|o| dim_ok(&o.feature))
            {
                return Err(Error::InvalidInput(format!(
                    "scene {id}: feature dimension differs from {}",
                    self.embedding_dim
                )));
            }
            if let Some(o) = scene.objects.iter().find(|o| !o.bbox.is_within(scene.dims)) {
                return Err(Error::InvalidInput(format!(
                    "scene {id}: object box {:?} outside the image",
                    <[f64; 4]>::from(o.bbox)
                )));
            }
        }
        let d = &self.detector;
        if !(0.0..=1.0).contains(&d.failure_rate) || !(0.0..0.5).contains(&d.jitter) {
            return Err(Error::InvalidParameter(
                "detector failure_rate must lie in [0,1] and jitter in [0,0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// The part of `scene` inside `crop`, stretched to a `side`×`side` frame.
/// Objects outside the crop are dropped and partial objects are clipped.
pub fn fixture_crop(scene: &SceneSpec, crop: &BBox, side: u32) -> Result<SceneSpec> {
    if !crop.is_valid() || crop.area() <= 0.0 {
        return Err(Error::InvalidCrop(format!(
            "fixture crop {:?} has zero area",
            <[f64; 4]>::from(*crop)
        )));
    }
    let dims = ImageDims::square(side)?;
    let objects = scene
        .objects
        .iter()
        .filter_map(|o| {
            let visible = o.bbox.intersection(crop)?;
            Some(SceneObject {
                class: o.class.clone(),
                bbox: crop.project(&visible, side as f64).clamp_to(dims),
                feature: o.feature.clone(),
            })
        })
        .collect();
    Ok(SceneSpec {
        dims,
        background: scene.background.clone(),
        objects,
        seed: scene.seed,
    })
}

/// Area-weighted feature mix of everything visible in `crop`.
pub fn fixture_encode(scene: &SceneSpec, crop: &BBox) -> Result<Embedding> {
    let area = crop.area();
    if !crop.is_valid() || area.is_nan() || area <= 0.0 {
        return Err(Error::InvalidCrop(format!(
            "fixture crop {:?} has zero area",
            <[f64; 4]>::from(*crop)
        )));
    }
    let mut weights: Vec<f64> = scene
        .objects
        .iter()
        .map(|o| o.bbox.intersection_area(crop) / area)
        .collect();
    let covered: f64 = weights.iter().sum();
    let background = if covered > 1.0 {
        weights.iter_mut().for_each(|w| *w /= covered);
        0.0
    } else {
        1.0 - covered
    };

    // Merge identical features so a single-feature scene encodes exactly.
    let mut mix: Vec<(&Embedding, f64)> = Vec::new();
    let parts = std::iter::once((&scene.background.feature, background))
        .chain(scene.objects.iter().map(|o| &o.feature).zip(weights));
    for (feature, w) in parts.filter(|(_, w)| *w > 0.0) {
        match mix.iter_mut().find(|(f, _)| *f == feature) {
            Some(entry) => entry.1 += w,
            None => mix.push((feature, w)),
        }
    }
    if let [(only, _)] = mix.as_slice() {
        return Ok((*only).clone());
    }
    let mut sum = vec![0.0; scene.background.feature.dim()];
    for (feature, w) in &mix {
        for (s, v) in sum.iter_mut().zip(feature.as_slice()) {
            *s += w * v;
        }
    }
    Embedding::normalized(sum)
        .map_err(|_| Error::Backend("fixture crop features cancel to a zero vector".into()))
}

fn score_of(cosine: f64, noise: f64) -> f64 {
    ((cosine + noise + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn jitter_box(bbox: &BBox, dims: ImageDims, fraction: f64, seed: u64) -> BBox {
    if fraction == 0.0 {
        return *bbox;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (jx, jy) = (fraction * bbox.width(), fraction * bbox.height());
    let mut off = |j: f64| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    BBox::new(
        bbox.min_x + off(jx),
        bbox.min_y + off(jy),
        bbox.max_x + off(jx),
        bbox.max_y + off(jy),
    )
    .clamp_to(dims)
}

/// A resolved detection prompt.
#[derive(Debug, Clone)]
pub struct PromptQuery<'a> {
    pub class: &'a str,
    pub feature: &'a Embedding,
}

/// One detector forward pass over `queries`.
///
/// Each object is assigned to the query that scores it highest among the
/// queries that can see it, and every query keeps its best-scoring box.
/// With a single query this is "the max-score box for that prompt".
pub fn fixture_detect(
    scene: &SceneSpec,
    queries: &[PromptQuery<'_>],
    cfg: &DetectorFixture,
) -> Vec<Detection> {
    let pass_key: Vec<&[u8]> = std::iter::once(b"pass".as_slice())
        .chain(queries.iter().map(|q| q.class.as_bytes()))
        .collect();
    if cfg.failure_rate > 0.0 && seed::unit(seed::derive(scene.seed, &pass_key)) < cfg.failure_rate
    {
        return Vec::new();
    }

    let noise = |obj: &[u8], class: &str| {
        if cfg.score_noise == 0.0 {
            0.0
        } else {
            let u = seed::unit(seed::derive(scene.seed, &[b"score", obj, class.as_bytes()]));
            cfg.score_noise * (2.0 * u - 1.0)
        }
    };

    let mut best: Vec<Option<Detection>> = vec![None; queries.len()];
    let mut offer = |q: usize, d: Detection| {
        if best[q].as_ref().is_none_or(|b| d.score > b.score) {
            best[q] = Some(d);
        }
    };

    for (i, obj) in scene.objects.iter().enumerate() {
        let obj_key = i.to_le_bytes();
        let mut assigned: Option<(usize, f64)> = None;
        for (q, query) in queries.iter().enumerate() {
            let visible = obj.class == query.class || cfg.absent == AbsentPolicy::MostSimilar;
            if !visible {
                continue;
            }
            let cosine = query.feature.dot(&obj.feature).unwrap_or(-1.0);
            let score = score_of(cosine, noise(&obj_key, query.class));
            if assigned.is_none_or(|(_, s)| score > s) {
                assigned = Some((q, score));
            }
        }
        if let Some((q, score)) = assigned {
            let jitter_seed = seed::derive(
                scene.seed,
                &[b"jitter", &obj_key, queries[q].class.as_bytes()],
            );
            offer(
                q,
                Detection {
                    bbox: jitter_box(&obj.bbox, scene.dims, cfg.jitter, jitter_seed),
                    score,
                    class_index: q,
                },
            );
        }
    }

    if cfg.absent == AbsentPolicy::Decoy {
        for (q, query) in queries.iter().enumerate() {
            if best[q].is_some() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                scene.seed,
                &[b"decoy", query.class.as_bytes()],
            ));
            let side = 0.25 * scene.dims.short_side();
            let x = rng.gen_range(0.0..=scene.dims.width as f64 - side);
            let y = rng.gen_range(0.0..=scene.dims.height as f64 - side);
            let cosine = query.feature.dot(&scene.background.feature).unwrap_or(-1.0);
            best[q] = Some(Detection {
                bbox: BBox::new(x, y, x + side, y + side),
                score: score_of(cosine, noise(b"decoy", query.class)),
                class_index: q,
            });
        }
    }

    best.into_iter().flatten().collect()
}

/// Backend serving a [`FixtureSet`].
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    set: FixtureSet,
    fingerprint: String,
    input_side: u32,
}

impl FixtureBackend {
    pub const FILE_NAME: &'static str = "fixture.json";

    pub fn new(set: FixtureSet) -> Result<Self> {
        set.validate()?;
        let fingerprint = hex::encode(Sha256::digest(serde_json::to_vec(&set)?));
        Ok(Self {
            set,
            fingerprint,
            input_side: 224,
        })
    }

    /// Load `fixture.json` from a directory, or the given file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let set: FixtureSet = serde_json::from_slice(&bytes).map_err(|e| Error::parse(&file, e))?;
        Self::new(set)
    }

    pub fn set(&self) -> &FixtureSet {
        &self.set
    }

    pub fn scene(&self, id: &str) -> Option<&SceneSpec> {
        self.set.scenes.get(id)
    }

    /// Resolve a prompt to a class: exact class name first, otherwise the
    /// longest class name contained in the prompt.
    fn resolve(&self, prompt: &str) -> Result<(&str, &Embedding)> {
        if let Some((name, e)) = self.set.text_features.get_key_value(prompt) {
            return Ok((name.as_str(), e));
        }
        self.set
            .text_features
            .iter()
            .filter(|(name, _)| prompt.contains(name.as_str()))
            .max_by_key(|(name, _)| name.len())
            .map(|(name, e)| (name.as_str(), e))
            .ok_or_else(|| {
                Error::Backend(format!("fixture has no class matching prompt '{prompt}'"))
            })
    }
}

impl VisionBackend for FixtureBackend {
    type Image = SceneSpec;

    fn name(&self) -> &'static str {
        "fixture"
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn input_side(&self) -> u32 {
        self.input_side
    }

    fn load_image(&self, image_ref: &str, _base_dir: &Path) -> Result<SceneSpec> {
        self.scene(image_ref)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("unknown fixture scene '{image_ref}'")))
    }

    fn dims(&self, image: &SceneSpec) -> ImageDims {
        image.dims
    }

    fn encode_image(&self, image: &SceneSpec, crop: &BBox) -> Result<Embedding> {
        fixture_encode(image, crop)
    }

    fn crop(&self, image: &SceneSpec, bbox: &BBox) -> Result<SceneSpec> {
        fixture_crop(image, bbox, self.input_side)
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let (class, feature) = self.resolve(prompt)?;
        if prompt == class || self.set.prompt_noise == 0.0 {
            return Ok(feature.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(0, &[b"prompt", prompt.as_bytes()]));
        let noisy = feature
            .as_slice()
            .iter()
            .map(|v| v + self.set.prompt_noise * rng.gen_range(-1.0..=1.0))
            .collect();
        Embedding::normalized(noisy)
    }

    fn detect(&self, image: &SceneSpec, prompts: &[String]) -> Result<Vec<Detection>> {
        let queries = prompts
            .iter()
            .map(|p| {
                self.resolve(p)
                    .map(|(class, feature)| PromptQuery { class, feature })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(fixture_detect(image, &queries, &self.set.detector))
    }
}
