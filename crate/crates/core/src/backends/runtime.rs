//! Backend running exported ONNX graphs.
//!
//! A model directory holds `manifest.json`, three graphs and a tokenizer:
//!
//! ```text
//! {
//!   "embedding_dim": 512,
//!   "image_side": 224,
//!   "norm_mean": [0.4815, 0.4578, 0.4082],
//!   "norm_std": [0.2686, 0.2613, 0.2758],
//!   "files": {
//!     "image_encoder": "image_encoder.onnx",
//!     "text_encoder": "text_encoder.onnx",
//!     "detector": "detector.onnx",
//!     "tokenizer": "tokenizer.json"
//!   },
//!   "sha256": {"image_encoder.onnx": "…"}
//! }
//! ```
//!
//! Graph signatures:
//!
//! - image encoder: `pixel_values f32[1,3,S,S]` → `f32[1,D]`
//! - text encoder: `input_ids i64[1,L]` (and `attention_mask i64[1,L]` when
//!   the graph takes two inputs) → `f32[1,D]`
//! - detector: `pixel_values f32[1,3,S',S']`, `input_ids i64[Q,L]`,
//!   `attention_mask i64[Q,L]` → `logits f32[1,P,Q]`,
//!   `pred_boxes f32[1,P,4]` as normalized center-x, center-y, width, height.
//!
//! Detector logits go through a sigmoid; each predicted box belongs to the
//! query it scores highest and each query keeps its best box.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;
use tract_onnx::prelude::*;

use super::image::{crop_resize, PreprocessSpec, RgbImage};
use super::VisionBackend;
use crate::boxgeom::{BBox, ImageDims};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::fusion::Embedding;

type Plan = Arc<TypedRunnableModel>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFiles {
    pub image_encoder: String,
    pub text_encoder: String,
    pub detector: String,
    #[serde(default = "default_tokenizer")]
    pub tokenizer: String,
}

fn default_tokenizer() -> String {
    "tokenizer.json".into()
}

fn default_context_length() -> usize {
    77
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub embedding_dim: usize,
    pub image_side: u32,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    pub files: ModelFiles,
    #[serde(default = "default_context_length")]
    pub context_length: usize,
    /// Detector input side; the image side when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_side: Option<u32>,
    #[serde(default)]
    pub pad_token_id: i64,
    /// Expected SHA-256 of model files, keyed by file name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sha256: BTreeMap<String, String>,
    /// Free-form source description, e.g. checkpoint identifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
}

impl ModelManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.image_side == 0 || self.context_length == 0 {
            return Err(Error::InvalidModel(
                "embedding_dim, image_side and context_length must be positive".into(),
            ));
        }
        if self.norm_std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::InvalidModel(
                "norm_std entries must be positive".into(),
            ));
        }
        Ok(())
    }

    fn preprocess(&self, side: u32) -> PreprocessSpec {
        PreprocessSpec {
            side,
            mean: self.norm_mean,
            std: self.norm_std,
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn model_err(context: &str) -> impl Fn(TractError) -> Error + '_ {
    move |e| Error::InvalidModel(format!("{context}: {e:#}"))
}

fn load_graph(path: &Path) -> Result<InferenceModel> {
    if !path.is_file() {
        return Err(Error::ModelLoad(format!(
            "missing graph file {}",
            path.display()
        )));
    }
    tract_onnx::onnx()
        .model_for_path(path)
        .map_err(|e| Error::ModelLoad(format!("{}: {e:#}", path.display())))
}

fn plan(mut model: InferenceModel, facts: &[(DatumType, Vec<usize>)], what: &str) -> Result<Plan> {
    let inputs = model.input_outlets().map_err(model_err(what))?.len();
    if inputs != facts.len() {
        return Err(Error::InvalidModel(format!(
            "{what} graph has {inputs} inputs, expected {}",
            facts.len()
        )));
    }
    for (i, (dt, shape)) in facts.iter().enumerate() {
        model = model
            .with_input_fact(i, InferenceFact::dt_shape(*dt, shape.clone()))
            .map_err(model_err(what))?;
    }
    model
        .into_optimized()
        .and_then(|m| m.into_runnable())
        .map_err(model_err(what))
}

fn run(plan: &Plan, inputs: TVec<TValue>, what: &str) -> Result<TVec<TValue>> {
    plan.run(inputs)
        .map_err(|e| Error::Backend(format!("{what}: {e:#}")))
}

fn f32_output(value: &TValue, what: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let view = value
        .to_plain_array_view::<f32>()
        .map_err(|e| Error::InvalidModel(format!("{what} output is not f32: {e:#}")))?;
    Ok((view.shape().to_vec(), view.iter().copied().collect()))
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

pub struct RuntimeBackend {
    manifest: ModelManifest,
    image_plan: Plan,
    text_plan: Plan,
    text_inputs: usize,
    detector_graph: InferenceModel,
    detector_plans: Mutex<BTreeMap<usize, Plan>>,
    tokenizer: Tokenizer,
    fingerprint: String,
}

impl RuntimeBackend {
    /// Load a model directory, verifying recorded file hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(ModelManifest::FILE_NAME);
        let manifest = ModelManifest::load(&manifest_path)?;
        let files = &manifest.files;
        let paths: Vec<PathBuf> = [
            &files.image_encoder,
            &files.text_encoder,
            &files.detector,
            &files.tokenizer,
        ]
        .iter()
        .map(|f| dir.join(f))
        .collect();

        let mut hasher = Sha256::new();
        hasher.update(std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
        for p in &paths {
            if !p.is_file() {
                return Err(Error::ModelLoad(format!(
                    "missing model file {}",
                    p.display()
                )));
            }
            let digest = sha256_file(p)?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if let Some(expected) = manifest.sha256.get(&name) {
                if !expected.eq_ignore_ascii_case(&digest) {
                    return Err(Error::ModelLoad(format!(
                        "hash mismatch for {name}: manifest {expected}, file {digest}"
                    )));
                }
            }
            hasher.update(digest.as_bytes());
        }
        let fingerprint = hex::encode(hasher.finalize());

        let s = manifest.image_side as usize;
        let image_plan = plan(
            load_graph(&paths[0])?,
            &[(DatumType::F32, vec![1, 3, s, s])],
            "image encoder",
        )?;
        let text_graph = load_graph(&paths[1])?;
        let text_inputs = text_graph
            .input_outlets()
            .map_err(model_err("text encoder"))?
            .len();
        let l = manifest.context_length;
        let text_facts = vec![(DatumType::I64, vec![1, l]); text_inputs.clamp(1, 2)];
        let text_plan = plan(text_graph, &text_facts, "text encoder")?;
        let detector_graph = load_graph(&paths[2])?;
        let tokenizer = Tokenizer::from_file(&paths[3])
            .map_err(|e| Error::ModelLoad(format!("{}: {e}", paths[3].display())))?;

        Ok(Self {
            manifest,
            image_plan,
            text_plan,
            text_inputs,
            detector_graph,
            detector_plans: Mutex::new(BTreeMap::new()),
            tokenizer,
            fingerprint,
        })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    fn detector_side(&self) -> u32 {
        self.manifest
            .detector_side
            .unwrap_or(self.manifest.image_side)
    }

    /// Token ids and attention mask, padded or truncated to the context
    /// length.
    pub fn tokenize(&self, text: &str) -> Result<(Vec<i64>, Vec<i64>)> {
        let enc = self
            .tokenizer
            .encode(text, true)
            .map_err(|e| Error::Backend(format!("tokenizer: {e}")))?;
        let l = self.manifest.context_length;
        let mut ids: Vec<i64> = enc.get_ids().iter().take(l).map(|&i| i as i64).collect();
        let mut mask = vec![1i64; ids.len()];
        ids.resize(l, self.manifest.pad_token_id);
        mask.resize(l, 0);
        Ok((ids, mask))
    }

    fn pixel_tensor(&self, image: &RgbImage, crop: &BBox, side: u32) -> Result<TValue> {
        let resized = crop_resize(image, crop, &self.manifest.preprocess(side))?;
        let s = side as usize;
        let data = resized.to_chw(self.manifest.norm_mean, self.manifest.norm_std);
        Tensor::from_shape(&[1, 3, s, s], &data)
            .map(IntoTValue::into_tvalue)
            .map_err(|e| Error::Backend(format!("pixel tensor: {e:#}")))
    }

    fn embedding(&self, value: &TValue, what: &str) -> Result<Embedding> {
        let (shape, data) = f32_output(value, what)?;
        if shape.iter().product::<usize>() != self.manifest.embedding_dim
            || shape.last() != Some(&self.manifest.embedding_dim)
        {
            return Err(Error::InvalidModel(format!(
                "{what} output shape {shape:?}, expected [1, {}]",
                self.manifest.embedding_dim
            )));
        }
        Embedding::normalized(data.into_iter().map(f64::from).collect())
    }

    fn detector_plan(&self, queries: usize) -> Result<Plan> {
        let mut plans = self
            .detector_plans
            .lock()
            .map_err(|_| Error::Backend("detector plan cache poisoned".into()))?;
        if let Some(p) = plans.get(&queries) {
            return Ok(p.clone());
        }
        let s = self.detector_side() as usize;
        let l = self.manifest.context_length;
        let p = plan(
            self.detector_graph.clone(),
            &[
                (DatumType::F32, vec![1, 3, s, s]),
                (DatumType::I64, vec![queries, l]),
                (DatumType::I64, vec![queries, l]),
            ],
            "detector",
        )?;
        plans.insert(queries, p.clone());
        Ok(p)
    }
}

impl VisionBackend for RuntimeBackend {
    type Image = RgbImage;

    fn name(&self) -> &'static str {
        "runtime"
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn input_side(&self) -> u32 {
        self.manifest.image_side
    }

    fn load_image(&self, image_ref: &str, base_dir: &Path) -> Result<RgbImage> {
        RgbImage::open(&base_dir.join(image_ref))
    }

    fn dims(&self, image: &RgbImage) -> ImageDims {
        image.dims()
    }

    fn encode_image(&self, image: &RgbImage, crop: &BBox) -> Result<Embedding> {
        let input = self.pixel_tensor(image, crop, self.manifest.image_side)?;
        let out = run(&self.image_plan, tvec!(input), "image encoder")?;
        self.embedding(&out[0], "image encoder")
    }

    fn crop(&self, image: &RgbImage, bbox: &BBox) -> Result<RgbImage> {
        crop_resize(
            image,
            bbox,
            &self.manifest.preprocess(self.manifest.image_side),
        )
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let (ids, mask) = self.tokenize(prompt)?;
        let l = self.manifest.context_length;
        let tensor = |v: Vec<i64>| {
            Tensor::from_shape(&[1, l], &v)
                .map(IntoTValue::into_tvalue)
                .map_err(|e| Error::Backend(format!("token tensor: {e:#}")))
        };
        let mut inputs = tvec!(tensor(ids)?);
        if self.text_inputs >= 2 {
            inputs.push(tensor(mask)?);
        }
        let out = run(&self.text_plan, inputs, "text encoder")?;
        self.embedding(&out[0], "text encoder")
    }

    fn detect(&self, image: &RgbImage, prompts: &[String]) -> Result<Vec<Detection>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let q = prompts.len();
        let l = self.manifest.context_length;
        let mut ids = Vec::with_capacity(q * l);
        let mut mask = Vec::with_capacity(q * l);
        for p in prompts {
            let (i, m) = self.tokenize(p)?;
            ids.extend(i);
            mask.extend(m);
        }
        let tensor = |v: &[i64]| {
            Tensor::from_shape(&[q, l], v)
                .map(IntoTValue::into_tvalue)
                .map_err(|e| Error::Backend(format!("token tensor: {e:#}")))
        };
        let dims = image.dims();
        let pixels = self.pixel_tensor(image, &dims.full_box(), self.detector_side())?;
        let out = run(
            &self.detector_plan(q)?,
            tvec!(pixels, tensor(&ids)?, tensor(&mask)?),
            "detector",
        )?;
        if out.len() < 2 {
            return Err(Error::InvalidModel(
                "detector must output logits and boxes".into(),
            ));
        }
        let (lshape, logits) = f32_output(&out[0], "detector logits")?;
        let (bshape, boxes) = f32_output(&out[1], "detector boxes")?;
        let p = match (lshape.as_slice(), bshape.as_slice()) {
            ([1, p, lq], [1, bp, 4]) if *lq == q && bp == p => *p,
            _ => {
                return Err(Error::InvalidModel(format!(
                    "detector outputs {lshape:?} and {bshape:?}, expected [1,P,{q}] and [1,P,4]"
                )))
            }
        };

        let (w, h) = (dims.width as f64, dims.height as f64);
        let mut best: Vec<Option<Detection>> = vec![None; q];
        for i in 0..p {
            let row = &logits[i * q..(i + 1) * q];
            let (class, &logit) =
                row.iter().enumerate().fold(
                    (0, &row[0]),
                    |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc },
                );
            let score = sigmoid(logit);
            if best[class].as_ref().is_some_and(|b| b.score >= score) {
                continue;
            }
            let b = &boxes[i * 4..i * 4 + 4];
            let (cx, cy, bw, bh) = (b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
            let bbox = BBox::new(
                (cx - bw / 2.0) * w,
                (cy - bh / 2.0) * h,
                (cx + bw / 2.0) * w,
                (cy + bh / 2.0) * h,
            )
            .clamp_to(dims);
            if bbox.area() > 0.0 {
                best[class] = Some(Detection {
                    bbox,
                    score,
                    class_index: class,
                });
            }
        }
        Ok(best.into_iter().flatten().collect())
    }
}

/// One line of a reference-vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceVector {
    /// `image:<path>` or `text:<prompt>`.
    pub input_id: String,
    pub vector: Vec<f64>,
}

pub fn load_reference_vectors(path: &Path) -> Result<Vec<ReferenceVector>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub probes: usize,
    pub min_cosine: f64,
    /// Probes whose cosine fell below the tolerance.
    pub failures: Vec<(String, f64)>,
}

impl ReferenceCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Cosine agreement between backend embeddings and reference vectors.
/// Image paths resolve against `base_dir`; images are encoded whole.
pub fn check_reference_vectors<B: VisionBackend>(
    backend: &B,
    refs: &[ReferenceVector],
    base_dir: &Path,
    min_cosine: f64,
) -> Result<ReferenceCheck> {
    let mut check = ReferenceCheck {
        probes: refs.len(),
        min_cosine: 1.0,
        failures: Vec::new(),
    };
    for r in refs {
        let got = if let Some(path) = r.input_id.strip_prefix("image:") {
            let img = backend.load_image(path, base_dir)?;
            backend.encode_image(&img, &backend.dims(&img).full_box())?
        } else if let Some(prompt) = r.input_id.strip_prefix("text:") {
            backend.encode_text(prompt)?
        } else {
            return Err(Error::InvalidInput(format!(
                "reference input id '{}' lacks an image: or text: prefix",
                r.input_id
            )));
        };
        let expected = Embedding::normalized(r.vector.clone())?;
        let cos = got.dot(&expected)?;
        check.min_cosine = check.min_cosine.min(cos);
        if cos < min_cosine {
            check.failures.push((r.input_id.clone(), cos));
        }
    }
    Ok(check)
}
