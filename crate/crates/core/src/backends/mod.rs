//! Encoder and detector backends.
//!
//! The pipeline only talks to [`VisionBackend`]. Two implementations ship:
//! the analytic [`fixture`] backend used by the test suites, and the
//! serialized-graph [`runtime`] backend for exported models.

use std::path::Path;
use std::sync::Mutex;

use crate::boxgeom::{BBox, ImageDims};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::fusion::Embedding;

pub mod fixture;
pub mod image;
#[cfg(feature = "runtime")]
pub mod runtime;

pub use self::fixture::{FixtureBackend, SceneSpec};
pub use self::image::{crop_resize, PreprocessSpec, RgbImage};

/// Image encoder, text encoder and open-vocabulary detector.
///
/// Implementations are read-only after construction. Dataset runs share one
/// backend across sample workers and therefore need `Sync`; a backend that
/// cannot provide it is wrapped in [`Serialized`].
pub trait VisionBackend {
    type Image: Send + Sync;

    fn name(&self) -> &'static str;

    /// Content hash identifying the loaded models or fixtures.
    fn fingerprint(&self) -> String;

    /// Side length of the square encoder input.
    fn input_side(&self) -> u32;

    fn load_image(&self, image_ref: &str, base_dir: &Path) -> Result<Self::Image>;

    fn dims(&self, image: &Self::Image) -> ImageDims;

    /// Embed the region `crop` of `image` after resizing it to the encoder
    /// input size.
    fn encode_image(&self, image: &Self::Image, crop: &BBox) -> Result<Embedding>;

    /// The region `bbox` of `image` resized to the encoder input size, as a
    /// new image.
    fn crop(&self, image: &Self::Image, bbox: &BBox) -> Result<Self::Image>;

    fn encode_text(&self, prompt: &str) -> Result<Embedding>;

    /// One detector forward pass over all `prompts`. At most one detection
    /// per prompt; `class_index` is the prompt's position.
    fn detect(&self, image: &Self::Image, prompts: &[String]) -> Result<Vec<Detection>>;

    fn is_serial(&self) -> bool {
        false
    }
}

/// Routes every call of a non-thread-safe backend through a single lock, so
/// requests from concurrent workers are served one at a time.
pub struct Serialized<B> {
    inner: Mutex<B>,
    name: &'static str,
    fingerprint: String,
    input_side: u32,
}

impl<B: VisionBackend + Send> Serialized<B> {
    pub fn new(backend: B) -> Self {
        Self {
            name: backend.name(),
            fingerprint: backend.fingerprint(),
            input_side: backend.input_side(),
            inner: Mutex::new(backend),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&B) -> Result<R>) -> Result<R> {
        let guard = self
            .inner
            .lock()
            .map_err(|_| Error::Backend("serialized backend lock poisoned".into()))?;
        f(&guard)
    }
}

impl<B> VisionBackend for Serialized<B>
where
    B: VisionBackend + Send,
{
    type Image = B::Image;

    fn name(&self) -> &'static str {
        self.name
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn input_side(&self) -> u32 {
        self.input_side
    }

    fn load_image(&self, image_ref: &str, base_dir: &Path) -> Result<Self::Image> {
        self.with(|b| b.load_image(image_ref, base_dir))
    }

    fn dims(&self, image: &Self::Image) -> ImageDims {
        match self.inner.lock() {
            Ok(b) => b.dims(image),
            Err(poisoned) => poisoned.into_inner().dims(image),
        }
    }

    fn encode_image(&self, image: &Self::Image, crop: &BBox) -> Result<Embedding> {
        self.with(|b| b.encode_image(image, crop))
    }

    fn crop(&self, image: &Self::Image, bbox: &BBox) -> Result<Self::Image> {
        self.with(|b| b.crop(image, bbox))
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.with(|b| b.encode_text(prompt))
    }

    fn detect(&self, image: &Self::Image, prompts: &[String]) -> Result<Vec<Detection>> {
        self.with(|b| b.detect(image, prompts))
    }

    fn is_serial(&self) -> bool {
        true
    }
}
