#![allow(dead_code)]

#[cfg(feature = "runtime")]
pub mod onnx;

use guided_crop::backends::FixtureBackend;
use guided_crop::datasets::{generate_synthetic_manifest, DatasetManifest, SynthParams};
use guided_crop::fusion::{Aggregation, PromptMode, TextClassBank, DEFAULT_TEMPLATE};
use guided_crop::prompts::{build_bank, category_prompts, detection_prompts};

pub const SUITE_SEED: u64 = 0;

pub struct Suite {
    pub manifest: DatasetManifest,
    pub backend: FixtureBackend,
    pub bank: TextClassBank,
    pub det_prompts: Vec<String>,
}

pub fn suite(params: &SynthParams, seed: u64) -> Suite {
    let (manifest, fixture) = generate_synthetic_manifest(params, seed).unwrap();
    let backend = FixtureBackend::new(fixture).unwrap();
    let bank = build_bank(
        &backend,
        &manifest.classes,
        &category_prompts(&manifest.classes, DEFAULT_TEMPLATE),
        PromptMode::Category,
        Aggregation::Logit,
    )
    .unwrap();
    let det_prompts = detection_prompts(&manifest.classes);
    Suite {
        manifest,
        backend,
        bank,
        det_prompts,
    }
}

/// The same suite with every object feature replaced by its scene's
/// background feature, so every crop of an image encodes identically.
pub fn crop_invariant(params: &SynthParams, seed: u64) -> Suite {
    let (manifest, mut fixture) = generate_synthetic_manifest(params, seed).unwrap();
    for scene in fixture.scenes.values_mut() {
        let bg = scene.background.feature.clone();
        for o in &mut scene.objects {
            o.feature = bg.clone();
        }
    }
    let backend = FixtureBackend::new(fixture).unwrap();
    let bank = build_bank(
        &backend,
        &manifest.classes,
        &category_prompts(&manifest.classes, DEFAULT_TEMPLATE),
        PromptMode::Category,
        Aggregation::Logit,
    )
    .unwrap();
    let det_prompts = detection_prompts(&manifest.classes);
    Suite {
        manifest,
        backend,
        bank,
        det_prompts,
    }
}

pub fn small(n: usize) -> SynthParams {
    SynthParams {
        n_samples: n,
        ..SynthParams::small_object_suite()
    }
}
