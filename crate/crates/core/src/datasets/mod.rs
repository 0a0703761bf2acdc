//! Dataset manifests, relative object sizes and small-object subsets.
//!
//! A manifest is a JSON-lines file with one sample per line:
//!
//! ```text
//! {"id": "n01", "image": "img/n01.jpg", "label": 3, "bbox": [x0, y0, x1, y1]}
//! {"id": "n02", "image": "img/n02.jpg", "label": 7, "mask": "masks/n02.png"}
//! ```
//!
//! `width`, `height` and `size` are optional cached fields. Class names live
//! in a separate text file, one per line, in label order.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxgeom::{box_from_mask, relative_object_size, BBox, ImageDims, Mask};
use crate::error::{Error, Result};

pub mod synth;

pub use synth::{generate_synthetic_manifest, SynthParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    /// Relative object size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<f64>,
}

impl SampleRecord {
    pub fn dims(&self) -> Option<ImageDims> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => ImageDims::new(w, h).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    /// Directory that relative image and mask paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        samples: Vec<SampleRecord>,
    ) -> Result<Self> {
        let m = Self {
            name: name.into(),
            classes,
            samples,
            base_dir: PathBuf::from("."),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.label >= self.classes.len()) {
            return Err(Error::InvalidInput(format!(
                "sample {} has label {} but only {} classes exist",
                s.id,
                s.label,
                self.classes.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Read a JSON-lines manifest and its class file.
    pub fn load(manifest: &Path, classes: &Path) -> Result<Self> {
        let classes = load_classes(classes)?;
        let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(manifest, format!("line {}: {e}", n + 1)))?;
            samples.push(rec);
        }
        let name = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let base_dir = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let m = Self {
            name,
            classes,
            samples,
            base_dir,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fill in `size` for every sample that lacks it.
    pub fn with_sizes(mut self) -> Result<Self> {
        for s in &mut self.samples {
            if s.size.is_none() {
                s.size = Some(compute_object_size(s, &self.base_dir)?);
            }
        }
        Ok(self)
    }
}

pub fn load_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_classes(path: &Path, classes: &[String]) -> Result<()> {
    let mut text = classes.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a mask image; any non-zero pixel is object.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Mask::new(w, h, img.into_raw().into_iter().map(|v| v > 0).collect())
}

/// Relative object size of a sample's annotation.
pub fn compute_object_size(record: &SampleRecord, base_dir: &Path) -> Result<f64> {
    if let Some(bbox) = record.bbox {
        let dims = match record.dims() {
            Some(d) => d,
            None => {
                let path = base_dir.join(&record.image);
                let (w, h) = image::image_dimensions(&path).map_err(|e| Error::parse(&path, e))?;
                ImageDims::new(w, h)?
            }
        };
        return Ok(relative_object_size(&bbox, dims));
    }
    if let Some(mask_ref) = &record.mask {
        let mask = load_mask(&base_dir.join(mask_ref))?;
        let (w, h) = mask.dims();
        return Ok(relative_object_size(
            &box_from_mask(&mask)?,
            ImageDims::new(w, h)?,
        ));
    }
    Err(Error::InvalidInput(format!(
        "sample {} has neither bbox nor mask",
        record.id
    )))
}

/// Samples whose relative object size is at most `max_ratio`.
pub fn filter_by_object_size(
    manifest: &DatasetManifest,
    max_ratio: f64,
) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for s in &manifest.samples {
        let size = s.size.ok_or_else(|| {
            Error::InvalidInput(format!("sample {} has no computed object size", s.id))
        })?;
        if size <= max_ratio {
            samples.push(s.clone());
        }
    }
    Ok(DatasetManifest {
        name: manifest.name.clone(),
        classes: manifest.classes.clone(),
        samples,
        base_dir: manifest.base_dir.clone(),
    })
}

/// Object-size thresholds 0.05, 0.10, ..., 1.00.
pub fn size_sweep_thresholds() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, size: f64) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image: id.into(),
            label: 0,
            bbox: None,
            mask: None,
            width: None,
            height: None,
            size: Some(size),
        }
    }

    #[test]
    fn thresholds() {
        let t = size_sweep_thresholds();
        assert_eq!(t.len(), 20);
        assert_eq!(t[0], 0.05);
        assert_eq!(t[3], 0.2);
        assert_eq!(t[19], 1.0);
    }

    #[test]
    fn filter_is_inclusive() {
        let m = DatasetManifest::new(
            "t",
            vec!["a".into()],
            vec![rec("a", 0.19), rec("b", 0.20), rec("c", 0.21)],
        )
        .unwrap();
        let ids: Vec<_> = filter_by_object_size(&m, 0.2)
            .unwrap()
            .samples
            .into_iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(filter_by_object_size(&m, 1.0).unwrap(), m);
    }

    #[test]
    fn size_from_box_and_dims() {
        let mut r = rec("x", 0.0);
        r.size = None;
        r.bbox = Some(BBox::new(30.0, 30.0, 70.0, 70.0));
        r.width = Some(100);
        r.height = Some(100);
        assert!((compute_object_size(&r, Path::new(".")).unwrap() - 0.16).abs() < 1e-12);
        r.bbox = Some(BBox::new(0.0, 0.0, 100.0, 100.0));
        assert_eq!(compute_object_size(&r, Path::new(".")).unwrap(), 1.0);
    }

    #[test]
    fn size_from_mask_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::GrayImage::from_fn(10, 10, |x, y| {
            image::Luma([if (2..=6).contains(&x) && (3..=9).contains(&y) {
                255
            } else {
                0
            }])
        });
        img.save(dir.path().join("m.png")).unwrap();
        let mut r = rec("m", 0.0);
        r.size = None;
        r.mask = Some("m.png".into());
        let mask = load_mask(&dir.path().join("m.png")).unwrap();
        let expected = relative_object_size(
            &box_from_mask(&mask).unwrap(),
            ImageDims::square(10).unwrap(),
        );
        assert_eq!(compute_object_size(&r, dir.path()).unwrap(), expected);
        assert!((expected - 0.24).abs() < 1e-12);

        let blank = image::GrayImage::new(4, 4);
        blank.save(dir.path().join("blank.png")).unwrap();
        r.mask = Some("blank.png".into());
        assert!(matches!(
            compute_object_size(&r, dir.path()),
            Err(Error::NoObject)
        ));
    }

    #[test]
    fn manifest_roundtrip_and_label_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = rec("a", 0.1);
        a.bbox = Some(BBox::new(1.0, 2.0, 3.0, 4.0));
        let m = DatasetManifest::new("m", vec!["x".into(), "y".into()], vec![a, rec("b", 0.5)])
            .unwrap();
        m.write_jsonl(&dir.path().join("m.jsonl")).unwrap();
        write_classes(&dir.path().join("classes.txt"), &m.classes).unwrap();
        let back =
            DatasetManifest::load(&dir.path().join("m.jsonl"), &dir.path().join("classes.txt"))
                .unwrap();
        assert_eq!(back.samples, m.samples);
        assert_eq!(back.classes, m.classes);

        let mut bad = rec("z", 0.1);
        bad.label = 5;
        assert!(DatasetManifest::new("m", vec!["x".into()], vec![bad]).is_err());
    }
}
