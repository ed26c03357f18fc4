//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json          split membership, generation seed, totals
//! <root>/images/NNNN.pgm        16-bit (or 8-bit) grayscale, or NNNN.pstn
//! <root>/annotations/NNNN.txt   one "x y" head position per line
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use super::{CrowdSample, DatasetSplit, Head, SceneParams, DENSITY_SIGMA};
use crate::error::{Error, Result};
use crate::tensor::{io as tensor_io, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (expected train, validation or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: String,
    pub annotation: String,
    pub split: SplitName,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Generation seed, absent for externally supplied data.
    pub seed: Option<u64>,
    pub scene: Option<SceneParams>,
    pub sigma: f64,
    pub total_heads: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<CrowdSample>,
}

impl Dataset {
    pub fn split_of(&self, name: SplitName) -> Vec<CrowdSample> {
        self.manifest
            .samples
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == name)
            .map(|(_, s)| s.clone())
            .collect()
    }

    pub fn into_split(self) -> DatasetSplit {
        DatasetSplit {
            train: self.split_of(SplitName::Train),
            validation: self.split_of(SplitName::Validation),
            test: self.split_of(SplitName::Test),
        }
    }
}

fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let pixels: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer matches extents");
    buf.save_with_format(path, ImageFormat::Pnm)?;
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "pstn") {
        let t = tensor_io::load::<f64>(path)?;
        return match *t.shape() {
            [1, _, _] => Ok(t),
            [h, w] => crate::tensor::reshape(&t, &[1, h, w]),
            ref s => Err(Error::format(
                path.display().to_string(),
                format!("expected a 1 x H x W or H x W tensor, got {s:?}"),
            )),
        };
    }
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Tensor::from_vec(&[1, h as usize, w as usize], data)
}

fn write_annotations(path: &Path, heads: &[Head]) -> Result<()> {
    let mut text = String::new();
    for h in heads {
        text.push_str(&format!("{} {}\n", h.x, h.y));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses "x y" lines; blank lines and `#` comments are skipped.
pub fn read_annotations(path: &Path) -> Result<Vec<Head>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = || path.display().to_string();
    let mut heads = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.and_then(|t| t.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(ctx(), format!("line {}: expected `x y`, got `{line}`", lineno + 1)))
        };
        let x = parse(parts.next())?;
        let y = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::format(ctx(), format!("line {}: trailing fields in `{line}`", lineno + 1)));
        }
        heads.push(Head::new(x, y));
    }
    Ok(heads)
}

/// Writes samples (with their split labels) under `root`, which must
/// already exist. Returns the manifest that was written.
pub fn write_dataset(
    root: &Path,
    samples: &[(CrowdSample, SplitName)],
    seed: Option<u64>,
    scene: Option<SceneParams>,
) -> Result<DatasetManifest> {
    let images = root.join("images");
    let annotations = root.join("annotations");
    for dir in [&images, &annotations] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (sample, split)) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        let image = format!("images/{stem}.pgm");
        let annotation = format!("annotations/{stem}.txt");
        write_pgm(&root.join(&image), sample.image())?;
        write_annotations(&root.join(&annotation), sample.heads())?;
        entries.push(SampleEntry {
            id: sample.id.clone(),
            image,
            annotation,
            split: *split,
            heads: sample.count(),
        });
    }
    let manifest = DatasetManifest {
        seed,
        scene,
        sigma: DENSITY_SIGMA,
        total_heads: entries.iter().map(|e| e.heads).sum(),
        samples: entries,
    };
    let path = root.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Images without a manifest: every annotation file paired with a
/// same-stem image, all assigned to the test split.
fn scan_unlabelled(root: &Path) -> Result<DatasetManifest> {
    let ann_dir = root.join("annotations");
    let mut stems: Vec<String> = fs::read_dir(&ann_dir)
        .map_err(|e| Error::io(&ann_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let image = ["pgm", "pstn"]
            .iter()
            .map(|ext| format!("images/{stem}.{ext}"))
            .find(|rel| root.join(rel).is_file())
            .ok_or_else(|| Error::format(root.display().to_string(), format!("no image for annotation `{stem}`")))?;
        let annotation = format!("annotations/{stem}.txt");
        let heads = read_annotations(&root.join(&annotation))?.len();
        samples.push(SampleEntry {
            id: stem,
            image,
            annotation,
            split: SplitName::Test,
            heads,
        });
    }
    Ok(DatasetManifest {
        seed: None,
        scene: None,
        sigma: DENSITY_SIGMA,
        total_heads: samples.iter().map(|e| e.heads).sum(),
        samples,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let manifest_path: PathBuf = root.join("manifest.json");
    let manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        serde_json::from_str(&text)?
    } else {
        scan_unlabelled(root)?
    };
    let samples = manifest
        .samples
        .iter()
        .map(|entry| {
            let image = read_image(&root.join(&entry.image))?;
            let heads = read_annotations(&root.join(&entry.annotation))?;
            if heads.len() != entry.heads {
                return Err(Error::format(
                    entry.annotation.clone(),
                    format!("{} heads on disk, manifest says {}", heads.len(), entry.heads),
                ));
            }
            CrowdSample::new(entry.id.clone(), image, heads)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}
