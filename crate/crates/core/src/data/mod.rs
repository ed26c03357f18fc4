//! Crowd samples, ground-truth density maps, synthetic scenes, the
//! patch/split preparation protocol and the on-disk dataset layout.

mod dataset;
mod density;
mod synth;

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetManifest, SampleEntry, SplitName};
pub use density::{block_sum, density_map};
pub use synth::{synthesize_scene, SceneParams};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{reshape, Tensor};

/// Gaussian width of the ground-truth density kernel, in pixels.
pub const DENSITY_SIGMA: f64 = 4.0;

/// Annotated head position in pixel coordinates; the image spans
/// `[0, width) × [0, height)` and pixel `(i, j)` has its center at
/// `(j + 0.5, i + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub x: f64,
    pub y: f64,
}

impl Head {
    pub fn new(x: f64, y: f64) -> Self {
        Head { x, y }
    }
}

#[derive(Clone, Debug)]
pub struct CrowdSample {
    pub id: String,
    image: Tensor,
    heads: Vec<Head>,
    density: OnceLock<Tensor>,
}

impl CrowdSample {
    /// `image` is `1 × H × W` with values in `[0, 1]`; every head must lie
    /// inside the image.
    pub fn new(id: impl Into<String>, image: Tensor, heads: Vec<Head>) -> Result<Self> {
        let (h, w) = match *image.shape() {
            [1, h, w] => (h, w),
            ref s => {
                return Err(Error::shape(format!(
                    "crowd image must be 1 x H x W, got {s:?}"
                )))
            }
        };
        if let Some(bad) = heads
            .iter()
            .find(|p| !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64))
        {
            return Err(Error::invalid(format!(
                "head ({}, {}) lies outside the {w}x{h} image",
                bad.x, bad.y
            )));
        }
        Ok(CrowdSample {
            id: id.into(),
            image,
            heads,
            density: OnceLock::new(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn count(&self) -> usize {
        self.heads.len()
    }

    /// Ground-truth density (`1 × H × W`, σ = [`DENSITY_SIGMA`]), generated
    /// on first use.
    pub fn density(&self) -> &Tensor {
        self.density.get_or_init(|| {
            density_map(&self.heads, self.height(), self.width(), DENSITY_SIGMA)
                .expect("sigma is positive")
        })
    }

    /// The image as a `1 × 1 × H × W` network input.
    pub fn network_input(&self) -> Tensor {
        reshape(&self.image, &[1, 1, self.height(), self.width()]).expect("same element count")
    }

    /// Density map block-summed by `factor` to `1 × 1 × H/f × W/f`; the
    /// total mass is unchanged.
    pub fn density_target(&self, factor: usize) -> Result<Tensor> {
        let (h, w) = (self.height(), self.width());
        let reduced = block_sum(self.density().data(), h, w, factor)?;
        Tensor::from_vec(&[1, 1, h / factor, w / factor], reduced)
    }

    /// The `height × width` window at `(top, left)`, with heads filtered and
    /// re-anchored to the window.
    pub fn crop(&self, id: impl Into<String>, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds the {h}x{w} image"
            )));
        }
        let src = self.image.data();
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            data.extend_from_slice(&src[y * w + left..y * w + left + width]);
        }
        let (x0, y0) = (left as f64, top as f64);
        let heads = self
            .heads
            .iter()
            .filter(|p| p.x >= x0 && p.x < x0 + width as f64 && p.y >= y0 && p.y < y0 + height as f64)
            .map(|p| Head::new(p.x - x0, p.y - y0))
            .collect();
        CrowdSample::new(id, Tensor::from_vec(&[1, height, width], data)?, heads)
    }

    /// Crops bottom/right so both extents are multiples of `factor`.
    pub fn fit_to_multiple(&self, factor: usize) -> Result<Self> {
        let (h, w) = (self.height() / factor * factor, self.width() / factor * factor);
        if (h, w) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{}x{} image is smaller than the down-sampling factor {factor}",
                self.height(),
                self.width()
            )));
        }
        self.crop(self.id.clone(), 0, 0, h, w)
    }
}

/// `n` random half-size patches of `sample`, extents rounded down to
/// multiples of `divisor`. Each patch regenerates its own density map from
/// its re-anchored heads.
pub fn crop_patches(sample: &CrowdSample, n: usize, divisor: usize, rng_seed: u64) -> Result<Vec<CrowdSample>> {
    if n < 1 || divisor < 1 {
        return Err(Error::invalid("crop_patches needs n ≥ 1 and divisor ≥ 1"));
    }
    let ph = sample.height() / 2 / divisor * divisor;
    let pw = sample.width() / 2 / divisor * divisor;
    if ph == 0 || pw == 0 {
        return Err(Error::invalid(format!(
            "{}x{} image is too small for half-size patches divisible by {divisor}",
            sample.height(),
            sample.width()
        )));
    }
    let mut rng = seed::stream(rng_seed, &format!("crop/{}", sample.id));
    (0..n)
        .map(|i| {
            let top = rng.random_range(0..=sample.height() - ph);
            let left = rng.random_range(0..=sample.width() - pw);
            sample.crop(format!("{}-p{i}", sample.id), top, left, ph, pw)
        })
        .collect()
}

/// Train / validation / test partition.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<CrowdSample>,
    pub validation: Vec<CrowdSample>,
    pub test: Vec<CrowdSample>,
}

/// Deterministic shuffled 9:1 split: `floor(n/10)` items go to the second
/// part, the rest to the first.
pub fn split<S>(items: Vec<S>, rng_seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if items.len() < 10 {
        return Err(Error::invalid(format!(
            "a 9:1 split needs at least 10 samples, got {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seed::stream(rng_seed, "split"));
    let n_val = items.len() / 10;
    let mut slots: Vec<Option<S>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<S> { idx.iter().map(|&i| slots[i].take().expect("each index once")).collect() };
    let validation = take(&order[..n_val]);
    let train = take(&order[n_val..]);
    Ok((train, validation))
}

/// Split labels for a generated dataset: the last `n_test` scenes are the
/// test set, the rest (none, or at least 10) are split 9:1 into train and
/// validation.
pub fn assign_splits(n: usize, n_test: usize, rng_seed: u64) -> Result<Vec<SplitName>> {
    if n_test > n {
        return Err(Error::invalid(format!("{n_test} test scenes requested out of {n}")));
    }
    let mut labels = vec![SplitName::Test; n];
    if n == n_test {
        return Ok(labels);
    }
    let (train, validation) = split((0..n - n_test).collect(), rng_seed)?;
    for i in train {
        labels[i] = SplitName::Train;
    }
    for i in validation {
        labels[i] = SplitName::Validation;
    }
    Ok(labels)
}
