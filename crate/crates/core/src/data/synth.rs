use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CrowdSample, Head};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Synthetic crowd scene parameters.
///
/// Head radius grows linearly from `head_radius_min` at the top row to
/// `head_radius_max` at the bottom row, so the same blob pattern shows up
/// at several scales within one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub head_radius_min: f64,
    pub head_radius_max: f64,
    /// Heads keep at least this distance from every border.
    pub margin: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 64,
            width: 64,
            count_min: 5,
            count_max: 50,
            head_radius_min: 1.5,
            head_radius_max: 6.0,
            margin: 8.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene extents must be positive"));
        }
        if self.count_min > self.count_max {
            return Err(Error::invalid(format!(
                "count range [{}, {}] is empty",
                self.count_min, self.count_max
            )));
        }
        if !(self.head_radius_min > 0.0 && self.head_radius_min <= self.head_radius_max) {
            return Err(Error::invalid("head radius range must satisfy 0 < min ≤ max"));
        }
        if !(self.margin >= 0.0) || 2.0 * self.margin >= self.height.min(self.width) as f64 {
            return Err(Error::invalid(format!(
                "margin {} leaves no room in a {}x{} scene",
                self.margin, self.height, self.width
            )));
        }
        Ok(())
    }

    fn radius_at(&self, y: f64) -> f64 {
        let t = y / self.height as f64;
        self.head_radius_min + (self.head_radius_max - self.head_radius_min) * t
    }
}

/// Quantization grid shared with the 16-bit image files, so a scene read
/// back from disk is bit-identical to the generated one.
const LEVELS: f64 = 65535.0;

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Alpha-blends an axis-aligned soft ellipse of tone `tone`.
    fn blob(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, tone: f64) {
        let (y0, y1) = ((cy - ry - 1.0).floor().max(0.0) as usize, ((cy + ry + 1.0).ceil() as usize).min(self.h));
        let (x0, x1) = ((cx - rx - 1.0).floor().max(0.0) as usize, ((cx + rx + 1.0).ceil() as usize).min(self.w));
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let d = (dx * dx + dy * dy).sqrt();
                let alpha = 1.0 - smoothstep(0.6, 1.0, d);
                if alpha > 0.0 {
                    let p = &mut self.px[y * self.w + x];
                    *p = *p * (1.0 - alpha) + tone * alpha;
                }
            }
        }
    }
}

fn background(params: &SceneParams, rng: &mut ChaCha8Rng) -> Canvas {
    let (h, w) = (params.height, params.width);
    let base = rng.random_range(0.35..0.6);
    let tilt = rng.random_range(-0.15..0.15);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.02..0.12);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.02..0.08);
            (angle, freq, phase, amp)
        })
        .collect();
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = base + tilt * (y as f64 / h as f64 - 0.5);
            for &(angle, freq, phase, amp) in &gratings {
                let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                v += amp * (2.0 * PI * freq * u + phase).sin();
            }
            v += rng.random_range(-0.03..0.03);
            px.push(v);
        }
    }
    Canvas { h, w, px }
}

/// Renders a deterministic synthetic crowd scene from `rng_seed`.
///
/// The head count is uniform on `[count_min, count_max]`; heads are placed
/// uniformly inside the margin, each drawn as a dark head blob above a
/// lighter body blob, both scaled by the perspective radius of its row.
pub fn synthesize_scene(id: impl Into<String>, rng_seed: u64, params: &SceneParams) -> Result<CrowdSample> {
    params.validate()?;
    let mut rng = seed::stream(rng_seed, "scene");
    let mut canvas = background(params, &mut rng);
    let (h, w) = (params.height as f64, params.width as f64);
    let count = rng.random_range(params.count_min..=params.count_max);
    let mut heads: Vec<Head> = (0..count)
        .map(|_| {
            Head::new(
                rng.random_range(params.margin..w - params.margin),
                rng.random_range(params.margin..h - params.margin),
            )
        })
        .collect();
    // Far (upper) people first so nearer ones occlude them.
    heads.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    for head in &heads {
        let r = params.radius_at(head.y);
        let body_tone = rng.random_range(0.45..0.95);
        let head_tone = rng.random_range(0.03..0.3);
        canvas.blob(head.x, head.y + 1.9 * r, 1.5 * r, 1.4 * r, body_tone);
        canvas.blob(head.x, head.y, r, r, head_tone);
    }
    let data = canvas
        .px
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * LEVELS).round() / LEVELS)
        .collect();
    CrowdSample::new(id, Tensor::from_vec(&[1, params.height, params.width], data)?, heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene() {
        let params = SceneParams {
            count_min: 0,
            count_max: 0,
            ..SceneParams::default()
        };
        let s = synthesize_scene("a", 3, &params).unwrap();
        assert_eq!(s.count(), 0);
        assert!(s.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = s
            .image()
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        assert!(hi - lo > 0.01, "background should be textured");
    }

    #[test]
    fn deterministic_in_seed() {
        let p = SceneParams::default();
        let a = synthesize_scene("a", 42, &p).unwrap();
        let b = synthesize_scene("a", 42, &p).unwrap();
        let c = synthesize_scene("a", 43, &p).unwrap();
        assert_eq!(a.image().data(), b.image().data());
        assert_eq!(a.heads(), b.heads());
        assert_ne!(a.image().data(), c.image().data());
    }

    #[test]
    fn heads_respect_margin_and_mass_bound() {
        let p = SceneParams::default();
        for seed in 0..20 {
            let s = synthesize_scene("m", seed, &p).unwrap();
            for head in s.heads() {
                assert!(head.x >= p.margin && head.x < p.width as f64 - p.margin);
                assert!(head.y >= p.margin && head.y < p.height as f64 - p.margin);
            }
            let mass = s.density().sum_all();
            let n = s.count() as f64;
            assert!(mass >= 0.95 * n - 1e-9 && mass <= n + 1e-9, "seed {seed}: {mass} vs {n}");
        }
    }

    #[test]
    fn invalid_params() {
        let bad = SceneParams {
            count_min: 5,
            count_max: 4,
            ..SceneParams::default()
        };
        assert!(synthesize_scene("x", 0, &bad).is_err());
        let bad = SceneParams {
            margin: 40.0,
            ..SceneParams::default()
        };
        assert!(synthesize_scene("x", 0, &bad).is_err());
    }
}
