use super::Head;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground-truth density: one unit-mass Gaussian per head.
///
/// Each kernel is sampled at pixel centers within a radius of 4σ and
/// normalized over that full disc before clipping to the image, so a head
/// deep inside the image contributes exactly 1 while a head near the border
/// loses the part of its disc that falls outside.
pub fn density_map(heads: &[Head], h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("density map extents must be positive"));
    }
    let radius = 4.0 * sigma;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut map = vec![0.0; h * w];
    let mut weights = Vec::new();
    for head in heads {
        // Pixel rows/columns whose centers can fall inside the disc; may
        // extend past the image.
        let i_lo = (head.y - radius - 0.5).ceil() as i64;
        let i_hi = (head.y + radius - 0.5).floor() as i64;
        let j_lo = (head.x - radius - 0.5).ceil() as i64;
        let j_hi = (head.x + radius - 0.5).floor() as i64;
        weights.clear();
        let mut total = 0.0;
        for i in i_lo..=i_hi {
            let dy = i as f64 + 0.5 - head.y;
            for j in j_lo..=j_hi {
                let dx = j as f64 + 0.5 - head.x;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    let g = (-d2 * inv_two_var).exp();
                    total += g;
                    weights.push((i, j, g));
                }
            }
        }
        if total == 0.0 {
            // Kernel narrower than the pixel grid: all mass on the nearest pixel.
            let i = (head.y.floor() as i64).clamp(0, h as i64 - 1) as usize;
            let j = (head.x.floor() as i64).clamp(0, w as i64 - 1) as usize;
            map[i * w + j] += 1.0;
            continue;
        }
        for &(i, j, g) in &weights {
            if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                map[i as usize * w + j as usize] += g / total;
            }
        }
    }
    Tensor::from_vec(&[1, h, w], map)
}

/// Sums non-overlapping `factor × factor` blocks of an `h × w` map.
pub fn block_sum(map: &[f64], h: usize, w: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "{h}x{w} map cannot be split into {factor}x{factor} blocks"
        )));
    }
    if map.len() != h * w {
        return Err(Error::shape(format!("map has {} values, expected {h}x{w}", map.len())));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += map[y * w + x];
        }
    }
    Ok(out)
}
