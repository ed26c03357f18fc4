//! Standalone recomputation of the variation ratio: resizing, extent
//! fitting and the per-channel ratio are re-derived here from their
//! definitions on plain `Vec<f64>` planes; only the network forward pass
//! comes from the library.

use stackpool::networks::Network;
use stackpool::Tensor;

/// Corner-aligned bilinear resize of one `h × w` plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize, on: usize| -> (usize, usize, f64) {
        if on == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n - 1) as f64 / (on - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1, fy) = coord(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = coord(j, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn planes(t: &Tensor) -> (usize, usize, usize, Vec<Vec<f64>>) {
    let shape = t.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    (c, h, w, t.data().chunks(h * w).map(<[f64]>::to_vec).collect())
}

/// γ at every pooling site of `net` for a `1 × 1 × H × W` image.
pub fn gamma(net: &Network, image: &Tensor, beta: f64) -> Vec<Option<f64>> {
    let f = net.config().downsampling();
    let (_, h, w, img) = planes(image);
    let (sh, sw) = ((beta * h as f64).round() as usize, (beta * w as f64).round() as usize);
    let scaled = resize_plane(&img[0], h, w, sh, sw);
    // Nearest multiple of the down-sampling factor, then crop or repeat the
    // last row/column.
    let fit = |v: usize| ((v as f64 / f as f64).round() as usize).max(1) * f;
    let (th, tw) = (fit(sh), fit(sw));
    let mut fitted = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            fitted.push(scaled[y.min(sh - 1) * sw + x.min(sw - 1)]);
        }
    }
    let base = net.forward_traced(image).unwrap();
    let other = net
        .forward_traced(&Tensor::from_vec(&[1, 1, th, tw], fitted).unwrap())
        .unwrap();
    base.pooled
        .iter()
        .zip(&other.pooled)
        .map(|(x, xs)| {
            let (c, xh, xw, xp) = planes(x);
            let (_, oh, ow, op) = planes(xs);
            let mut ratios = Vec::new();
            for ch in 0..c {
                let back = resize_plane(&op[ch], oh, ow, xh, xw);
                let denom: f64 = xp[ch].iter().map(|v| v.abs()).sum();
                if denom > 0.0 {
                    let num: f64 = xp[ch].iter().zip(&back).map(|(a, b)| (b - a).abs()).sum();
                    ratios.push(num / denom);
                }
            }
            (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
        })
        .collect()
}
