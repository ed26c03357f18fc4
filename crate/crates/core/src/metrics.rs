//! Counting metrics, density-group breakdowns and the variation ratio used
//! to quantify scale invariance of pooled feature maps.

use serde::{Deserialize, Serialize};

use crate::data::CrowdSample;
use crate::error::{Error, Result};
use crate::networks::{predicted_count, Network};
use crate::tensor::{bilinear_resize, Element, Tensor};

/// Mean absolute error and root mean squared error of `(count, gt)` pairs.
pub fn mae_mse(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("MAE/MSE of an empty result set"));
    }
    let n = pairs.len() as f64;
    let abs: f64 = pairs.iter().map(|(c, g)| (c - g).abs()).sum();
    let sq: f64 = pairs.iter().map(|(c, g)| (c - g) * (c - g)).sum();
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub id: String,
    pub predicted: f64,
    pub ground_truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub records: Vec<CountRecord>,
    pub mae: f64,
    pub mse: f64,
}

impl CountResult {
    pub fn from_records(records: Vec<CountRecord>) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.predicted, r.ground_truth)).collect();
        let (mae, mse) = mae_mse(&pairs)?;
        // RMSE dominates MAE for any residual set; a violation means the
        // inputs were not finite.
        if !(mse + 1e-12 * mse.abs().max(1.0) >= mae) {
            return Err(Error::invalid(format!("non-finite counts: MAE {mae}, MSE {mse}")));
        }
        Ok(CountResult { records, mae, mse })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,predicted,ground_truth,abs_error\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.id,
                r.predicted,
                r.ground_truth,
                (r.predicted - r.ground_truth).abs()
            ));
        }
        out
    }
}

/// Predicted (density-map mass) vs annotated head count for every sample.
/// Samples are cropped to the network's down-sampling multiple first.
pub fn evaluate_counts<T: Element>(net: &Network<T>, samples: &[CrowdSample]) -> Result<CountResult> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let factor = net.config().downsampling();
    let records = samples
        .iter()
        .map(|s| {
            let s = s.fit_to_multiple(factor)?;
            let out = net.forward(&s.network_input().cast())?;
            Ok(CountRecord {
                id: s.id.clone(),
                predicted: predicted_count(&out, 1.0)?[0],
                ground_truth: s.count() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CountResult::from_records(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGroup {
    pub index: usize,
    pub min_count: f64,
    pub max_count: f64,
    pub len: usize,
    pub mae: f64,
}

/// Rank-based quantile groups over ground-truth counts: after a stable sort
/// by count, group `b` of `B` holds ranks `[b·n/B, (b+1)·n/B)`. Groups left
/// empty (fewer results than buckets) are omitted.
pub fn group_by_density(result: &CountResult, buckets: usize) -> Result<Vec<DensityGroup>> {
    if buckets == 0 {
        return Err(Error::invalid("need at least one density bucket"));
    }
    let mut order: Vec<&CountRecord> = result.records.iter().collect();
    order.sort_by(|a, b| a.ground_truth.total_cmp(&b.ground_truth));
    let n = order.len();
    let mut groups = Vec::with_capacity(buckets);
    for b in 0..buckets {
        let members = &order[b * n / buckets..(b + 1) * n / buckets];
        if members.is_empty() {
            continue;
        }
        let abs: f64 = members.iter().map(|r| (r.predicted - r.ground_truth).abs()).sum();
        groups.push(DensityGroup {
            index: b,
            min_count: members[0].ground_truth,
            max_count: members[members.len() - 1].ground_truth,
            len: members.len(),
            mae: abs / members.len() as f64,
        });
    }
    Ok(groups)
}

/// Variation ratio of one feature-map pair (`1 × C × h × w` each): the mean
/// over channels of `Σ|X̂ − X| / Σ|X|`. Channels with `Σ|X| = 0` are
/// skipped; `None` when every channel is zero.
pub fn variation_ratio_maps<T: Element>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Option<f64>> {
    let (n, c, h, w) = x.dims4()?;
    if x.shape() != x_hat.shape() || n != 1 {
        return Err(Error::shape(format!(
            "variation ratio needs two equal 1 x C x H x W maps, got {:?} and {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let plane = h * w;
    let mut total = 0.0;
    let mut used = 0usize;
    for ch in 0..c {
        let a = &x.data()[ch * plane..(ch + 1) * plane];
        let b = &x_hat.data()[ch * plane..(ch + 1) * plane];
        let denom: f64 = a.iter().map(|v| v.as_f64().abs()).sum();
        if denom == 0.0 {
            continue;
        }
        let num: f64 = a.iter().zip(b).map(|(p, q)| (q.as_f64() - p.as_f64()).abs()).sum();
        total += num / denom;
        used += 1;
    }
    Ok((used > 0).then(|| total / used as f64))
}

/// Crops or edge-pads the bottom/right of a `1 × C × h × w` image to
/// `th × tw`.
fn fit_extents<T: Element>(image: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    if (h, w) == (th, tw) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in image.data().chunks_exact(h * w) {
        for y in 0..th {
            let sy = y.min(h - 1);
            for x in 0..tw {
                out.push(plane[sy * w + x.min(w - 1)]);
            }
        }
    }
    Tensor::from_vec(&[n, c, th, tw], out)
}

/// Nearest multiple of `f` to `v`, at least `f`.
fn nearest_multiple(v: usize, f: usize) -> usize {
    (((v as f64) / f as f64).round() as usize).max(1) * f
}

/// Per-probe variation ratio of `net` on `image` (`1 × C × H × W`, extents
/// divisible by the down-sampling factor) under rescaling by `beta`.
///
/// The image is bilinearly resized to `round(β·H) × round(β·W)`, cropped or
/// edge-padded to the nearest divisible extents, run through the network,
/// and each probed post-pooling map is resized back to the extents of the
/// original map before comparison.
pub fn variation_ratio<T: Element>(
    net: &Network<T>,
    image: &Tensor<T>,
    beta: f64,
    probes: &[usize],
) -> Result<Vec<Option<f64>>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("scaling factor must be positive, got {beta}")));
    }
    let sites = net.config().pool_sites();
    if let Some(&bad) = probes.iter().find(|&&p| p >= sites) {
        return Err(Error::invalid(format!(
            "probe {bad} out of range: {} has {sites} pooling site(s)",
            net.config().arch
        )));
    }
    let (_, _, h, w) = image.dims4()?;
    let f = net.config().downsampling();
    let frozen = if net.is_trainable() {
        let mut n = net.clone();
        n.set_trainable(false);
        n
    } else {
        net.clone()
    };
    let image = image.detach();
    let base = frozen.forward_traced(&image)?;
    let (sh, sw) = ((beta * h as f64).round() as usize, (beta * w as f64).round() as usize);
    let scaled = bilinear_resize(&image, sh.max(1), sw.max(1))?;
    let scaled = fit_extents(&scaled, nearest_multiple(sh, f), nearest_multiple(sw, f))?;
    let other = frozen.forward_traced(&scaled)?;
    probes
        .iter()
        .map(|&p| {
            let x = &base.pooled[p];
            let (_, _, xh, xw) = x.dims4()?;
            let x_hat = bilinear_resize(&other.pooled[p], xh, xw)?;
            variation_ratio_maps(x, &x_hat)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariancePoint {
    pub image: String,
    pub head_count: usize,
    pub variant: String,
    pub layer: usize,
    pub gamma: Option<f64>,
    pub outlier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub variant: String,
    pub layer: usize,
    pub mean_gamma: Option<f64>,
    pub retained: usize,
    pub outliers: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub beta: f64,
    pub threshold: f64,
    pub pools: Vec<(String, String)>,
    pub points: Vec<InvariancePoint>,
    pub summary: Vec<LayerSummary>,
}

/// Slot labels used in reports.
pub const VANILLA: &str = "vanilla";
pub const STACKED: &str = "stacked";

impl InvarianceReport {
    pub fn mean(&self, variant: &str, layer: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.variant == variant && s.layer == layer)
            .and_then(|s| s.mean_gamma)
    }

    /// One row per image, layer and variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,head_count,variant,layer,gamma,outlier\n");
        for p in &self.points {
            let gamma = p.gamma.map(|g| g.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.image, p.head_count, p.variant, p.layer, gamma, p.outlier
            ));
        }
        out
    }

    /// Scatter table: γ of both variants against head count, one row per
    /// image and layer; outliers are left in and flagged by the threshold.
    pub fn scatter_csv(&self) -> String {
        let mut out = format!("head_count,layer,{VANILLA},{STACKED}\n");
        let fmt = |g: Option<f64>| g.map(|g| g.to_string()).unwrap_or_default();
        for v in self.points.iter().filter(|p| p.variant == VANILLA) {
            let s = self
                .points
                .iter()
                .find(|p| p.variant == STACKED && p.image == v.image && p.layer == v.layer);
            out.push_str(&format!(
                "{},{},{},{}\n",
                v.head_count,
                v.layer,
                fmt(v.gamma),
                fmt(s.and_then(|s| s.gamma))
            ));
        }
        out
    }
}

/// Variation ratios of two networks (sharing a config up to the pooling
/// variant) after every pooling site, over `samples`.
///
/// γ values above `threshold` are kept in `points` but flagged and left out
/// of the per-layer means.
pub fn invariance_study<T: Element>(
    net_vanilla: &Network<T>,
    net_stacked: &Network<T>,
    samples: &[CrowdSample],
    beta: f64,
    threshold: f64,
) -> Result<InvarianceReport> {
    let (a, b) = (net_vanilla.config(), net_stacked.config());
    if a.arch != b.arch || a.input_channels != b.input_channels || a.output_relu != b.output_relu {
        return Err(Error::invalid(format!(
            "networks differ beyond pooling: {} vs {}",
            a.arch, b.arch
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("outlier threshold must be positive, got {threshold}")));
    }
    let probes: Vec<usize> = (0..a.pool_sites()).collect();
    let factor = a.downsampling();
    let mut points = Vec::new();
    for sample in samples {
        let s = sample.fit_to_multiple(factor)?;
        let image: Tensor<T> = s.network_input().cast();
        for (label, net) in [(VANILLA, net_vanilla), (STACKED, net_stacked)] {
            for (layer, gamma) in variation_ratio(net, &image, beta, &probes)?.into_iter().enumerate() {
                points.push(InvariancePoint {
                    image: s.id.clone(),
                    head_count: s.count(),
                    variant: label.to_string(),
                    layer,
                    gamma,
                    outlier: gamma.is_some_and(|g| g > threshold),
                });
            }
        }
    }
    let mut summary = Vec::new();
    for label in [VANILLA, STACKED] {
        for &layer in &probes {
            let here: Vec<&InvariancePoint> = points
                .iter()
                .filter(|p| p.variant == label && p.layer == layer)
                .collect();
            let kept: Vec<f64> = here
                .iter()
                .filter(|p| !p.outlier)
                .filter_map(|p| p.gamma)
                .collect();
            summary.push(LayerSummary {
                variant: label.to_string(),
                layer,
                mean_gamma: (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64),
                retained: kept.len(),
                outliers: here.iter().filter(|p| p.outlier).count(),
                missing: here.iter().filter(|p| p.gamma.is_none()).count(),
            });
        }
    }
    Ok(InvarianceReport {
        beta,
        threshold,
        pools: vec![
            (VANILLA.to_string(), a.pool.to_string()),
            (STACKED.to_string(), b.pool.to_string()),
        ],
        points,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Architecture, NetworkConfig};
    use crate::pooling::PoolSpec;

    #[test]
    fn hand_computed_errors() {
        assert_eq!(mae_mse(&[(3.0, 3.0), (7.0, 7.0)]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_mse(&[(3.0, 4.0), (5.0, 4.0)]).unwrap(), (1.0, 1.0));
        assert_eq!(mae_mse(&[(0.0, 4.0), (8.0, 4.0)]).unwrap(), (4.0, 4.0));
        let (mae, mse) = mae_mse(&[(0.0, 4.0), (4.0, 4.0)]).unwrap();
        assert_eq!(mae, 2.0);
        assert_eq!(mse, 8.0f64.sqrt());
        assert!(mae_mse(&[]).is_err());
    }

    fn result(pairs: &[(f64, f64)]) -> CountResult {
        let records = pairs
            .iter()
            .enumerate()
            .map(|(i, &(p, g))| CountRecord {
                id: i.to_string(),
                predicted: p,
                ground_truth: g,
            })
            .collect();
        CountResult::from_records(records).unwrap()
    }

    #[test]
    fn density_groups() {
        let pairs: Vec<(f64, f64)> = (1..=100).map(|g| (g as f64 * 1.1, g as f64)).collect();
        let r = result(&pairs);
        let one = group_by_density(&r, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].mae - r.mae).abs() < 1e-12);
        let four = group_by_density(&r, 4).unwrap();
        let edges: Vec<(f64, f64)> = four.iter().map(|g| (g.min_count, g.max_count)).collect();
        assert_eq!(edges, vec![(1.0, 25.0), (26.0, 50.0), (51.0, 75.0), (76.0, 100.0)]);
        assert!(four.windows(2).all(|w| w[0].mae < w[1].mae));
        assert!(group_by_density(&r, 0).is_err());
    }

    #[test]
    fn ratio_of_doubled_map_is_one() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let x2 = Tensor::from_vec(&[1, 2, 2, 2], x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert_eq!(variation_ratio_maps(&x, &x2).unwrap(), Some(1.0));
        assert_eq!(variation_ratio_maps(&x, &x).unwrap(), Some(0.0));
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert_eq!(variation_ratio_maps(&z, &z).unwrap(), None);
    }

    #[test]
    fn unit_beta_gives_zero() {
        let net: Network = Network::build(NetworkConfig::new(Architecture::BaseS, PoolSpec::vanilla(2, 2).unwrap()), 3);
        let image = Tensor::from_vec(&[1, 1, 16, 16], (0..256).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        let g = variation_ratio(&net, &image, 1.0, &[0, 1]).unwrap();
        assert_eq!(g, vec![Some(0.0), Some(0.0)]);
        assert!(variation_ratio(&net, &image, 1.0, &[2]).is_err());
        assert!(variation_ratio(&net, &image, 0.0, &[0]).is_err());
    }

    #[test]
    fn nearest_multiple_rounds() {
        assert_eq!(nearest_multiple(30, 4), 32);
        assert_eq!(nearest_multiple(29, 4), 28);
        assert_eq!(nearest_multiple(1, 4), 4);
    }
}
