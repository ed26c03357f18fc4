//! Vanilla, multi-kernel and stacked max pooling.
//!
//! All three variants share one window convention: the kernel-`k` window of
//! output cell `z` at stride `s` covers input rows/columns `[s·z, s·z + k − 1]`
//! and cells past the border read as −∞. Every pooling at stride `s` therefore
//! produces `ceil(H/s) × ceil(W/s)` outputs regardless of `k`.
//!
//! Multi-kernel pooling runs one branch per kernel `k_i ∈ K` at stride `s`
//! and averages the branch maps. Stacked pooling pools once with `k'_1` at
//! stride `s`, then repeatedly pools the previous stage with `k'_i` at
//! stride 1, and averages the stage maps. Nested max windows compose, so
//! stage `i` sees exactly the input window `k'_1 + Σ_{1<j≤i} (k'_j − 1)·s`;
//! with the kernels from [`stacked_kernels_for`] the two forms agree
//! bit for bit while the stacked form does its later work on the
//! down-sampled map.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{elementwise_mean, Backward, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    Vanilla,
    MultiKernel,
    Stacked,
}

impl PoolVariant {
    pub fn keyword(self) -> &'static str {
        match self {
            PoolVariant::Vanilla => "vanilla",
            PoolVariant::MultiKernel => "multi",
            PoolVariant::Stacked => "stacked",
        }
    }
}

impl fmt::Display for PoolVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// A validated pooling configuration.
///
/// Textual form: `<variant>:<k1>,<k2>,...:s<stride>`, e.g. `vanilla:2:s2`,
/// `multi:2,4,8:s2`, `stacked:2,2,3:s2`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    variant: PoolVariant,
    kernels: Vec<usize>,
    stride: usize,
}

impl PoolSpec {
    pub fn new(variant: PoolVariant, kernels: Vec<usize>, stride: usize) -> Result<Self> {
        let spec = PoolSpec {
            variant,
            kernels,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn vanilla(kernel: usize, stride: usize) -> Result<Self> {
        Self::new(PoolVariant::Vanilla, vec![kernel], stride)
    }

    pub fn multi_kernel(kernels: &[usize], stride: usize) -> Result<Self> {
        Self::new(PoolVariant::MultiKernel, kernels.to_vec(), stride)
    }

    pub fn stacked(kernels: &[usize], stride: usize) -> Result<Self> {
        Self::new(PoolVariant::Stacked, kernels.to_vec(), stride)
    }

    /// The stacked equivalent of a multi-kernel spec.
    pub fn to_stacked(&self) -> Result<Self> {
        match self.variant {
            PoolVariant::MultiKernel => {
                Self::stacked(&stacked_kernels_for(&self.kernels, self.stride)?, self.stride)
            }
            _ => Err(self.error("only multi-kernel specs have a stacked equivalent")),
        }
    }

    /// The multi-kernel equivalent of a stacked spec.
    pub fn to_multi_kernel(&self) -> Result<Self> {
        match self.variant {
            PoolVariant::Stacked => Self::multi_kernel(
                &effective_kernels(&self.kernels, self.stride),
                self.stride,
            ),
            _ => Err(self.error("only stacked specs have a multi-kernel equivalent")),
        }
    }

    pub fn variant(&self) -> PoolVariant {
        self.variant
    }

    pub fn kernels(&self) -> &[usize] {
        &self.kernels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Output extent along one axis of length `n`.
    pub fn output_extent(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    fn error(&self, reason: impl Into<String>) -> Error {
        Error::PoolSpec {
            spec: self.to_string(),
            reason: reason.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(self.error("stride must be at least 1"));
        }
        if self.kernels.is_empty() {
            return Err(self.error("kernel list is empty"));
        }
        if self.kernels.contains(&0) {
            return Err(self.error("kernel sizes must be at least 1"));
        }
        match self.variant {
            PoolVariant::Vanilla if self.kernels.len() != 1 => {
                Err(self.error("vanilla pooling takes exactly one kernel"))
            }
            PoolVariant::MultiKernel => {
                if self.kernels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(self.error("multi-kernel sizes must be strictly increasing"));
                }
                if self.kernels[0] < self.stride {
                    return Err(self.error("multi-kernel sizes must be at least the stride"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PoolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kernels: Vec<String> = self.kernels.iter().map(usize::to_string).collect();
        write!(f, "{}:{}:s{}", self.variant, kernels.join(","), self.stride)
    }
}

impl FromStr for PoolSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let err = |reason: &str| Error::PoolSpec {
            spec: text.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = text.trim().split(':').collect();
        let [variant, kernels, stride] = parts[..] else {
            return Err(err("expected `<variant>:<kernels>:s<stride>`"));
        };
        let variant = match variant {
            "vanilla" => PoolVariant::Vanilla,
            "multi" | "multi-kernel" | "multi_kernel" => PoolVariant::MultiKernel,
            "stacked" => PoolVariant::Stacked,
            _ => return Err(err("variant must be vanilla, multi or stacked")),
        };
        let kernels = kernels
            .split(',')
            .map(|k| k.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err("kernels must be a comma-separated list of integers"))?;
        let stride = stride
            .strip_prefix('s')
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err("stride must look like `s2`"))?;
        PoolSpec::new(variant, kernels, stride)
    }
}

impl Serialize for PoolSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PoolSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Stacked kernels equivalent to the multi-kernel set `multi_kernels` at
/// stride `stride`: `k'_1 = k_1` and `k'_i = (k_i − k_{i−1})/s + 1`.
pub fn stacked_kernels_for(multi_kernels: &[usize], stride: usize) -> Result<Vec<usize>> {
    let spec_text = || {
        let ks: Vec<String> = multi_kernels.iter().map(usize::to_string).collect();
        format!("multi:{}:s{stride}", ks.join(","))
    };
    if stride < 1 || multi_kernels.is_empty() || multi_kernels.contains(&0) {
        return Err(Error::PoolSpec {
            spec: spec_text(),
            reason: "needs a non-empty kernel list of positive sizes and a positive stride".into(),
        });
    }
    let mut stacked = vec![multi_kernels[0]];
    for pair in multi_kernels.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next <= prev {
            return Err(Error::PoolSpec {
                spec: spec_text(),
                reason: format!("kernels must be strictly increasing ({prev} then {next})"),
            });
        }
        let diff = next - prev;
        if diff % stride != 0 {
            return Err(Error::KernelDivisibility {
                prev,
                next,
                diff,
                stride,
            });
        }
        stacked.push(diff / stride + 1);
    }
    Ok(stacked)
}

/// Input window seen by each stage of a stacked pooling.
pub fn effective_kernels(stacked: &[usize], stride: usize) -> Vec<usize> {
    let mut field = 0;
    stacked
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            field = if i == 0 { k } else { field + (k - 1) * stride };
            field
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Kernels

/// Max-pools one `h × w` plane into `ceil(h/s) × ceil(w/s)`. When `argmax`
/// is given it receives the in-plane index of the first maximum in
/// row-major scan order.
fn pool_plane<T: Element>(
    src: &[T],
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    dst: &mut [T],
    mut argmax: Option<&mut [u32]>,
) {
    let (out_h, out_w) = (h.div_ceil(s), w.div_ceil(s));
    debug_assert_eq!(dst.len(), out_h * out_w);
    for oy in 0..out_h {
        let y0 = oy * s;
        let y1 = (y0 + k).min(h);
        for ox in 0..out_w {
            let x0 = ox * s;
            let x1 = (x0 + k).min(w);
            let mut best = src[y0 * w + x0];
            let mut best_at = y0 * w + x0;
            for y in y0..y1 {
                let row = &src[y * w..y * w + x1];
                for (x, &v) in row.iter().enumerate().skip(x0) {
                    if v > best {
                        best = v;
                        best_at = y * w + x;
                    }
                }
            }
            dst[oy * out_w + ox] = best;
            if let Some(idx) = argmax.as_deref_mut() {
                idx[oy * out_w + ox] = best_at as u32;
            }
        }
    }
}

struct MaxPoolBackward {
    argmax: Vec<u32>,
    in_plane: usize,
    out_plane: usize,
}

impl<T: Element> Backward<T> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let mut grad = vec![T::zero(); parents[0].numel()];
        for (plane, (up, idx)) in upstream
            .chunks_exact(self.out_plane)
            .zip(self.argmax.chunks_exact(self.out_plane))
            .enumerate()
        {
            let dst = &mut grad[plane * self.in_plane..(plane + 1) * self.in_plane];
            for (g, &i) in up.iter().zip(idx) {
                dst[i as usize] = dst[i as usize] + *g;
            }
        }
        vec![Some(grad)]
    }
}

fn check_kernel_stride(k: usize, s: usize) -> Result<()> {
    if k < 1 || s < 1 {
        return Err(Error::invalid(format!(
            "max pooling needs kernel ≥ 1 and stride ≥ 1, got k={k}, s={s}"
        )));
    }
    Ok(())
}

/// Single max pooling `P_k` at stride `s` over every NCHW plane, with
/// argmax routing recorded when `x` requires a gradient.
pub fn max_pool<T: Element>(x: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    check_kernel_stride(k, s)?;
    let (n, c, h, w) = x.dims4()?;
    let (out_h, out_w) = (h.div_ceil(s), w.div_ceil(s));
    let (in_plane, out_plane) = (h * w, out_h * out_w);
    let mut out = vec![T::zero(); n * c * out_plane];
    let mut argmax = if x.requires_grad() {
        vec![0u32; n * c * out_plane]
    } else {
        Vec::new()
    };
    for (p, src) in x.data().chunks_exact(in_plane).enumerate() {
        let dst = &mut out[p * out_plane..(p + 1) * out_plane];
        let idx = (!argmax.is_empty()).then(|| &mut argmax[p * out_plane..(p + 1) * out_plane]);
        pool_plane(src, h, w, k, s, dst, idx);
    }
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        out,
        vec![x.clone()],
        MaxPoolBackward {
            argmax,
            in_plane,
            out_plane,
        },
    ))
}

/// `Y = X * P_k` at stride `s`.
pub fn pool_vanilla<T: Element>(x: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    max_pool(x, k, s)
}

fn expect_variant(spec: &PoolSpec, variant: PoolVariant) -> Result<()> {
    if spec.variant != variant {
        return Err(spec.error(format!("expected a {variant} spec")));
    }
    Ok(())
}

/// Branch maps of a multi-kernel pooling, one per kernel, all at the shared
/// stride.
pub fn multi_kernel_branches<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Vec<Tensor<T>>> {
    expect_variant(spec, PoolVariant::MultiKernel)?;
    let branches: Vec<Tensor<T>> = spec
        .kernels
        .iter()
        .map(|&k| max_pool(x, k, spec.stride))
        .collect::<Result<_>>()?;
    assert!(
        branches.windows(2).all(|b| b[0].shape() == b[1].shape()),
        "left-anchored branches always share extents"
    );
    Ok(branches)
}

/// Multi-kernel pooling: the element-wise mean of the branch maps.
pub fn pool_multi_kernel<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    elementwise_mean(&multi_kernel_branches(x, spec)?)
}

/// Intermediate maps `Y'_1 … Y'_n` of a stacked pooling.
pub fn stacked_stages<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Vec<Tensor<T>>> {
    expect_variant(spec, PoolVariant::Stacked)?;
    let mut stages: Vec<Tensor<T>> = Vec::with_capacity(spec.kernels.len());
    for (i, &k) in spec.kernels.iter().enumerate() {
        let next = match stages.last() {
            None => max_pool(x, k, spec.stride)?,
            Some(prev) => max_pool(prev, k, 1)?,
        };
        debug_assert!(i == 0 || next.shape() == stages[0].shape());
        stages.push(next);
    }
    Ok(stages)
}

/// Stacked pooling: the element-wise mean of the stage maps.
pub fn pool_stacked<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    elementwise_mean(&stacked_stages(x, spec)?)
}

/// Applies whichever variant `spec` names.
pub fn pool<T: Element>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    match spec.variant {
        PoolVariant::Vanilla => pool_vanilla(x, spec.kernels[0], spec.stride),
        PoolVariant::MultiKernel => pool_multi_kernel(x, spec),
        PoolVariant::Stacked => pool_stacked(x, spec),
    }
}

/// Feeds every argmax decision taken by `spec` on `x` into `state`.
///
/// Two inputs route gradients identically through the pooling iff they
/// hash the same sequence, which is how gradient checks spot max ties.
pub fn hash_routing<T: Element, H: Hasher>(x: &Tensor<T>, spec: &PoolSpec, state: &mut H) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    let plane_routes = |data: &[T], h: usize, w: usize, k: usize, s: usize, state: &mut H| -> Vec<T> {
        let out_plane = h.div_ceil(s) * w.div_ceil(s);
        let mut out = vec![T::zero(); data.len() / (h * w) * out_plane];
        let mut idx = vec![0u32; out.len()];
        for (p, src) in data.chunks_exact(h * w).enumerate() {
            let r = p * out_plane..(p + 1) * out_plane;
            pool_plane(src, h, w, k, s, &mut out[r.clone()], Some(&mut idx[r]));
        }
        idx.hash(state);
        out
    };
    match spec.variant {
        PoolVariant::Vanilla | PoolVariant::MultiKernel => {
            for &k in &spec.kernels {
                plane_routes(x.data(), h, w, k, spec.stride, state);
            }
        }
        PoolVariant::Stacked => {
            let mut cur = plane_routes(x.data(), h, w, spec.kernels[0], spec.stride, state);
            let (sh, sw) = (h.div_ceil(spec.stride), w.div_ceil(spec.stride));
            for &k in &spec.kernels[1..] {
                cur = plane_routes(&cur, sh, sw, k, 1, state);
            }
        }
    }
    Ok(())
}

/// Outcome of comparing a multi-kernel pooling with its stacked form.
#[derive(Clone, Debug, PartialEq)]
pub struct Equivalence {
    pub stacked: PoolSpec,
    pub forward_max_abs_diff: f64,
    pub gradient_max_abs_diff: f64,
}

/// Runs `multi_spec` and its stacked equivalent on `x`, returning the
/// largest absolute difference of the forward maps and of the input
/// gradients under the shared upstream gradient `upstream` (a map shaped
/// like the pooled output).
///
/// The default upstream holds small integers times the branch count, so the
/// `1/n` mean backward and every accumulation stay exact and any nonzero
/// gradient difference reflects routing rather than summation order.
pub fn verify_equivalence<T: Element>(
    x: &Tensor<T>,
    multi_spec: &PoolSpec,
    upstream: Option<&Tensor<T>>,
) -> Result<Equivalence> {
    expect_variant(multi_spec, PoolVariant::MultiKernel)?;
    let stacked = multi_spec.to_stacked()?;
    let leaf_m = x.with_requires_grad(true);
    let leaf_s = x.with_requires_grad(true);
    let y_m = pool_multi_kernel(&leaf_m, multi_spec)?;
    let y_s = pool_stacked(&leaf_s, &stacked)?;
    let forward = y_m.max_abs_diff(&y_s)?.as_f64();

    let n = multi_spec.kernels().len();
    let seed = match upstream {
        Some(u) => u.clone(),
        None => {
            let data = (0..y_m.numel())
                .map(|i| T::from_f64_lossy(((1 + i % 7) * n) as f64))
                .collect();
            Tensor::from_vec(y_m.shape(), data)?
        }
    };
    let g_m = y_m.backward_with(&seed)?;
    let g_s = y_s.backward_with(&seed)?;
    let (g_m, g_s) = (
        g_m.get(&leaf_m).expect("input requires grad"),
        g_s.get(&leaf_s).expect("input requires grad"),
    );
    let gradient = g_m
        .iter()
        .zip(g_s)
        .map(|(a, b)| (*a - *b).abs().as_f64())
        .fold(0.0, f64::max);
    Ok(Equivalence {
        stacked,
        forward_max_abs_diff: forward,
        gradient_max_abs_diff: gradient,
    })
}
