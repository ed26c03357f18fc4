//! Timing harness for pooling layers and whole networks.
//!
//! Cases of one scenario are timed round-robin (one run of each variant per
//! round) so slow drifts in machine load hit every variant alike; the first
//! `warmups` rounds are discarded and the median and interquartile range of
//! the rest are reported.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Architecture, Network, NetworkConfig};
use crate::pooling::{self, PoolSpec, PoolVariant};
use crate::seed;
use crate::tensor::{sum, DType, Element, Tensor};

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LayerForward,
    NetForward,
    /// The backward pass alone, after an untimed forward pass.
    NetBackward,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::LayerForward => "layer-forward",
            Scenario::NetForward => "net-forward",
            Scenario::NetBackward => "net-backward",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub variant: PoolVariant,
    pub pool: String,
    pub scenario: Scenario,
    pub extents: Vec<usize>,
    pub dtype: String,
    pub reps: usize,
    pub warmups: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub protocol: String,
    pub cases: Vec<BenchCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmups: usize,
    /// Side of the square single-channel map for the layer scenario.
    pub layer_extent: usize,
    pub arch: Architecture,
    /// Side of the square single-channel network input.
    pub net_extent: usize,
    pub dtype: DType,
    pub pools: Vec<PoolSpec>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            reps: 40,
            warmups: 8,
            layer_extent: 256,
            arch: Architecture::Deep,
            net_extent: 64,
            dtype: DType::F32,
            pools: default_pools(),
            seed: 0,
        }
    }
}

pub fn default_pools() -> Vec<PoolSpec> {
    vec![
        PoolSpec::vanilla(2, 2).expect("valid"),
        PoolSpec::stacked(&[2, 2, 3], 2).expect("valid"),
        PoolSpec::multi_kernel(&[2, 4, 8], 2).expect("valid"),
    ]
}

impl BenchConfig {
    pub fn protocol(&self) -> String {
        format!(
            "round-robin over variants; {} warm-up rounds discarded, median and IQR of {} timed rounds; \
             monotonic wall clock; single thread; {} elements; net-backward times the backward pass alone",
            self.warmups,
            self.reps,
            self.dtype.name()
        )
    }

    fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(Error::invalid("benchmark needs at least one repetition"));
        }
        if self.pools.is_empty() {
            return Err(Error::invalid("benchmark needs at least one pool spec"));
        }
        Ok(())
    }
}

/// Median and interquartile range with linear interpolation between order
/// statistics.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Runs every closure `warmups + reps` times round-robin and returns the
/// post-warmup times in milliseconds, one vector per closure.
fn round_robin(runs: &mut [Box<dyn FnMut() -> Result<f64> + '_>], reps: usize, warmups: usize) -> Result<Vec<Vec<f64>>> {
    let mut times = vec![Vec::with_capacity(reps); runs.len()];
    for round in 0..warmups + reps {
        for (i, run) in runs.iter_mut().enumerate() {
            let ms = run()?;
            if round >= warmups {
                times[i].push(ms);
            }
        }
    }
    Ok(times)
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = black_box(f());
    (r, start.elapsed().as_secs_f64() * 1e3)
}

fn random_input<T: Element>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let mut rng = seed::stream(seed, "bench/input");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| T::from_f64_lossy(rng.random::<f64>())).collect())
}

fn equal_bits<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Every stacked spec must reproduce the output of its multi-kernel
/// counterpart bit for bit before timings are comparable.
fn assert_equivalent<T: Element>(specs: &[PoolSpec], mut output: impl FnMut(&PoolSpec) -> Result<Tensor<T>>) -> Result<()> {
    for spec in specs.iter().filter(|s| s.variant() == PoolVariant::Stacked) {
        let multi = spec.to_multi_kernel()?;
        if let Some(listed) = specs.iter().find(|s| **s == multi) {
            if !equal_bits(&output(spec)?, &output(listed)?) {
                return Err(Error::invalid(format!("{spec} and {listed} disagree on the benchmark input")));
            }
        }
    }
    Ok(())
}

fn case(spec: &PoolSpec, scenario: Scenario, extents: &[usize], dtype: DType, reps: usize, warmups: usize, times: &[f64]) -> BenchCase {
    let (median_ms, iqr_ms) = median_iqr(times);
    BenchCase {
        variant: spec.variant(),
        pool: spec.to_string(),
        scenario,
        extents: extents.to_vec(),
        dtype: dtype.name().to_string(),
        reps,
        warmups,
        median_ms,
        iqr_ms,
    }
}

/// Forward time of a single pooling layer on a `1 × 1 × extent × extent`
/// map, reusing one input buffer.
pub fn bench_pool_layer<T: Element>(specs: &[PoolSpec], extent: usize, reps: usize, warmups: usize, seed: u64) -> Result<Vec<BenchCase>> {
    if reps < 1 {
        return Err(Error::invalid("benchmark needs at least one repetition"));
    }
    let shape = [1, 1, extent, extent];
    let x: Tensor<T> = random_input(&shape, seed)?;
    assert_equivalent(specs, |s| pooling::pool(&x, s))?;
    let mut runs: Vec<Box<dyn FnMut() -> Result<f64>>> = specs
        .iter()
        .map(|spec| {
            let x = &x;
            Box::new(move || {
                let (out, ms) = timed(|| pooling::pool(x, spec));
                out?;
                Ok(ms)
            }) as Box<dyn FnMut() -> Result<f64>>
        })
        .collect();
    let times = round_robin(&mut runs, reps, warmups)?;
    Ok(specs
        .iter()
        .zip(&times)
        .map(|(spec, t)| case(spec, Scenario::LayerForward, &shape, T::DTYPE, reps, warmups, t))
        .collect())
}

/// Forward and backward times of `arch` under each pooling variant on a
/// fixed-seed `1 × 1 × extent × extent` input. All variants share the same
/// weights.
pub fn bench_network<T: Element>(arch: Architecture, specs: &[PoolSpec], extent: usize, reps: usize, warmups: usize, seed: u64) -> Result<Vec<BenchCase>> {
    if reps < 1 {
        return Err(Error::invalid("benchmark needs at least one repetition"));
    }
    let shape = [1, 1, extent, extent];
    let x: Tensor<T> = random_input(&shape, seed)?;
    let base: Network<T> = Network::build(NetworkConfig::new(arch, specs[0].clone()), seed);
    let frozen: Vec<Network<T>> = specs.iter().map(|s| base.with_pool(s.clone())).collect();
    let trainable: Vec<Network<T>> = frozen
        .iter()
        .map(|n| {
            let mut n = n.clone();
            n.set_trainable(true);
            n
        })
        .collect();
    assert_equivalent(specs, |s| {
        let i = specs.iter().position(|t| t == s).expect("listed spec");
        frozen[i].forward(&x)
    })?;

    let mut forward: Vec<Box<dyn FnMut() -> Result<f64>>> = frozen
        .iter()
        .map(|net| {
            let x = &x;
            Box::new(move || {
                let (out, ms) = timed(|| net.forward(x));
                out?;
                Ok(ms)
            }) as Box<dyn FnMut() -> Result<f64>>
        })
        .collect();
    let fwd = round_robin(&mut forward, reps, warmups)?;
    drop(forward);

    let mut backward: Vec<Box<dyn FnMut() -> Result<f64>>> = trainable
        .iter()
        .map(|net| {
            let x = &x;
            Box::new(move || {
                let loss = sum(&net.forward(x)?);
                let (grads, ms) = timed(|| loss.backward());
                grads?;
                Ok(ms)
            }) as Box<dyn FnMut() -> Result<f64>>
        })
        .collect();
    let bwd = round_robin(&mut backward, reps, warmups)?;

    let mut cases = Vec::with_capacity(2 * specs.len());
    for (spec, t) in specs.iter().zip(&fwd) {
        cases.push(case(spec, Scenario::NetForward, &shape, T::DTYPE, reps, warmups, t));
    }
    for (spec, t) in specs.iter().zip(&bwd) {
        cases.push(case(spec, Scenario::NetBackward, &shape, T::DTYPE, reps, warmups, t));
    }
    Ok(cases)
}

/// Layer and network benchmarks as configured.
pub fn run(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let cases = match config.dtype {
        DType::F32 => run_typed::<f32>(config)?,
        DType::F64 => run_typed::<f64>(config)?,
    };
    Ok(BenchReport {
        protocol: config.protocol(),
        cases,
    })
}

fn run_typed<T: Element>(c: &BenchConfig) -> Result<Vec<BenchCase>> {
    let mut cases = bench_pool_layer::<T>(&c.pools, c.layer_extent, c.reps, c.warmups, c.seed)?;
    cases.extend(bench_network::<T>(c.arch, &c.pools, c.net_extent, c.reps, c.warmups, c.seed)?);
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

impl BenchReport {
    pub fn median(&self, variant: PoolVariant, scenario: Scenario) -> Option<f64> {
        self.cases
            .iter()
            .find(|c| c.variant == variant && c.scenario == scenario)
            .map(|c| c.median_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,pool,scenario,extents,dtype,reps,warmups,median_ms,iqr_ms\n");
        for c in &self.cases {
            let extents: Vec<String> = c.extents.iter().map(|e| e.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.variant,
                c.pool,
                c.scenario,
                extents.join("x"),
                c.dtype,
                c.reps,
                c.warmups,
                c.median_ms,
                c.iqr_ms
            ));
        }
        out
    }

    /// The three cost orderings expected between vanilla, stacked and
    /// multi-kernel pooling. Orderings whose cases are missing are skipped.
    pub fn orderings(&self) -> Vec<OrderingCheck> {
        use PoolVariant::{MultiKernel as M, Stacked as S, Vanilla as V};
        let mut checks = Vec::new();
        let m = |v, s| self.median(v, s);
        if let (Some(v), Some(s), Some(k)) = (
            m(V, Scenario::LayerForward),
            m(S, Scenario::LayerForward),
            m(M, Scenario::LayerForward),
        ) {
            checks.push(OrderingCheck {
                name: "layer-forward: vanilla < stacked < multi".into(),
                holds: v < s && s < k,
                detail: format!("{v:.4} < {s:.4} < {k:.4} ms"),
            });
        }
        if let (Some(v), Some(s), Some(k)) = (m(V, Scenario::NetForward), m(S, Scenario::NetForward), m(M, Scenario::NetForward)) {
            checks.push(OrderingCheck {
                name: "net-forward overhead: stacked - vanilla < multi - vanilla".into(),
                holds: s - v < k - v,
                detail: format!("{:.4} < {:.4} ms", s - v, k - v),
            });
        }
        for variant in [V, S, M] {
            if let (Some(f), Some(b)) = (m(variant, Scenario::NetForward), m(variant, Scenario::NetBackward)) {
                checks.push(OrderingCheck {
                    name: format!("net {variant}: backward > forward"),
                    holds: b > f,
                    detail: format!("{b:.4} > {f:.4} ms"),
                });
            }
        }
        checks
    }

    /// Orderings that held in `baseline` but fail now.
    pub fn regressions(&self, baseline: &BenchReport) -> Vec<OrderingCheck> {
        let before = baseline.orderings();
        self.orderings()
            .into_iter()
            .filter(|now| !now.holds && before.iter().any(|b| b.name == now.name && b.holds))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles() {
        let (m, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((m, iqr), (3.0, 2.0));
        let (m, _) = median_iqr(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(m, 2.5);
    }

    #[test]
    fn degenerate_single_pixel_layer() {
        let cases = bench_pool_layer::<f64>(&default_pools(), 1, 3, 1, 0).unwrap();
        assert_eq!(cases.len(), 3);
        assert!(cases.iter().all(|c| c.median_ms >= 0.0));
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(bench_pool_layer::<f64>(&default_pools(), 8, 0, 1, 0).is_err());
        assert!(bench_network::<f32>(Architecture::BaseS, &default_pools(), 8, 0, 1, 0).is_err());
    }

    #[test]
    fn regression_detection() {
        let mk = |variant, scenario, median_ms| BenchCase {
            variant,
            pool: String::new(),
            scenario,
            extents: vec![1],
            dtype: "f32".into(),
            reps: 30,
            warmups: 5,
            median_ms,
            iqr_ms: 0.0,
        };
        let good = BenchReport {
            protocol: String::new(),
            cases: vec![
                mk(PoolVariant::Vanilla, Scenario::LayerForward, 1.0),
                mk(PoolVariant::Stacked, Scenario::LayerForward, 2.0),
                mk(PoolVariant::MultiKernel, Scenario::LayerForward, 3.0),
            ],
        };
        let mut bad = good.clone();
        bad.cases[1].median_ms = 4.0;
        assert!(good.orderings().iter().all(|c| c.holds));
        assert_eq!(bad.regressions(&good).len(), 1);
        assert!(good.regressions(&bad).is_empty());
    }
}
