//! The five crowd-counting architectures (Base-S/M/L, Wide, Deep) with a
//! pluggable pooling variant at every pooling site.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::{self, PoolSpec};
use crate::seed;
use crate::tensor::{conv2d, relu, Element, Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    BaseS,
    BaseM,
    BaseL,
    Wide,
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv { kernel: usize, channels: usize },
    Pool,
}

const fn conv(kernel: usize, channels: usize) -> Layer {
    Layer::Conv { kernel, channels }
}

const POOL: Layer = Layer::Pool;

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::BaseS,
        Architecture::BaseM,
        Architecture::BaseL,
        Architecture::Wide,
        Architecture::Deep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::BaseS => "base_s",
            Architecture::BaseM => "base_m",
            Architecture::BaseL => "base_l",
            Architecture::Wide => "wide",
            Architecture::Deep => "deep",
        }
    }

    /// Layer sequence, input to output.
    pub fn layers(self) -> Vec<Layer> {
        match self {
            Architecture::BaseS => vec![conv(5, 24), POOL, conv(3, 48), POOL, conv(3, 24), conv(3, 12), conv(1, 1)],
            Architecture::BaseM => vec![conv(7, 20), POOL, conv(5, 40), POOL, conv(5, 20), conv(5, 10), conv(1, 1)],
            Architecture::BaseL => vec![conv(9, 16), POOL, conv(7, 32), POOL, conv(7, 16), conv(7, 8), conv(1, 1)],
            Architecture::Wide => vec![conv(7, 128), POOL, conv(5, 256), POOL, conv(5, 128), conv(5, 64), conv(1, 1)],
            Architecture::Deep => vec![
                conv(5, 64),
                conv(5, 64),
                POOL,
                conv(5, 128),
                conv(5, 128),
                POOL,
                conv(3, 256),
                conv(3, 256),
                POOL,
                conv(3, 128),
                conv(3, 64),
                conv(3, 32),
                conv(3, 16),
                conv(1, 1),
            ],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let norm = text.trim().to_ascii_lowercase().replace('-', "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown network `{text}` (expected base_s, base_m, base_l, wide or deep)"
                ))
            })
    }
}

/// Declarative network description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub arch: Architecture,
    pub pool: PoolSpec,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Apply ReLU after the final 1×1 density head as well.
    #[serde(default)]
    pub output_relu: bool,
}

fn default_input_channels() -> usize {
    1
}

impl NetworkConfig {
    pub fn new(arch: Architecture, pool: PoolSpec) -> Self {
        NetworkConfig {
            arch,
            pool,
            input_channels: 1,
            output_relu: false,
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        self.arch.layers()
    }

    pub fn pool_sites(&self) -> usize {
        self.layers().iter().filter(|l| **l == Layer::Pool).count()
    }

    pub fn conv_count(&self) -> usize {
        self.layers().len() - self.pool_sites()
    }

    /// Total spatial down-sampling from input to density map.
    pub fn downsampling(&self) -> usize {
        self.pool.stride().pow(self.pool_sites() as u32)
    }

    /// `(name, shape)` of every parameter tensor in layer order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut in_ch = self.input_channels;
        let mut index = 0;
        for layer in self.layers() {
            if let Layer::Conv { kernel, channels } = layer {
                shapes.push((format!("conv{index}.weight"), vec![channels, in_ch, kernel, kernel]));
                shapes.push((format!("conv{index}.bias"), vec![channels]));
                in_ch = channels;
                index += 1;
            }
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Element = f64> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Element = f64> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    trainable: bool,
}

/// Output of [`Network::forward_traced`].
#[derive(Clone, Debug)]
pub struct Trace<T: Element = f64> {
    pub output: Tensor<T>,
    /// Feature maps right after each pooling site, in order.
    pub pooled: Vec<Tensor<T>>,
}

enum Event<'a, T: Element> {
    PreActivation(&'a Tensor<T>),
    PoolInput(&'a Tensor<T>),
    Pooled(&'a Tensor<T>),
}

impl<T: Element> Network<T> {
    /// Instantiates `config` with He-normal conv weights (std `sqrt(2/fan_in)`)
    /// and zero biases, drawn from a stream derived from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = seed::stream(seed, "network-init");
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
                } else {
                    vec![T::zero(); len]
                };
                Param {
                    name,
                    tensor: Tensor::from_vec(&shape, data).expect("shape from config"),
                }
            })
            .collect();
        Network {
            config,
            params,
            trainable: false,
        }
    }

    /// Rebuilds a network from named tensors, checking every shape against
    /// `config`.
    pub fn from_parameters(config: NetworkConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = config.parameter_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::shape(format!(
                "{} expects {} parameter tensors, got {}",
                config.arch,
                expected.len(),
                tensors.len()
            )));
        }
        let params = expected
            .into_iter()
            .zip(tensors)
            .map(|((name, shape), (got_name, tensor))| {
                if name != got_name || tensor.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                        tensor.shape()
                    )));
                }
                Ok(Param {
                    name,
                    tensor: tensor.detach(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Network {
            config,
            params,
            trainable: false,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Toggles whether forward passes record gradients for the parameters.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        for p in &mut self.params {
            p.tensor = p.tensor.with_requires_grad(trainable);
        }
    }

    /// Replaces the values of parameter `index`.
    pub fn set_parameter(&mut self, index: usize, data: Vec<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("no parameter at index {index}")))?;
        let tensor = Tensor::from_vec(p.tensor.shape(), data)?;
        p.tensor = tensor.with_requires_grad(self.trainable);
        Ok(())
    }

    /// Zeroes the final 1×1 head so the untrained network predicts 0.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for i in [n - 2, n - 1] {
            let len = self.params[i].tensor.numel();
            self.set_parameter(i, vec![T::zero(); len]).expect("same length");
        }
    }

    /// Same architecture and weights with a different pooling variant.
    pub fn with_pool(&self, pool: PoolSpec) -> Self {
        let mut net = self.clone();
        net.config.pool = pool;
        net
    }

    /// Element-type conversion of every parameter.
    pub fn cast<U: Element>(&self) -> Network<U> {
        let mut net = Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            trainable: false,
        };
        net.set_trainable(self.trainable);
        net
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "{} expects {} input channel(s), image has {c}",
                self.config.arch, self.config.input_channels
            )));
        }
        let f = self.config.downsampling();
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "image extents {h}x{w} are not divisible by the down-sampling factor {f}"
            )));
        }
        Ok(())
    }

    fn run(&self, image: &Tensor<T>, mut observe: impl FnMut(Event<'_, T>)) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let layers = self.config.layers();
        let last_conv = layers.iter().rposition(|l| matches!(l, Layer::Conv { .. }));
        let mut x = image.clone();
        let mut params = self.params.chunks_exact(2);
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Conv { .. } => {
                    let [w, b] = params.next().expect("two tensors per conv") else {
                        unreachable!()
                    };
                    let pre = conv2d(&x, &w.tensor, &b.tensor, Padding::Same)?;
                    if Some(i) == last_conv && !self.config.output_relu {
                        x = pre;
                    } else {
                        observe(Event::PreActivation(&pre));
                        x = relu(&pre);
                    }
                }
                Layer::Pool => {
                    observe(Event::PoolInput(&x));
                    x = pooling::pool(&x, &self.config.pool)?;
                    observe(Event::Pooled(&x));
                }
            }
        }
        Ok(x)
    }

    /// Density map of `image` (NCHW, extents divisible by
    /// [`NetworkConfig::downsampling`]).
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(image, |_| {})
    }

    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<Trace<T>> {
        let mut pooled = Vec::new();
        let output = self.run(image, |e| {
            if let Event::Pooled(t) = e {
                pooled.push(t.clone());
            }
        })?;
        Ok(Trace { output, pooled })
    }

    /// Digest of every piecewise-linear branch decision (ReLU signs and
    /// pooling argmaxes) taken on `image`. Within a region of constant
    /// signature the network is smooth in its inputs and parameters.
    pub fn activation_signature(&self, image: &Tensor<T>) -> Result<u64> {
        let mut hasher = DefaultHasher::new();
        let mut failure = None;
        let spec = self.config.pool.clone();
        self.run(image, |e| match e {
            Event::PreActivation(t) => {
                let bits: Vec<bool> = t.data().iter().map(|v| *v > T::zero()).collect();
                bits.hash(&mut hasher);
            }
            Event::PoolInput(t) => {
                if let Err(err) = pooling::hash_routing(t, &spec, &mut hasher) {
                    failure = Some(err);
                }
            }
            Event::Pooled(_) => {}
        })?;
        match failure {
            Some(err) => Err(err),
            None => Ok(hasher.finish()),
        }
    }
}

/// People count per batch item: the mass of a single-channel density map,
/// multiplied by `rescale` (the squared down-sampling factor when the map
/// holds per-pixel densities averaged over blocks; 1 for block sums).
pub fn predicted_count<T: Element>(density_map: &Tensor<T>, rescale: f64) -> Result<Vec<f64>> {
    let (n, c, h, w) = density_map.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "density map must have one channel, got {c}"
        )));
    }
    Ok(density_map
        .data()
        .chunks_exact(h * w)
        .take(n)
        .map(|plane| plane.iter().map(|v| v.as_f64()).sum::<f64>() * rescale)
        .collect())
}
