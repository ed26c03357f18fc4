//! Adam optimizer, the epoch loop with periodic validation and best-model
//! selection, and learning-curve smoothing.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::CrowdSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_counts, mae_mse};
use crate::networks::{predicted_count, Network};
use crate::seed;
use crate::tensor::{mse_loss, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[(String, usize)]) -> Self {
        AdamState {
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, len)| vec![0.0; *len]).collect(),
            v: params.iter().map(|(_, len)| vec![0.0; *len]).collect(),
        }
    }

    pub fn for_network(net: &Network) -> Self {
        let shapes: Vec<(String, usize)> = net
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.numel()))
            .collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update of `params` in place. Every gradient is
/// checked before anything is modified, so a rejected step leaves both the
/// parameters and the state untouched.
pub fn adam_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam state tracks {} parameters, got {} values and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != state.m[i].len() || g.len() != p.len() {
            return Err(Error::shape(format!(
                "parameter `{}`: {} values, {} gradients, state {}",
                state.names[i],
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(state.names[i].clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub validate_every: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 1,
            validate_every: 2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::invalid("epochs, batch_size and validate_every must all be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
}

/// EMA factor for smoothed learning curves.
pub const CURVE_ALPHA: f64 = 0.1;

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_mae,val_mae\n");
        for r in &self.records {
            let val = r.val_mae.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.train_mae, val));
        }
        out
    }

    /// EMA-smoothed train and validation MAE curves; the validation curve
    /// only has points at validated epochs.
    pub fn smoothed_csv(&self, alpha: f64) -> Result<String> {
        let train = ema_smooth(&self.records.iter().map(|r| r.train_mae).collect::<Vec<_>>(), alpha)?;
        let validated: Vec<&EpochRecord> = self.records.iter().filter(|r| r.val_mae.is_some()).collect();
        let val = ema_smooth(&validated.iter().filter_map(|r| r.val_mae).collect::<Vec<_>>(), alpha)?;
        let mut out = String::from("epoch,train_mae_ema,val_mae_ema\n");
        let mut vi = 0;
        for (r, t) in self.records.iter().zip(train) {
            let v = if r.val_mae.is_some() {
                vi += 1;
                val[vi - 1].to_string()
            } else {
                String::new()
            };
            out.push_str(&format!("{},{},{}\n", r.epoch, t, v));
        }
        Ok(out)
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            epochs: self.records.len(),
            best_epoch: self.best_epoch,
            best_val_mae: self.best_val_mae,
            initial_train_loss: self.records.first().map(|r| r.train_loss),
            final_train_loss: self.records.last().map(|r| r.train_loss),
            final_train_mae: self.records.last().map(|r| r.train_mae),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_train_mae: Option<f64>,
}

/// Training failure together with the log up to the failing epoch.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub log: TrainLog,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} completed epochs)", self.error, self.log.records.len())
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainAbort> for Error {
    fn from(abort: TrainAbort) -> Self {
        abort.error
    }
}

pub enum TrainEvent<'a> {
    Epoch(&'a EpochRecord),
    /// A new best validation MAE; `net` holds the weights that achieved it.
    NewBest { net: &'a Network, epoch: usize, val_mae: f64 },
}

pub struct TrainOutcome {
    /// Weights with the lowest validation MAE (first on ties), or the final
    /// weights when there is no validation set.
    pub best: Network,
    pub last: Network,
    pub log: TrainLog,
}

struct Example {
    input: Tensor,
    target: Tensor,
    count: f64,
}

fn prepare(samples: &[CrowdSample], factor: usize) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let s = s.fit_to_multiple(factor)?;
            Ok(Example {
                input: s.network_input(),
                target: s.density_target(factor)?,
                count: s.count() as f64,
            })
        })
        .collect()
}

fn frozen(net: &Network) -> Network {
    let mut n = net.clone();
    n.set_trainable(false);
    n
}

pub fn train(net: Network, train_set: &[CrowdSample], validation: &[CrowdSample], config: &TrainConfig) -> Result<TrainOutcome, TrainAbort> {
    train_with(net, train_set, validation, config, |_| {})
}

/// Trains with pixel-wise MSE between predicted and block-summed target
/// density maps.
///
/// Each epoch visits the training set in a fresh order drawn from the run
/// seed; gradients are averaged over `batch_size` consecutive samples before
/// each Adam step. Validation runs every `validate_every` epochs and after
/// the last epoch.
pub fn train_with(
    mut net: Network,
    train_set: &[CrowdSample],
    validation: &[CrowdSample],
    config: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome, TrainAbort> {
    let mut log = TrainLog::default();
    macro_rules! bail {
        ($e:expr) => {
            return Err(TrainAbort { error: $e, log })
        };
    }
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => bail!(e),
            }
        };
    }
    attempt!(config.validate());
    if train_set.is_empty() {
        bail!(Error::invalid("training set is empty"));
    }
    let factor = net.config().downsampling();
    let examples = attempt!(prepare(train_set, factor));
    net.set_trainable(true);
    let mut state = AdamState::for_network(&net);
    let mut values: Vec<Vec<f64>> = net.parameters().iter().map(|p| p.tensor.data().to_vec()).collect();
    let mut rng = seed::stream(config.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(Network, usize, f64)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut pairs = Vec::with_capacity(examples.len());
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
            for &i in batch {
                let ex = &examples[i];
                let out = attempt!(net.forward(&ex.input));
                let loss = attempt!(mse_loss(&out, &ex.target));
                let l = loss.data()[0];
                if !l.is_finite() {
                    bail!(Error::Diverged { epoch, loss: l });
                }
                loss_sum += l;
                pairs.push((attempt!(predicted_count(&out, 1.0))[0], ex.count));
                let grads = attempt!(loss.backward());
                for (a, p) in acc.iter_mut().zip(net.parameters()) {
                    if let Some(g) = grads.get(&p.tensor) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for x in a.iter_mut() {
                    *x *= inv;
                }
            }
            attempt!(adam_step(&mut values, &acc, &mut state, &config.adam));
            for (i, v) in values.iter().enumerate() {
                attempt!(net.set_parameter(i, v.clone()));
            }
        }
        let train_loss = loss_sum / examples.len() as f64;
        let train_mae = attempt!(mae_mse(&pairs)).0;
        let val_mae = if !validation.is_empty() && (epoch % config.validate_every == 0 || epoch == config.epochs) {
            Some(attempt!(evaluate_counts(&frozen(&net), validation)).mae)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            train_mae,
            val_mae,
        };
        log.records.push(record);
        on_event(TrainEvent::Epoch(&record));
        if let Some(mae) = val_mae {
            if !mae.is_finite() {
                bail!(Error::Diverged { epoch, loss: train_loss });
            }
            if best.as_ref().is_none_or(|(_, _, b)| mae < *b) {
                let snapshot = frozen(&net);
                on_event(TrainEvent::NewBest {
                    net: &snapshot,
                    epoch,
                    val_mae: mae,
                });
                log.best_epoch = Some(epoch);
                log.best_val_mae = Some(mae);
                best = Some((snapshot, epoch, mae));
            }
        }
    }
    let last = frozen(&net);
    let best = best.map(|(n, _, _)| n).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, log })
}

/// Exponential moving average: `y_0 = x_0`, `y_t = α·x_t + (1−α)·y_{t−1}`.
pub fn ema_smooth(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("EMA factor must lie in (0, 1], got {alpha}")));
    }
    let mut out = Vec::with_capacity(series.len());
    for (t, &x) in series.iter().enumerate() {
        let y = if t == 0 { x } else { alpha * x + (1.0 - alpha) * out[t - 1] };
        out.push(y);
    }
    Ok(out)
}
