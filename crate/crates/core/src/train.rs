//! Training loop on the synthetic dataset.
//!
//! Sample `s` of iteration `i` is synthesized from stream `i·B + s`, so a run
//! resumed from a checkpoint (weights, optimizer moments, step) continues
//! exactly where the original run would have. Per-sample gradients are
//! reduced in slot order, which keeps results independent of the thread
//! count.

use gmflow_tensor::{Graph, Real};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::metrics::{MetricsAccumulator, MetricsReport};
use crate::data::synth::{synth_sample, Sample, SynthConfig};
use crate::error::{FlowError, Result};
use crate::loss::{flow_loss_var, LossConfig};
use crate::model::{forward_graph, gmflow_forward, ForwardOptions, ModelConfig, ModelWeights};
use crate::optim::{adamw_step, clip_grad_norm, AdamState, AdamWConfig};
use crate::params::ParamStore;

/// Held-out samples use streams from here on; training never reaches them.
pub const VALIDATION_STREAM: u64 = 1 << 48;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "GMFLOW_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub gamma: f64,
    /// Weight initialization seed.
    pub seed: u64,
    /// Validation period in iterations; 0 validates only at the end.
    pub val_every: usize,
    pub val_samples: usize,
    pub deterministic: bool,
    /// Leading iterations that supervise the raw matching flow; propagation
    /// joins the forward pass afterwards.
    pub propagation_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: SynthConfig::default(),
            iterations: 2000,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            gamma: crate::loss::DEFAULT_GAMMA,
            seed: 0,
            val_every: 500,
            val_samples: 16,
            deterministic: false,
            propagation_warmup: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 {
            return Err(FlowError::config("batch size must be positive"));
        }
        if !(self.optimizer.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(FlowError::config("learning rate and clipping norm must be positive"));
        }
        crate::backbone::check_image_dims(self.data.height, self.data.width, self.model.image_multiple())
    }

    /// Forward switches used after `iteration` completed iterations.
    pub fn forward_options(&self, iteration: usize) -> ForwardOptions {
        ForwardOptions {
            propagate: iteration >= self.propagation_warmup,
            ..ForwardOptions::default()
        }
    }

    fn threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok());
        let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
        cap.unwrap_or(avail).clamp(1, self.batch_size)
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub weights: ModelWeights<T>,
    pub adam: AdamState<T>,
    /// Completed iterations.
    pub iteration: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let weights = ModelWeights::init(cfg.model, cfg.seed)?;
        let adam = AdamState::new(&weights.params);
        Ok(Self {
            weights,
            adam,
            iteration: 0,
        })
    }
}

/// One validation record of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub epe_all: f64,
    pub s0_10: f64,
    pub s10_40: f64,
    pub s40plus: f64,
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients<T: Real>(
    weights: &ModelWeights<T>,
    sample: &Sample<T>,
    loss_cfg: &LossConfig,
    opts: &ForwardOptions,
) -> Result<(f64, ParamStore<T>)> {
    let mut g = Graph::new();
    let p = weights.params.bind(&mut g, true);
    let f1 = g.constant(sample.images.frame1.clone());
    let f2 = g.constant(sample.images.frame2.clone());
    let out = forward_graph(&mut g, &p, &weights.config, f1, f2, opts)?;
    let loss = flow_loss_var(&mut g, &out.predictions, &sample.flow.data, &sample.valid, loss_cfg)?;
    let value = g.value(loss).item().to_f64().unwrap();
    let mut grads = g.backward(loss)?;
    Ok((value, p.gradients(&mut grads)))
}

fn batch_gradients<T: Real>(
    state: &TrainState<T>,
    cfg: &TrainConfig,
    pool: &rayon::ThreadPool,
) -> Result<(f64, ParamStore<T>)> {
    let loss_cfg = LossConfig { gamma: cfg.gamma };
    let base = (state.iteration * cfg.batch_size) as u64;
    let opts = cfg.forward_options(state.iteration);
    let results: Vec<Result<(f64, ParamStore<T>)>> = pool.install(|| {
        (0..cfg.batch_size)
            .into_par_iter()
            .map(|slot| {
                let sample = synth_sample(&cfg.data, base + slot as u64)?;
                sample_gradients(&state.weights, &sample, &loss_cfg, &opts)
            })
            .collect()
    });
    let mut total = 0.0;
    let mut sum: Option<ParamStore<T>> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (name, g) in grads.iter() {
                    let a = acc.get_mut(name).expect("same parameter set");
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
    }
    let n = cfg.batch_size as f64;
    let mut grads = sum.expect("batch is non-empty");
    let inv = T::lit(1.0 / n);
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok((total / n, grads))
}

/// Drives optimization one iteration at a time.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub state: TrainState<T>,
    pool: rayon::ThreadPool,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig, state: Option<TrainState<T>>) -> Result<Self> {
        cfg.validate()?;
        let state = match state {
            Some(s) => {
                if s.weights.config != cfg.model {
                    return Err(FlowError::config(format!(
                        "checkpoint model {:?} differs from requested {:?}",
                        s.weights.config, cfg.model
                    )));
                }
                s
            }
            None => TrainState::new(&cfg)?,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads())
            .build()
            .map_err(|e| FlowError::config(format!("thread pool: {e}")))?;
        Ok(Self { cfg, state, pool })
    }

    /// Runs one optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let (loss, mut grads) = batch_gradients(&self.state, &self.cfg, &self.pool)?;
        let iteration = self.state.iteration;
        if !loss.is_finite() {
            return Err(FlowError::Diverged { iteration, loss });
        }
        clip_grad_norm(&mut grads, self.cfg.clip_norm);
        adamw_step(
            &mut self.state.weights.params,
            &grads,
            &mut self.state.adam,
            &self.cfg.optimizer,
        )?;
        self.state.iteration += 1;
        Ok(loss)
    }

    pub fn validate(&self, opts: &ForwardOptions) -> Result<MetricsReport> {
        evaluate(&self.state.weights, &self.cfg.data, self.cfg.val_samples, opts)
    }

    /// Trains until `cfg.iterations`, calling `on_record` with the updated
    /// trainer after every validation.
    pub fn run(&mut self, mut on_record: impl FnMut(&Self, &LogRecord) -> Result<()>) -> Result<Vec<LogRecord>> {
        let mut records = Vec::new();
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        while self.state.iteration < self.cfg.iterations {
            loss_sum += self.step()?;
            loss_n += 1;
            let it = self.state.iteration;
            let due = self.cfg.val_every > 0 && it % self.cfg.val_every == 0;
            if due || it == self.cfg.iterations {
                let m = self.validate(&self.cfg.forward_options(it))?;
                let rec = LogRecord {
                    iteration: it,
                    loss: loss_sum / loss_n as f64,
                    epe_all: m.epe_all,
                    s0_10: m.s0_10,
                    s10_40: m.s10_40,
                    s40plus: m.s40plus,
                };
                log::info!(
                    "iteration {it}: loss {:.4}, validation EPE {:.3}",
                    rec.loss,
                    rec.epe_all
                );
                on_record(self, &rec)?;
                records.push(rec);
                (loss_sum, loss_n) = (0.0, 0);
            }
        }
        Ok(records)
    }
}

/// Aggregated metrics over `count` held-out samples of `data`.
pub fn evaluate<T: Real>(
    weights: &ModelWeights<T>,
    data: &SynthConfig,
    count: usize,
    opts: &ForwardOptions,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    for i in 0..count as u64 {
        let s = synth_sample::<T>(data, VALIDATION_STREAM + i)?;
        let out = gmflow_forward(&s.images, weights, opts)?;
        acc.add(&out.flow, &s.flow, Some(&s.occlusion), Some(&s.valid))?;
    }
    acc.report()
}

/// Convenience wrapper: fresh run to completion.
pub fn train(cfg: TrainConfig) -> Result<(TrainState<f32>, Vec<LogRecord>)> {
    let mut t = Trainer::<f32>::new(cfg, None)?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((t.state, log))
}
