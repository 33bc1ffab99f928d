use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, NamedTensor, OptimizerState};
use super::{DiffusionError, Result, ScheduleSpec};
use crate::diffnum::{Array, DType, Scalar, Tape, Var};
use crate::networks::Network;

/// Stream offset separating probe draws from training draws.
const PROBE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub precision: DType,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: Option<f64>,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Items in the fixed probe batch.
    pub probe_size: usize,
    /// Evaluate the probe every this many iterations; 0 evaluates only at
    /// the start and the end.
    pub probe_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            iterations: 1000,
            precision: DType::F32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: None,
            checkpoint_every: 0,
            probe_size: 10,
            probe_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DiffusionError::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moment coefficients must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("EMA decay must lie in [0, 1)");
            }
        }
        if self.probe_size < 1 {
            return bad("probe batch needs at least one item");
        }
        Ok(())
    }
}

/// Training images with optional per-image targets or per-pixel masks.
#[derive(Debug, Clone)]
pub struct TrainSet<F> {
    pub images: Array<F>,
    pub labels: Option<Vec<f64>>,
    pub masks: Option<Array<F>>,
}

/// One minibatch drawn from a [`TrainSet`].
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub x0: Array<F>,
    pub labels: Option<Vec<f64>>,
    pub masks: Option<Array<F>>,
}

impl<F: Scalar> TrainSet<F> {
    pub fn new(images: Array<F>) -> Self {
        TrainSet {
            images,
            labels: None,
            masks: None,
        }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(DiffusionError::InvalidArgument(format!(
                    "{} labels for {n} images",
                    l.len()
                )));
            }
        }
        if let Some(m) = &self.masks {
            if m.shape()[0] != n {
                return Err(DiffusionError::InvalidArgument(format!(
                    "{} masks for {n} images",
                    m.shape()[0]
                )));
            }
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<F>> {
        Ok(Batch {
            x0: self.images.select_batch(indices)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            masks: self
                .masks
                .as_ref()
                .map(|m| m.select_batch(indices))
                .transpose()?,
        })
    }
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array<F>>,
    v: Vec<Array<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[Array<F>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Array<F>], grads: &[Array<F>]) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let c1 = F::from_f64(1.0 - self.beta1);
        let c2 = F::from_f64(1.0 - self.beta2);
        let bc1 = F::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let bc2 = F::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *p = *p - lr * (*m * bc1) / ((*v * bc2).sqrt() + eps);
            }
        }
    }

    fn state(&self, names: &[String], ema: Option<&[Array<F>]>) -> OptimizerState {
        let named = |xs: &[Array<F>]| -> Vec<NamedTensor> {
            names
                .iter()
                .zip(xs)
                .map(|(n, a)| NamedTensor::from_array(n.as_str(), a))
                .collect()
        };
        OptimizerState {
            step: self.step,
            m: named(&self.m),
            v: named(&self.v),
            ema: ema.map(named),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Training minibatch loss at every iteration.
    pub losses: Vec<f64>,
    /// `(iteration, loss)` on the fixed probe batch, first entry at 0.
    pub probe: Vec<(u64, f64)>,
    pub checkpoint: Checkpoint,
}

impl FitReport {
    pub fn initial_probe(&self) -> f64 {
        self.probe.first().map_or(f64::NAN, |p| p.1)
    }

    pub fn final_probe(&self) -> f64 {
        self.probe.last().map_or(f64::NAN, |p| p.1)
    }
}

fn probe_batch<F: Scalar>(data: &TrainSet<F>, cfg: &TrainConfig) -> Result<Batch<F>> {
    let idx: Vec<usize> = (0..cfg.probe_size.min(data.len())).collect();
    data.batch(&idx)
}

fn probe_on<F, N, L>(model: &N, batch: &Batch<F>, cfg: &TrainConfig, loss: &L) -> Result<f64>
where
    F: Scalar,
    N: Network<F>,
    L: for<'t> Fn(&N, &[Var<'t, F>], &Batch<F>, &mut ChaCha8Rng) -> Result<Var<'t, F>>,
{
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROBE_STREAM);
    let l = loss(model, &p, batch, &mut r)?;
    let v = l.value().item()?;
    Ok(v.to_f64().unwrap_or(f64::NAN))
}

/// The loss [`fit`] reports on its fixed probe batch, for `model` as it
/// stands. Reproduces the recorded probe values of a saved run.
pub fn probe_loss<F, N, L>(model: &N, data: &TrainSet<F>, cfg: &TrainConfig, loss: L) -> Result<f64>
where
    F: Scalar,
    N: Network<F>,
    L: for<'t> Fn(&N, &[Var<'t, F>], &Batch<F>, &mut ChaCha8Rng) -> Result<Var<'t, F>>,
{
    probe_on(model, &probe_batch(data, cfg)?, cfg, &loss)
}

/// Runs `cfg.iterations` Adam steps of `loss` over minibatches of `data`.
///
/// The probe batch and its noise draws are fixed for the whole run, so
/// probe losses are comparable across iterations. Every checkpoint passed
/// to `on_checkpoint` also becomes the fallback carried by
/// [`DiffusionError::Diverged`].
pub fn fit<F, N, L, C>(
    model: &mut N,
    data: &TrainSet<F>,
    cfg: &TrainConfig,
    schedule: Option<ScheduleSpec>,
    loss: L,
    mut on_checkpoint: C,
) -> Result<FitReport>
where
    F: Scalar,
    N: Network<F>,
    L: for<'t> Fn(&N, &[Var<'t, F>], &Batch<F>, &mut ChaCha8Rng) -> Result<Var<'t, F>>,
    C: FnMut(&Checkpoint) -> Result<()>,
{
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(DiffusionError::InvalidArgument(
            "training set is empty".into(),
        ));
    }
    if cfg.precision != F::DTYPE {
        return Err(DiffusionError::InvalidArgument(format!(
            "config asks for {} but the model is {}",
            cfg.precision,
            F::DTYPE
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe_batch = probe_batch(data, cfg)?;
    let probe = |model: &N| probe_on(model, &probe_batch, cfg, &loss);

    let names = model.params().names().to_vec();
    let mut adam = Adam::new(
        model.params().values(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut ema: Option<Vec<Array<F>>> = cfg.ema_decay.map(|_| model.params().values().to_vec());
    let snapshot = |model: &N, adam: &Adam<F>, ema: &Option<Vec<Array<F>>>, it: u64| {
        let mut c = Checkpoint::from_network(model, schedule, it, cfg.seed);
        c.optimizer = Some(adam.state(&names, ema.as_deref()));
        c
    };

    let mut last_good = snapshot(model, &adam, &ema, 0);
    let mut sampler = Sampler::new(data.len());
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    let mut probes = vec![(0, probe(model)?)];

    for it in 1..=cfg.iterations {
        let batch = data.batch(&sampler.next(cfg.batch_size, &mut rng))?;
        let (value, grads) = {
            let tape = Tape::new();
            let p = model.params().bind(&tape, true);
            let l = loss(model, &p, &batch, &mut rng)?;
            let value = l.value().item()?.to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                (value, Vec::new())
            } else {
                let mut g = tape.backward(l)?;
                (value, p.iter().map(|&v| g.take(v)).collect::<Vec<_>>())
            }
        };
        if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(DiffusionError::Diverged {
                iteration: it,
                loss: value,
                last_good: Box::new(last_good),
            });
        }
        adam.update(model.params_mut().values_mut(), &grads);
        if let (Some(avg), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
            let (d, c) = (F::from_f64(d), F::from_f64(1.0 - d));
            for (a, p) in avg.iter_mut().zip(model.params().values()) {
                for (a, &p) in a.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + c * p;
                }
            }
        }
        losses.push(value);
        if cfg.probe_every > 0 && it % cfg.probe_every == 0 && it != cfg.iterations {
            probes.push((it, probe(model)?));
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            last_good = snapshot(model, &adam, &ema, it);
            on_checkpoint(&last_good)?;
        }
    }
    probes.push((cfg.iterations, probe(model)?));
    Ok(FitReport {
        losses,
        probe: probes,
        checkpoint: snapshot(model, &adam, &ema, cfg.iterations),
    })
}
