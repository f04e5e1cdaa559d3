//! Fine-tuning loop: name-based freezing, AdamW with a cosine schedule,
//! cross-entropy on CLS logits, and top-1 evaluation.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{vit_forward, Model, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Parallel forward/backward workers within a batch; 1 = single-threaded.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "train.lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(
                "train.beta1 and train.beta2 must lie in [0, 1)",
            ));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("train.workers must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub seconds: f64,
    /// Sum over samples and layers of tokens leaving each layer.
    pub tokens: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

/// Whether a parameter name is trainable under the freezing rule.
pub fn is_trainable_name(name: &str) -> bool {
    name.contains("adapter") || name.contains("head")
}

/// Marks exactly the parameters whose name contains "adapter" or "head"
/// as trainable and returns their element count.
pub fn freeze_parameters<T: Scalar>(params: &mut ParamStore<T>) -> usize {
    for (name, t) in params.iter_mut() {
        t.set_requires_grad(is_trainable_name(name));
    }
    params.trainable_count()
}

/// `base · ½(1 + cos(π·t/(T−1)))`; a single-step run stays at `base`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// AdamW with decoupled weight decay, state kept per parameter index.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig, num_params: usize) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor that holds a gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        let decay = T::from_f64_lossy(1.0 - lr * self.weight_decay);
        for i in 0..params.len() {
            let (_, t) = params.get_index_mut(i).expect("index in range");
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.take_grad() else { continue };
            let n = grad.len();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            let data = t.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                data[j] = data[j] * decay - step_size * m[j] / denom;
            }
        }
    }
}

/// Result of one sample's forward (and optionally backward) pass.
struct SampleResult<T> {
    loss: f64,
    correct: bool,
    tokens: u64,
    /// `(param index, gradient)` for trainable parameters.
    grads: Vec<(usize, Vec<T>)>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn run_sample<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    label: usize,
    backward: bool,
) -> Result<SampleResult<T>> {
    let mut g = Graph::new();
    let out = vit_forward(&mut g, model, image)?;
    let logits = g.value(out.logits).to_vec();
    let correct = argmax(&logits) == label;
    let tokens = out.state.token_counts.iter().map(|&c| c as u64).sum();
    let loss_var = g.cross_entropy(out.logits, label)?;
    let loss = g.value(loss_var)[0].as_f64();
    let mut grads = Vec::new();
    if backward && loss.is_finite() {
        g.backward(loss_var)?;
        grads = out
            .state
            .binding
            .gradients(&g)
            .into_iter()
            .map(|(i, gr)| (i, gr.to_vec()))
            .collect();
    }
    Ok(SampleResult {
        loss,
        correct,
        tokens,
        grads,
    })
}

fn run_batch<T: Scalar>(
    model: &Model<T>,
    images: &[&Tensor<T>],
    labels: &[usize],
    backward: bool,
    workers: usize,
) -> Result<Vec<SampleResult<T>>> {
    if workers > 1 && images.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;
        pool.install(|| {
            images
                .par_iter()
                .zip(labels.par_iter())
                .map(|(img, &l)| run_sample(model, img, l, backward))
                .collect()
        })
    } else {
        images
            .iter()
            .zip(labels)
            .map(|(img, &l)| run_sample(model, img, l, backward))
            .collect()
    }
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
    pub tokens: u64,
    pub lr: f64,
}

/// Optimizer state plus the step counter driving the schedule.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    pub total_steps: usize,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// `total_steps` drives the cosine schedule; pass
    /// `epochs · ⌈samples / batch⌉` for a full run.
    pub fn new(config: TrainConfig, model: &Model<T>, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: AdamW::new(&config, model.params.len()),
            config,
            total_steps: total_steps.max(1),
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.step, self.total_steps)
    }

    /// Mean cross-entropy over the batch, backward, one AdamW update.
    /// Gradients are summed in sample order, so the result does not depend
    /// on the worker count.
    pub fn train_step(
        &mut self,
        model: &mut Model<T>,
        images: &[&Tensor<T>],
        labels: &[usize],
    ) -> Result<StepStats> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Contract(format!(
                "batch needs matching non-empty images and labels, got {} and {}",
                images.len(),
                labels.len()
            )));
        }
        let lr = self.current_lr();
        let results = run_batch(model, images, labels, true, self.config.workers)?;
        let n = results.len();
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            let per_sample: Vec<String> =
                results.iter().map(|r| format!("{:.4e}", r.loss)).collect();
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("lr {lr:.3e}, per-sample losses [{}]", per_sample.join(", ")),
            });
        }
        let inv = T::one() / T::from_usize_lossy(n);
        let mut accum: Vec<Option<Vec<T>>> = vec![None; model.params.len()];
        for r in &results {
            for (i, g) in &r.grads {
                let slot = accum[*i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (a, b) in slot.iter_mut().zip(g) {
                    *a += *b * inv;
                }
            }
        }
        for (i, g) in accum.into_iter().enumerate() {
            if let Some(g) = g {
                let (_, t) = model.params.get_index_mut(i).expect("index in range");
                t.accumulate_grad(&g)?;
            }
        }
        self.optimizer.update(&mut model.params, lr);
        self.step += 1;
        Ok(StepStats {
            loss,
            correct: results.iter().filter(|r| r.correct).count(),
            samples: n,
            tokens: results.iter().map(|r| r.tokens).sum(),
            lr,
        })
    }

    /// One pass over `train` in a seeded per-epoch order.
    pub fn train_epoch(
        &mut self,
        model: &mut Model<T>,
        train: &Dataset<T>,
        epoch: usize,
    ) -> Result<(f64, f64, u64)> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut tokens) = (0.0, 0usize, 0u64);
        for chunk in order.chunks(self.config.batch_size) {
            let images: Vec<&Tensor<T>> = chunk.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let s = self.train_step(model, &images, &labels)?;
            loss_sum += s.loss * s.samples as f64;
            correct += s.correct;
            tokens += s.tokens;
        }
        let n = train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n, tokens))
    }
}

/// Steps needed for `epochs` passes over `samples` at `batch` per step.
pub fn total_steps(epochs: usize, samples: usize, batch: usize) -> usize {
    epochs * samples.div_ceil(batch.max(1))
}

/// Full run: freezes, trains for `config.epochs`, evaluates after each
/// epoch and reports every epoch through `on_epoch`.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    config: &TrainConfig,
    train: &Dataset<T>,
    eval: &Dataset<T>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Metrics> {
    config.validate()?;
    freeze_parameters(&mut model.params);
    let steps = total_steps(config.epochs, train.len(), config.batch_size);
    let mut trainer = Trainer::new(config.clone(), model, steps)?;
    let mut metrics = Metrics::default();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let (loss, train_acc, tokens) = trainer.train_epoch(model, train, epoch)?;
        let seconds = start.elapsed().as_secs_f64();
        let eval_acc = if eval.is_empty() {
            f64::NAN
        } else {
            evaluate_with(model, eval, config.batch_size, config.workers)?
        };
        let m = EpochMetrics {
            epoch,
            loss,
            train_acc,
            eval_acc,
            seconds,
            tokens,
        };
        log::info!(
            "epoch {epoch}: loss {loss:.4} train_acc {train_acc:.4} eval_acc {eval_acc:.4} ({seconds:.2}s)"
        );
        on_epoch(&m)?;
        metrics.epochs.push(m);
    }
    Ok(metrics)
}

/// Top-1 accuracy, single-threaded.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    evaluate_with(model, data, 1, 1)
}

/// Top-1 accuracy; batch size and worker count do not affect the result.
pub fn evaluate_with<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    batch_size: usize,
    workers: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images: Vec<&Tensor<T>> = chunk.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        correct += run_batch(model, &images, &labels, false, workers)?
            .iter()
            .filter(|r| r.correct)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Predicted class of every sample.
pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<Vec<usize>> {
    data.images
        .iter()
        .map(|img| {
            let mut g = Graph::new();
            let out = vit_forward(&mut g, model, img)?;
            Ok(argmax(g.value(out.logits)))
        })
        .collect()
}

/// Order-sensitive FNV-1a checksum over the bytes of every frozen tensor.
pub fn frozen_checksum<T: Scalar>(params: &ParamStore<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in params.iter().filter(|(_, t)| !t.requires_grad()) {
        for b in name
            .bytes()
            .chain(t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()))
        {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
