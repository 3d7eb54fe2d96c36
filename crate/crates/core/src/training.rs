//! Losses, Adam, the staged learning-rate schedule and the training loop.

use std::fmt::Write as _;
use std::io;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stream_rng, NoiseMode, PatchDataset, TrainingPair};
use crate::layers::ParamSet;
use crate::model::Mwdcnn;
use crate::tensor::{Element, Graph, Result as TensorResult, Tensor, TensorError, Var};

const DOMAIN_SHUFFLE: u64 = 4;

pub const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error("non-finite loss {loss} at iteration {iter} (epoch {epoch})")]
    NonFinite { iter: usize, epoch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Observer(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Charbonnier,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "charbonnier" => Ok(LossKind::Charbonnier),
            other => Err(format!("unknown loss {other:?}; expected mse or charbonnier")),
        }
    }
}

/// Divisor of the squared-error loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `1/(2n) * sum ||f - y||^2` over the n images of the batch.
    #[default]
    PerImage,
    /// Plain mean of squared residuals over every element.
    PerPixel,
}

/// `1/(2n) * sum (pred - target)^2` where `n` is the image count.
pub fn mse_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var, n: usize) -> TensorResult<Var> {
    if n == 0 {
        return Err(TensorError::Invalid("mse_loss: image count must be positive".into()));
    }
    g.squared_error(pred, target, T::lit(0.5 / n as f64))
}

/// Mean over elements of `sqrt((pred - target)^2 + eps^2)`.
pub fn charbonnier_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var, eps: f64) -> TensorResult<Var> {
    g.charbonnier(pred, target, T::lit(eps))
}

/// Loss node for a batch of `pred` against `target`.
pub fn batch_loss<T: Element>(
    g: &mut Graph<T>,
    kind: LossKind,
    normalization: Normalization,
    pred: Var,
    target: Var,
) -> TensorResult<Var> {
    match (kind, normalization) {
        (LossKind::Charbonnier, _) => charbonnier_loss(g, pred, target, CHARBONNIER_EPS),
        (LossKind::Mse, Normalization::PerImage) => {
            let n = g.shape(pred).first().copied().unwrap_or(1);
            mse_loss(g, pred, target, n)
        }
        (LossKind::Mse, Normalization::PerPixel) => {
            let numel: usize = g.shape(pred).iter().product();
            g.squared_error(pred, target, T::lit(1.0 / numel as f64))
        }
    }
}

/// Adam moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self::with_shapes(params.tensors().iter().map(|t| t.shape().to_vec()))
    }

    pub fn with_shapes(shapes: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self { v: m.clone(), m, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Invalid(format!(
                "adam: {} moments, {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                *pj = T::lit(pj.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `stages[i] = (last_epoch, lr)`, with
/// `last_epoch` strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stages: Vec<(usize, f64)>,
}

impl LrSchedule {
    /// 1e-4 for epochs 1-30, 1e-5 for 31-60, 1e-6 for 61-90.
    pub fn paper() -> Self {
        Self { stages: vec![(30, 1e-4), (60, 1e-5), (90, 1e-6)] }
    }

    pub fn constant(lr: f64, epochs: usize) -> Self {
        Self { stages: vec![(epochs, lr)] }
    }

    pub fn last_epoch(&self) -> usize {
        self.stages.last().map_or(0, |s| s.0)
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> Result<f64, TrainError> {
        if epoch == 0 {
            return Err(TrainError::Plan("epochs are numbered from 1".into()));
        }
        self.stages.iter().find(|(last, _)| epoch <= *last).map(|s| s.1).ok_or_else(|| {
            TrainError::Plan(format!("epoch {epoch} is past the schedule's last epoch {}", self.last_epoch()))
        })
    }

    fn validate(&self) -> Result<(), TrainError> {
        let mut prev = 0;
        for &(last, lr) in &self.stages {
            if last <= prev {
                return Err(TrainError::Plan("schedule epochs must be strictly increasing".into()));
            }
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(TrainError::Plan(format!("learning rate {lr} is not a finite non-negative number")));
            }
            prev = last;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub loss: LossKind,
    pub normalization: Normalization,
    pub seed: u64,
    pub noise: NoiseMode,
    /// Stop after this many iterations even if epochs remain.
    pub max_iterations: Option<usize>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 90,
            schedule: LrSchedule::paper(),
            loss: LossKind::Mse,
            normalization: Normalization::PerImage,
            seed: 0,
            noise: NoiseMode::Fixed(25.0),
            max_iterations: None,
        }
    }
}

impl TrainPlan {
    pub fn lr_for_epoch(&self, epoch: usize) -> Result<f64, TrainError> {
        if epoch > self.epochs {
            return Err(TrainError::Plan(format!("epoch {epoch} exceeds the plan's {} epochs", self.epochs)));
        }
        self.schedule.lr_for_epoch(epoch)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Plan("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Plan("epochs must be at least 1".into()));
        }
        self.schedule.validate()?;
        if self.schedule.last_epoch() < self.epochs {
            return Err(TrainError::Plan(format!(
                "schedule covers {} epochs, plan runs {}",
                self.schedule.last_epoch(),
                self.epochs
            )));
        }
        match self.noise {
            NoiseMode::Fixed(s) if !(s.is_finite() && s >= 0.0) => {
                Err(TrainError::Plan(format!("sigma {s} must be >= 0")))
            }
            NoiseMode::Blind { min, max } if !(min >= 0.0 && max >= min && max.is_finite()) => {
                Err(TrainError::Plan(format!("blind range [{min}, {max}] is invalid")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const LOG_HEADER: &str = "iter,epoch,lr,loss";

impl IterRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{}", self.iter, self.epoch, self.lr, self.loss)
    }
}

pub fn log_csv(records: &[IterRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Hooks called by [`train`]; errors abort the run.
pub trait TrainObserver<T: Element> {
    fn on_iteration(&mut self, _record: &IterRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _model: &Mwdcnn<T>, _adam: &AdamState<T>) -> Result<(), TrainError> {
        Ok(())
    }
}

impl<T: Element> TrainObserver<T> for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary<T: Element> {
    pub records: Vec<IterRecord>,
    pub adam: AdamState<T>,
}

/// Clean and noisy batches for the given patch indices.
pub fn assemble_batch<T: Element>(dataset: &PatchDataset, indices: &[usize]) -> TensorResult<(Tensor<T>, Tensor<T>)> {
    #[cfg(feature = "parallel")]
    let pairs: Vec<TrainingPair<T>> = {
        use rayon::prelude::*;
        indices.par_iter().map(|&i| dataset.pair(i)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let pairs: Vec<TrainingPair<T>> = indices.iter().map(|&i| dataset.pair(i)).collect();

    let clean: Vec<_> = pairs.iter().map(|p| p.clean.clone()).collect();
    let noisy: Vec<_> = pairs.into_iter().map(|p| p.noisy).collect();
    Ok((Tensor::stack(&clean)?, Tensor::stack(&noisy)?))
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads<T: Element>(
    model: &Mwdcnn<T>,
    plan: &TrainPlan,
    clean: Tensor<T>,
    noisy: Tensor<T>,
) -> TensorResult<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let x = g.constant(noisy);
    let y = g.constant(clean);
    let out = model.forward(&mut g, &p, x)?;
    let loss = batch_loss(&mut g, plan.loss, plan.normalization, out, y)?;
    let value = g.value(loss).data()[0].as_f64();
    g.backward(loss)?;
    let grads = p.iter().map(|&v| g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))).collect();
    Ok((value, grads))
}

/// Mini-batch Adam over `dataset`, reshuffled each epoch from the plan seed.
/// A trailing partial batch is kept. Resumes from `adam` when given.
pub fn train<T: Element, O: TrainObserver<T>>(
    plan: &TrainPlan,
    model: &mut Mwdcnn<T>,
    dataset: &PatchDataset,
    adam: Option<AdamState<T>>,
    observer: &mut O,
) -> Result<TrainSummary<T>, TrainError> {
    plan.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Plan("dataset is empty".into()));
    }
    if dataset.channels() != model.config().in_channels {
        return Err(TrainError::Plan(format!(
            "dataset has {} channels, model expects {}",
            dataset.channels(),
            model.config().in_channels
        )));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(model.params()));
    let mut records = Vec::new();
    let limit = plan.max_iterations.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    'epochs: for epoch in 1..=plan.epochs {
        let lr = plan.lr_for_epoch(epoch)?;
        order.sort_unstable();
        order.shuffle(&mut stream_rng(plan.seed, DOMAIN_SHUFFLE, epoch as u64));
        for chunk in order.chunks(plan.batch_size) {
            if records.len() >= limit {
                break 'epochs;
            }
            let (clean, noisy) = assemble_batch::<T>(dataset, chunk)?;
            let (loss, grads) = loss_and_grads(model, plan, clean, noisy)?;
            let record = IterRecord { iter: records.len() + 1, epoch, lr, loss };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { iter: record.iter, epoch, loss });
            }
            adam.step(model.params_mut().tensors_mut(), &grads, lr)?;
            observer.on_iteration(&record)?;
            records.push(record);
        }
        observer.on_epoch_end(epoch, model, &adam)?;
    }
    Ok(TrainSummary { records, adam })
}
