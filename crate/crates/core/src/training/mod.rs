//! Loss, optimization loop, learning-rate schedule and run history.
//!
//! Training minimizes the rollout loss: the mean over all predicted frames
//! of the per-frame MSE between the decoded field at the sensors and the
//! target values. Validation tracks mean relative L2 over the rollout,
//! which is also the model-selection metric.

use ndarray::{s, Array2, Array3, Array4, ArrayD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{bundle_frames, BundledSample, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::evaluation::relative_l2;
use crate::geometry::SensorSet;
use crate::model::{DeepOnet, FieldPrediction, GraphDeepONet, GraphInput};
use crate::nn::{clip_grad_norm, grad_norm, Adam, Scalar};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplicative step decay factor.
    pub lr_decay_factor: f64,
    /// Decay period in epochs; `None` means a quarter of the total epochs.
    pub lr_decay_every: Option<usize>,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 16,
            epochs: 40,
            lr_decay_factor: 0.8,
            lr_decay_every: None,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("lr_decay_factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect at a given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let every = self.lr_decay_every.unwrap_or((self.epochs / 4).max(1)).max(1);
        self.lr * self.lr_decay_factor.powi((epoch / every) as i32)
    }
}

/// Tensor-packed bundled dataset ready for batching.
///
/// `inputs[i]` is `[N, K*C]` (frame-major columns), `targets[i]` is
/// `[R*K, N*C]` (channel-fastest columns).
#[derive(Debug, Clone)]
pub struct PackedDataset<F: Scalar> {
    pub inputs: Array3<F>,
    pub targets: Array3<F>,
    pub target_times: Vec<f64>,
    pub sensors: SensorSet,
    pub dt: f64,
    pub k: usize,
    pub r_blocks: usize,
    pub channels: usize,
}

impl<F: Scalar> PackedDataset<F> {
    pub fn from_dataset(ds: &TrajectoryDataset, k: usize) -> Result<Self> {
        let (samples, info) = bundle_frames(ds, k)?;
        let n = ds.n_sensors();
        let c = ds.channels();
        let rk = info.r_blocks * k;
        let mut inputs = Array3::zeros((samples.len(), n, k * c));
        let mut targets = Array3::zeros((samples.len(), rk, n * c));
        for (i, s) in samples.iter().enumerate() {
            for ni in 0..n {
                for fk in 0..k {
                    for ch in 0..c {
                        inputs[[i, ni, fk * c + ch]] =
                            F::from_f64(s.input_frames[[fk, ni, ch]] as f64);
                    }
                }
            }
            for fk in 0..rk {
                for ni in 0..n {
                    for ch in 0..c {
                        targets[[i, fk, ni * c + ch]] =
                            F::from_f64(s.target_frames[[fk, ni, ch]] as f64);
                    }
                }
            }
        }
        Ok(PackedDataset {
            inputs,
            targets,
            target_times: samples[0].target_times.clone(),
            sensors: ds.sensors.clone(),
            dt: ds.dt,
            k,
            r_blocks: info.r_blocks,
            channels: c,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_sensors(&self) -> usize {
        self.inputs.dim().1
    }

    /// Keep only the first `r_keep` target blocks (used to restrict the
    /// training horizon for extrapolation studies).
    pub fn truncate_blocks(&mut self, r_keep: usize) {
        assert!(r_keep >= 1 && r_keep <= self.r_blocks);
        let rk = r_keep * self.k;
        self.targets = self.targets.slice(s![.., 0..rk, ..]).to_owned();
        self.target_times.truncate(rk);
        self.r_blocks = r_keep;
    }

    /// Node-stacked inputs `[B*N, K*C]` for the graph model.
    pub fn stacked_inputs(&self, idxs: &[usize]) -> Array2<F> {
        let (_, n, kc) = self.inputs.dim();
        let mut out = Array2::zeros((idxs.len() * n, kc));
        for (b, &i) in idxs.iter().enumerate() {
            out.slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&self.inputs.index_axis(ndarray::Axis(0), i));
        }
        out
    }

    /// Flattened branch inputs `[B, N*K*C]` for the fixed-grid baseline.
    pub fn branch_inputs(&self, idxs: &[usize]) -> Array2<F> {
        let stacked = self.stacked_inputs(idxs);
        super::model::flatten_branch_input(&stacked, self.n_sensors())
    }

    /// Target rows `[B*RK, N*C]`, sample-major.
    pub fn target_rows(&self, idxs: &[usize]) -> Array2<F> {
        let (_, rk, nc) = self.targets.dim();
        let mut out = Array2::zeros((idxs.len() * rk, nc));
        for (b, &i) in idxs.iter().enumerate() {
            out.slice_mut(s![b * rk..(b + 1) * rk, ..])
                .assign(&self.targets.index_axis(ndarray::Axis(0), i));
        }
        out
    }
}

/// Anything trainable by [`fit`]: both the graph surrogate and the
/// fixed-grid baseline.
pub trait Surrogate<F: Scalar>: Sized {
    fn batch_loss_grads(
        &self,
        data: &PackedDataset<F>,
        idxs: &[usize],
    ) -> Result<(f64, Vec<ArrayD<F>>)>;

    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>>;
    fn params_flat(&self) -> Vec<ArrayD<F>>;
    fn set_params_flat(&mut self, params: &[ArrayD<F>]) -> Result<()>;

    /// Frame predictions `[B, RK, Q, C]` at the query positions.
    fn predict(
        &self,
        data: &PackedDataset<F>,
        idxs: &[usize],
        queries: &Array2<f64>,
    ) -> Result<Array4<F>>;
}

/// Graph surrogate bound to the (training) sensor graph.
#[derive(Clone)]
pub struct GdonSurrogate<F: Scalar> {
    pub net: GraphDeepONet<F>,
    pub graph: GraphInput<F>,
}

impl<F: Scalar> Surrogate<F> for GdonSurrogate<F> {
    fn batch_loss_grads(
        &self,
        data: &PackedDataset<F>,
        idxs: &[usize],
    ) -> Result<(f64, Vec<ArrayD<F>>)> {
        let inputs = data.stacked_inputs(idxs);
        let targets = data.target_rows(idxs);
        self.net
            .loss_and_grads(&self.graph, &inputs, &targets, data.dt, data.r_blocks)
    }

    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.net.param_views_mut()
    }

    fn params_flat(&self) -> Vec<ArrayD<F>> {
        self.net.params_flat()
    }

    fn set_params_flat(&mut self, params: &[ArrayD<F>]) -> Result<()> {
        self.net.set_params_flat(params)
    }

    fn predict(
        &self,
        data: &PackedDataset<F>,
        idxs: &[usize],
        queries: &Array2<f64>,
    ) -> Result<Array4<F>> {
        let inputs = data.stacked_inputs(idxs);
        self.net
            .predict_frames(&inputs, &self.graph, data.r_blocks, data.dt, queries)
    }
}

/// Fixed-grid baseline wrapper.
#[derive(Clone)]
pub struct DeepOnetSurrogate<F: Scalar> {
    pub net: DeepOnet<F>,
}

impl<F: Scalar> Surrogate<F> for DeepOnetSurrogate<F> {
    fn batch_loss_grads(
        &self,
        data: &PackedDataset<F>,
        idxs: &[usize],
    ) -> Result<(f64, Vec<ArrayD<F>>)> {
        self.net.check_layout(data.sensors.positions())?;
        let inputs = data.branch_inputs(idxs);
        let targets = data.target_rows(idxs);
        self.net.loss_and_grads(&inputs, &targets, &data.target_times)
    }

    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        self.net.param_views_mut()
    }

    fn params_flat(&self) -> Vec<ArrayD<F>> {
        self.net.params_flat()
    }

    fn set_params_flat(&mut self, params: &[ArrayD<F>]) -> Result<()> {
        self.net.set_params_flat(params)
    }

    fn predict(
        &self,
        data: &PackedDataset<F>,
        idxs: &[usize],
        queries: &Array2<f64>,
    ) -> Result<Array4<F>> {
        let inputs = data.branch_inputs(idxs);
        self.net.predict_frames(&inputs, &data.target_times, queries)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rel_l2: f64,
    pub lr: f64,
}

pub struct FitOutcome<M> {
    /// Model after the final epoch.
    pub model: M,
    /// Parameters of the best-validation epoch.
    pub best_params: Vec<ndarray::ArrayD<f64>>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
}

impl<M> FitOutcome<M> {
    pub fn restore_best<F: Scalar>(&self, model: &mut M) -> Result<()>
    where
        M: Surrogate<F>,
    {
        let params: Vec<ArrayD<F>> = self
            .best_params
            .iter()
            .map(|p| p.mapv(F::from_f64))
            .collect();
        model.set_params_flat(&params)
    }

    /// A copy of the trained model with the best-validation parameters.
    pub fn best_model<F: Scalar>(&self) -> Result<M>
    where
        M: Surrogate<F> + Clone,
    {
        let mut m = self.model.clone();
        self.restore_best(&mut m)?;
        Ok(m)
    }
}

/// Mean relative L2 over the validation rollout (per-frame norm ratio,
/// averaged over frames, then over trajectories).
pub fn validation_rel_l2<F: Scalar, M: Surrogate<F>>(
    model: &M,
    data: &PackedDataset<F>,
) -> Result<f64> {
    let idxs: Vec<usize> = (0..data.len()).collect();
    let preds = model.predict(data, &idxs, data.sensors.positions())?;
    let (_, rk, nc) = data.targets.dim();
    let mut acc = 0.0;
    for (b, &i) in idxs.iter().enumerate() {
        let mut pred = Array2::zeros((rk, nc));
        for fk in 0..rk {
            for q in 0..data.n_sensors() {
                for ch in 0..data.channels {
                    pred[[fk, q * data.channels + ch]] =
                        preds[[b, fk, q, ch]].as_f64();
                }
            }
        }
        let truth = data
            .targets
            .index_axis(ndarray::Axis(0), i)
            .mapv(|v| v.as_f64());
        acc += relative_l2(&pred.view(), &truth.view())?;
    }
    Ok(acc / idxs.len() as f64)
}

/// Adam training with step-decayed learning rate, gradient clipping and
/// best-validation tracking. Deterministic given the config seed.
pub fn fit<F: Scalar, M: Surrogate<F> + Clone>(
    mut model: M,
    train: &PackedDataset<F>,
    val: &PackedDataset<F>,
    cfg: &TrainConfig,
) -> Result<FitOutcome<M>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<F>::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<ArrayD<f64>> =
        model.params_flat().iter().map(|p| p.mapv(|v| v.as_f64())).collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = model.batch_loss_grads(train, chunk)?;
            if !loss.is_finite() {
                let pnorm = grad_norm(&model.params_flat());
                return Err(Error::TrainingFailure(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx} \
                     (parameter norm {pnorm:.3e})"
                )));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut model.param_views_mut(), &grads);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_rel_l2 = validation_rel_l2(&model, val)?;
        if val_rel_l2 < best_val {
            best_val = val_rel_l2;
            best_epoch = epoch;
            best_params = model.params_flat().iter().map(|p| p.mapv(|v| v.as_f64())).collect();
        }
        history.push(EpochRecord { epoch, train_loss, val_rel_l2, lr: adam.lr });
    }
    Ok(FitOutcome { model, best_params, best_epoch, best_val, history })
}

/// Rollout loss on already-decoded predictions: mean over all predicted
/// frames of the MSE between the field evaluated at the sensor positions
/// and the target frames.
pub fn loss_total<F: Scalar>(
    model: &GraphDeepONet<F>,
    preds: &[FieldPrediction<F>],
    targets: &BundledSample,
    sensor_positions: &Array2<f64>,
) -> Result<f64> {
    let total_frames: usize = preds.iter().map(|p| p.times.len()).sum();
    if total_frames != targets.target_frames.dim().0 {
        return Err(Error::invalid(format!(
            "prediction frames ({total_frames}) do not match target frames ({})",
            targets.target_frames.dim().0
        )));
    }
    let n = sensor_positions.nrows();
    if n != targets.target_frames.dim().1 {
        return Err(Error::invalid("sensor count does not match targets"));
    }
    let c = targets.target_frames.dim().2;
    let mut acc = 0.0;
    let mut frame0 = 0usize;
    for pred in preds {
        let vals = model.evaluate_field(pred, sensor_positions)?; // [1, K, N, C]
        let k = pred.times.len();
        for kappa in 0..k {
            for ni in 0..n {
                for ch in 0..c {
                    let r = vals[[0, kappa, ni, ch]].as_f64()
                        - targets.target_frames[[frame0 + kappa, ni, ch]] as f64;
                    acc += r * r;
                }
            }
        }
        frame0 += k;
    }
    Ok(acc / (total_frames * n * c) as f64)
}
