//! Evaluation metrics and protocols: rollout error at (possibly off-sensor)
//! queries, time extrapolation, and the fixed-grid counterexample.

mod transport;

pub use transport::{transport_counterexample_demo, TransportDemoReport};

use ndarray::{Array2, ArrayView2, Axis};

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::geometry::SensorSet;
use crate::nn::Scalar;
use crate::training::{PackedDataset, Surrogate};

/// Per-frame relative L2 error, averaged over frames:
/// `mean_t ||pred_t - truth_t||_2 / ||truth_t||_2`.
/// A zero-norm truth frame makes the metric undefined.
pub fn relative_l2(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: pred {:?}, truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut acc = 0.0;
    for (t, (p, y)) in pred.rows().into_iter().zip(truth.rows()).enumerate() {
        let denom = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if denom == 0.0 {
            return Err(Error::UndefinedMetric(format!("truth frame {t} has zero norm")));
        }
        let num = p
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        acc += num / denom;
    }
    Ok(acc / pred.nrows() as f64)
}

/// Rollout evaluation summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub rel_l2_mean: f64,
    pub rel_l2_per_block: Vec<f64>,
    pub protocol: String,
    pub n_traj: usize,
    pub query_grid: String,
    pub seed: u64,
}

impl EvalReport {
    /// Flat key-value record (scalars only) for logging.
    pub fn flat_record(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("protocol".into(), serde_json::json!(self.protocol));
        m.insert("rel_l2_mean".into(), serde_json::json!(self.rel_l2_mean));
        for (i, v) in self.rel_l2_per_block.iter().enumerate() {
            m.insert(format!("rel_l2_block_{}", i + 1), serde_json::json!(v));
        }
        m.insert("n_traj".into(), serde_json::json!(self.n_traj));
        m.insert("query_grid".into(), serde_json::json!(self.query_grid));
        m.insert("seed".into(), serde_json::json!(self.seed));
        m
    }
}

fn check_aligned(input_ds: &TrajectoryDataset, truth_ds: &TrajectoryDataset) -> Result<()> {
    if input_ds.n_traj() != truth_ds.n_traj() {
        return Err(Error::invalid("input and truth datasets hold different trajectory counts"));
    }
    if input_ds.times.len() != truth_ds.times.len()
        || input_ds
            .times
            .iter()
            .zip(truth_ds.times.iter())
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::invalid("input and truth datasets are on different time grids"));
    }
    Ok(())
}

/// Roll the model out on every trajectory of `input_ds` and score it at the
/// sensors of `truth_ds` (which may be a different, off-sensor query grid;
/// its values are the generator-produced ground truth there).
pub fn evaluate_rollout<F: Scalar, M: Surrogate<F>>(
    model: &M,
    input_ds: &TrajectoryDataset,
    truth_ds: &TrajectoryDataset,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_aligned(input_ds, truth_ds)?;
    let data = PackedDataset::<F>::from_dataset(input_ds, k)?;
    let truth = PackedDataset::<f64>::from_dataset(truth_ds, k)?;
    let idxs: Vec<usize> = (0..data.len()).collect();
    let preds = model.predict(&data, &idxs, truth.sensors.positions())?; // [B, RK, Q, C]
    let (_, rk, q, c) = preds.dim();

    let mut per_frame = vec![0.0; rk];
    for (b, &i) in idxs.iter().enumerate() {
        let t_rows = truth.targets.index_axis(Axis(0), i); // [RK, Q*C]
        for fk in 0..rk {
            let mut num = 0.0;
            let mut den = 0.0;
            for qi in 0..q {
                for ch in 0..c {
                    let y = t_rows[[fk, qi * c + ch]].as_f64();
                    let p = preds[[b, fk, qi, ch]].as_f64();
                    num += (p - y) * (p - y);
                    den += y * y;
                }
            }
            if den == 0.0 {
                return Err(Error::UndefinedMetric(format!(
                    "truth frame {fk} of trajectory {i} has zero norm"
                )));
            }
            per_frame[fk] += (num / den).sqrt();
        }
    }
    let n_traj = idxs.len() as f64;
    for v in per_frame.iter_mut() {
        *v /= n_traj;
    }
    let rel_l2_mean = per_frame.iter().sum::<f64>() / rk as f64;
    let rel_l2_per_block = per_frame
        .chunks(k)
        .map(|c_| c_.iter().sum::<f64>() / c_.len() as f64)
        .collect();
    Ok(EvalReport {
        rel_l2_mean,
        rel_l2_per_block,
        protocol: "rollout".into(),
        n_traj: idxs.len(),
        query_grid: format!("{} queries", q),
        seed,
    })
}

/// Extrapolation evaluation summary; frames are partitioned exactly at
/// `t_train_end`, with nothing counted twice.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExtrapolationReport {
    pub rel_l2_train_window: f64,
    pub rel_l2_extra_window: f64,
    pub frames_train: usize,
    pub frames_extra: usize,
    pub t_train_end: f64,
    pub t_extra_end: f64,
    pub n_traj: usize,
}

impl ExtrapolationReport {
    pub fn flat_record(&self) -> serde_json::Map<String, serde_json::Value> {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_object().cloned())
            .unwrap_or_default()
    }
}

/// Continue the rollout across the full horizon of `ds` and report relative
/// L2 separately on `[0, t_train_end]` and `(t_train_end, t_extra_end]`.
/// The model is expected to have been trained only on frames up to
/// `t_train_end`.
pub fn extrapolation_eval<F: Scalar, M: Surrogate<F>>(
    model: &M,
    ds: &TrajectoryDataset,
    k: usize,
    t_train_end: f64,
    t_extra_end: f64,
) -> Result<ExtrapolationReport> {
    if t_extra_end <= t_train_end {
        return Err(Error::invalid("t_extra_end must exceed t_train_end"));
    }
    let data = PackedDataset::<F>::from_dataset(ds, k)?;
    let idxs: Vec<usize> = (0..data.len()).collect();
    let preds = model.predict(&data, &idxs, data.sensors.positions())?;
    let (_, rk, q, c) = preds.dim();
    let eps = 1e-9;

    let mut sum_train = 0.0;
    let mut sum_extra = 0.0;
    let mut frames_train = 0usize;
    let mut frames_extra = 0usize;
    for fk in 0..rk {
        let t = data.target_times[fk];
        if t > t_extra_end + eps {
            break;
        }
        let mut frame_acc = 0.0;
        for (b, &i) in idxs.iter().enumerate() {
            let t_rows = data.targets.index_axis(Axis(0), i);
            let mut num = 0.0;
            let mut den = 0.0;
            for qi in 0..q {
                for ch in 0..c {
                    let y = t_rows[[fk, qi * c + ch]].as_f64();
                    let p = preds[[b, fk, qi, ch]].as_f64();
                    num += (p - y) * (p - y);
                    den += y * y;
                }
            }
            if den == 0.0 {
                return Err(Error::UndefinedMetric(format!("zero-norm truth frame {fk}")));
            }
            frame_acc += (num / den).sqrt();
        }
        frame_acc /= idxs.len() as f64;
        if t <= t_train_end + eps {
            sum_train += frame_acc;
            frames_train += 1;
        } else {
            sum_extra += frame_acc;
            frames_extra += 1;
        }
    }
    if frames_train == 0 || frames_extra == 0 {
        return Err(Error::invalid(format!(
            "window split left {frames_train} train / {frames_extra} extrapolation frames"
        )));
    }
    Ok(ExtrapolationReport {
        rel_l2_train_window: sum_train / frames_train as f64,
        rel_l2_extra_window: sum_extra / frames_extra as f64,
        frames_train,
        frames_extra,
        t_train_end,
        t_extra_end,
        n_traj: idxs.len(),
    })
}

/// Ground truth values for an evaluation query grid, shaped `[T, Q*C]` for
/// one trajectory of a dataset that stores those queries as its sensors.
pub fn truth_frames(ds: &TrajectoryDataset, traj: usize) -> Array2<f64> {
    let (_, t, n, c) = ds.u.dim();
    let mut out = Array2::zeros((t, n * c));
    for fk in 0..t {
        for ni in 0..n {
            for ch in 0..c {
                out[[fk, ni * c + ch]] = ds.u[[traj, fk, ni, ch]] as f64;
            }
        }
    }
    out
}

/// Build an offset uniform query grid (all points strictly between the
/// cells of an n-point uniform grid), for off-sensor evaluation.
pub fn offset_uniform_queries(
    domain: &crate::geometry::DomainSpec,
    n: usize,
) -> Result<SensorSet> {
    let d = domain.dim();
    if d != 1 {
        return Err(Error::invalid("offset query grids are 1D"));
    }
    let mut pos = Array2::zeros((n, 1));
    for i in 0..n {
        pos[[i, 0]] = domain.lower()[0] + (i as f64 + 0.5) * domain.extent(0) / n as f64;
    }
    SensorSet::new(pos, domain.clone())
}
