//! Trajectory datasets: PDE data generators, temporal bundling and file I/O.
//!
//! A dataset holds solution frames `u[traj, time, sensor, channel]` sampled
//! at a fixed sensor set over uniformly spaced times, plus the metadata
//! needed to regenerate or extend the ground truth (per-trajectory seeds,
//! equation parameters, and for the analytic generator the closed-form
//! initial-condition coefficients).

mod advection;
mod burgers;
mod forcing;
mod shallow_water;

pub use advection::{advection_truth, generate_advection_dataset, AdvectionConfig, FourierSeriesIc};
pub use burgers::{
    generate_burgers_dataset, integrate_burgers, solve_burgers, trig_interpolate, BurgersGenConfig,
    BurgersParams,
};
pub use forcing::{sample_burgers_forcing, BurgersForcing};
pub use shallow_water::{generate_shallow_water_ic_dataset, sample_shallow_water_ic};

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde_json::Value;
use std::path::Path;

use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, SensorSet};

/// Relative tolerance on uniform time spacing.
const DT_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct DatasetMeta {
    pub equation: String,
    pub seed: u64,
    /// Equation-specific parameters (alpha/beta/gamma, velocity, ...).
    pub params: serde_json::Map<String, Value>,
    /// One RNG seed per trajectory; lets evaluation re-generate ground truth
    /// on a different query grid.
    pub traj_seeds: Vec<u64>,
    /// Closed-form initial-condition coefficients (analytic generators only),
    /// one row per trajectory.
    pub ic_coeffs: Option<Array2<f64>>,
}

/// Solution frames at sensors over uniformly spaced times.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    /// `[n_traj, T, N, C]`
    pub u: Array4<f32>,
    pub sensors: SensorSet,
    pub times: Array1<f64>,
    pub dt: f64,
    pub meta: DatasetMeta,
}

impl TrajectoryDataset {
    pub fn new(
        u: Array4<f32>,
        sensors: SensorSet,
        times: Array1<f64>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let dt = if times.len() >= 2 { times[1] - times[0] } else { 0.0 };
        let ds = TrajectoryDataset { u, sensors, times, dt, meta };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let (n_traj, t, n, _c) = self.u.dim();
        if t != self.times.len() {
            return Err(Error::invalid(format!(
                "u has {t} frames but times has {}",
                self.times.len()
            )));
        }
        if n != self.sensors.n() {
            return Err(Error::invalid(format!(
                "u has {n} sensors but sensor set has {}",
                self.sensors.n()
            )));
        }
        if t >= 2 {
            if self.dt <= 0.0 {
                return Err(Error::invalid("time spacing must be positive"));
            }
            let scale = self.times[t - 1].abs().max(self.dt.abs()).max(1.0);
            for k in 1..t {
                let step = self.times[k] - self.times[k - 1];
                if step <= 0.0 || (step - self.dt).abs() > DT_RTOL * scale {
                    return Err(Error::invalid(format!(
                        "times are not uniformly spaced at frame {k}: step {step}, dt {}",
                        self.dt
                    )));
                }
            }
        }
        if !self.u.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("u contains non-finite values"));
        }
        if !self.meta.traj_seeds.is_empty() && self.meta.traj_seeds.len() != n_traj {
            return Err(Error::invalid("traj_seeds length must match n_traj"));
        }
        Ok(())
    }

    pub fn n_traj(&self) -> usize {
        self.u.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.u.dim().1
    }

    pub fn n_sensors(&self) -> usize {
        self.u.dim().2
    }

    pub fn channels(&self) -> usize {
        self.u.dim().3
    }

    pub fn domain(&self) -> &DomainSpec {
        self.sensors.domain()
    }

    /// Frames `[T, N, C]` of one trajectory.
    pub fn trajectory(&self, i: usize) -> Array3<f32> {
        self.u.index_axis(Axis(0), i).to_owned()
    }
}

/// One temporally bundled training sample: `K` input frames and `R*K`
/// contiguous target frames of a single trajectory.
#[derive(Debug, Clone)]
pub struct BundledSample {
    /// `[K, N, C]`
    pub input_frames: Array3<f32>,
    /// `[R*K, N, C]`
    pub target_frames: Array3<f32>,
    pub input_times: Vec<f64>,
    pub target_times: Vec<f64>,
}

/// Bookkeeping for a bundling pass; `dropped_frames` counts trailing frames
/// that did not fill a whole block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleInfo {
    pub k: usize,
    pub r_blocks: usize,
    pub dropped_frames: usize,
}

/// Group each trajectory into `K` input frames followed by `R = (T-K)/K`
/// target blocks of `K` frames. Trailing frames that do not fill a block are
/// dropped and reported in the returned [`BundleInfo`].
pub fn bundle_frames(ds: &TrajectoryDataset, k: usize) -> Result<(Vec<BundledSample>, BundleInfo)> {
    let t = ds.n_frames();
    if k == 0 {
        return Err(Error::invalid("bundle size K must be positive"));
    }
    if t < 2 * k {
        return Err(Error::invalid(format!(
            "bundling needs at least 2K = {} frames, dataset has {t}",
            2 * k
        )));
    }
    let r = (t - k) / k;
    let dropped = (t - k) % k;
    let info = BundleInfo { k, r_blocks: r, dropped_frames: dropped };
    let mut out = Vec::with_capacity(ds.n_traj());
    for i in 0..ds.n_traj() {
        let traj = ds.u.index_axis(Axis(0), i);
        out.push(BundledSample {
            input_frames: traj.slice(ndarray::s![0..k, .., ..]).to_owned(),
            target_frames: traj.slice(ndarray::s![k..k + r * k, .., ..]).to_owned(),
            input_times: ds.times.iter().take(k).copied().collect(),
            target_times: ds.times.iter().skip(k).take(r * k).copied().collect(),
        });
    }
    Ok((out, info))
}

/// Write a dataset to one self-describing file.
pub fn save_dataset(ds: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new("trajectory-dataset");
    let (n_traj, t, n, ch) = ds.u.dim();
    c.push_array(
        "u",
        vec![n_traj, t, n, ch],
        ArrayData::F32(ds.u.iter().copied().collect()),
    );
    let (sn, sd) = ds.sensors.positions().dim();
    c.push_array(
        "x",
        vec![sn, sd],
        ArrayData::F64(ds.sensors.positions().iter().copied().collect()),
    );
    c.push_array("times", vec![t], ArrayData::F64(ds.times.to_vec()));
    if !ds.meta.traj_seeds.is_empty() {
        c.push_array(
            "traj_seeds",
            vec![ds.meta.traj_seeds.len()],
            ArrayData::U64(ds.meta.traj_seeds.clone()),
        );
    }
    if let Some(ic) = &ds.meta.ic_coeffs {
        let (r, cc) = ic.dim();
        c.push_array("ic_coeffs", vec![r, cc], ArrayData::F64(ic.iter().copied().collect()));
    }
    let dom = ds.domain();
    c.set_attr("equation", Value::String(ds.meta.equation.clone()));
    c.set_attr("dt", serde_json::json!(ds.dt));
    c.set_attr("domain_lower", serde_json::json!(dom.lower()));
    c.set_attr("domain_upper", serde_json::json!(dom.upper()));
    c.set_attr("periodic", serde_json::json!(dom.periodic()));
    c.set_attr("seed", serde_json::json!(ds.meta.seed));
    c.set_attr("params", Value::Object(ds.meta.params.clone()));
    c.save(path)
}

/// Read a dataset written by [`save_dataset`]. Missing or mistyped fields
/// produce a schema-violation error naming the field.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let c = Container::load(path)?;
    if c.kind != "trajectory-dataset" {
        return Err(Error::schema("kind", format!("expected trajectory-dataset, got {}", c.kind)));
    }
    let (ushape, udata) = c.array_f32("u")?;
    if ushape.len() != 4 {
        return Err(Error::schema("u", "expected rank-4 array"));
    }
    let u = Array4::from_shape_vec(
        (ushape[0], ushape[1], ushape[2], ushape[3]),
        udata.to_vec(),
    )
    .map_err(|e| Error::schema("u", e.to_string()))?;

    let (xshape, xdata) = c.array_f64("x")?;
    if xshape.len() != 2 {
        return Err(Error::schema("x", "expected rank-2 array"));
    }
    let pos = Array2::from_shape_vec((xshape[0], xshape[1]), xdata.to_vec())
        .map_err(|e| Error::schema("x", e.to_string()))?;

    let (tshape, tdata) = c.array_f64("times")?;
    if tshape.len() != 1 {
        return Err(Error::schema("times", "expected rank-1 array"));
    }
    let times = Array1::from_vec(tdata.to_vec());

    let lower: Vec<f64> = serde_json::from_value(c.attr("domain_lower")?.clone())
        .map_err(|e| Error::schema("domain_lower", e.to_string()))?;
    let upper: Vec<f64> = serde_json::from_value(c.attr("domain_upper")?.clone())
        .map_err(|e| Error::schema("domain_upper", e.to_string()))?;
    let periodic: Vec<bool> = serde_json::from_value(c.attr("periodic")?.clone())
        .map_err(|e| Error::schema("periodic", e.to_string()))?;
    let domain = DomainSpec::new(lower, upper, periodic)?;
    let sensors = SensorSet::new(pos, domain)?;

    let traj_seeds = if c.has_array("traj_seeds") {
        c.array_u64("traj_seeds")?.1.to_vec()
    } else {
        Vec::new()
    };
    let ic_coeffs = if c.has_array("ic_coeffs") {
        let (s, d) = c.array_f64("ic_coeffs")?;
        Some(
            Array2::from_shape_vec((s[0], s[1]), d.to_vec())
                .map_err(|e| Error::schema("ic_coeffs", e.to_string()))?,
        )
    } else {
        None
    };
    let params = match c.attr("params")? {
        Value::Object(m) => m.clone(),
        _ => return Err(Error::schema("params", "expected object")),
    };
    let meta = DatasetMeta {
        equation: c.attr_str("equation")?.to_string(),
        seed: c.attr_u64("seed")?,
        params,
        traj_seeds,
        ic_coeffs,
    };
    TrajectoryDataset::new(u, sensors, times, meta)
}

/// Uniform output times `0..=t_end` with `n` frames.
pub fn uniform_times(t_end: f64, n: usize) -> Array1<f64> {
    assert!(n >= 2);
    let dt = t_end / (n - 1) as f64;
    Array1::from_iter((0..n).map(|k| k as f64 * dt))
}

/// Derive per-trajectory seeds from a split seed.
pub fn derive_traj_seeds(split_seed: u64, n: usize) -> Vec<u64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(split_seed);
    (0..n).map(|_| rng.random::<u64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainSpec;

    fn tiny_dataset(t: usize) -> TrajectoryDataset {
        let dom = DomainSpec::periodic_interval(0.0, 1.0).unwrap();
        let sensors = SensorSet::uniform_grid(dom, &[4]).unwrap();
        let u = Array4::from_shape_fn((2, t, 4, 1), |(i, k, n, _)| {
            (i * 100 + k * 10 + n) as f32
        });
        let times = uniform_times(1.0, t);
        TrajectoryDataset::new(u, sensors, times, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn bundle_burgers_protocol_shape() {
        let ds = tiny_dataset(250);
        let (samples, info) = bundle_frames(&ds, 25).unwrap();
        assert_eq!(info, BundleInfo { k: 25, r_blocks: 9, dropped_frames: 0 });
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].input_frames.dim(), (25, 4, 1));
        assert_eq!(samples[0].target_frames.dim(), (225, 4, 1));
    }

    #[test]
    fn bundle_single_block() {
        let ds = tiny_dataset(10);
        let (_, info) = bundle_frames(&ds, 5).unwrap();
        assert_eq!(info.r_blocks, 1);
        assert_eq!(info.dropped_frames, 0);
    }

    #[test]
    fn bundle_drops_trailing_frames() {
        let ds = tiny_dataset(101);
        let (samples, info) = bundle_frames(&ds, 10).unwrap();
        assert_eq!(info.r_blocks, 9);
        assert_eq!(info.dropped_frames, 1);
        assert_eq!(samples[0].target_frames.dim().0, 90);
    }

    #[test]
    fn bundle_times_tile_without_gap_or_overlap() {
        let ds = tiny_dataset(100);
        let (samples, info) = bundle_frames(&ds, 10).unwrap();
        let s = &samples[0];
        let mut all = s.input_times.clone();
        all.extend(&s.target_times);
        let used = info.k + info.r_blocks * info.k;
        assert_eq!(all.len(), used);
        for (k, t) in all.iter().enumerate() {
            assert!((t - ds.times[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn bundle_rejects_short_trajectories() {
        let ds = tiny_dataset(9);
        assert!(matches!(bundle_frames(&ds, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.gdon");
        let mut ds = tiny_dataset(10);
        ds.meta.equation = "test".into();
        ds.meta.seed = 99;
        ds.meta.traj_seeds = vec![5, 6];
        ds.meta.params.insert("alpha".into(), serde_json::json!(0.5));
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(
            back.u.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ds.u.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.sensors.positions(), ds.sensors.positions());
        assert_eq!(back.times, ds.times);
        assert_eq!(back.meta.seed, 99);
        assert_eq!(back.meta.traj_seeds, vec![5, 6]);
        assert_eq!(back.meta.params["alpha"], serde_json::json!(0.5));
    }

    #[test]
    fn load_reports_missing_times() {
        // hand-build a container without the times array
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.gdon");
        let mut c = Container::new("trajectory-dataset");
        c.push_array("u", vec![1, 1, 1, 1], ArrayData::F32(vec![0.0]));
        c.push_array("x", vec![1, 1], ArrayData::F64(vec![0.5]));
        c.set_attr("domain_lower", serde_json::json!([0.0]));
        c.set_attr("domain_upper", serde_json::json!([1.0]));
        c.set_attr("periodic", serde_json::json!([true]));
        c.set_attr("equation", serde_json::json!("x"));
        c.set_attr("seed", serde_json::json!(0));
        c.set_attr("params", serde_json::json!({}));
        c.save(&path).unwrap();
        match load_dataset(&path) {
            Err(Error::SchemaViolation(field, _)) => assert_eq!(field, "times"),
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_nonuniform_times() {
        let dom = DomainSpec::periodic_interval(0.0, 1.0).unwrap();
        let sensors = SensorSet::uniform_grid(dom, &[4]).unwrap();
        let u = Array4::zeros((1, 3, 4, 1));
        let times = Array1::from_vec(vec![0.0, 0.1, 0.3]);
        assert!(TrajectoryDataset::new(u, sensors, times, DatasetMeta::default()).is_err());
    }
}
