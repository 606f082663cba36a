//! Shallow-water initial-condition sampler.
//!
//! h0(x, y) is piecewise 2.0/1.0 depending on how the radial distance
//! sqrt(x^2 + y^2) compares against a radius r ~ U[0.3, 0.7]. The comparison
//! is implemented exactly as printed in the source description (2.0 where
//! r < sqrt(x^2 + y^2)); pass `invert = true` to flip it into the dam-break
//! orientation (2.0 inside the radius).

use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetMeta, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::geometry::SensorSet;

/// Sample one initial height field at the 2D grid points. Deterministic
/// given the seed. Returns (h0, radius).
pub fn sample_shallow_water_ic(
    seed: u64,
    grid: &SensorSet,
    invert: bool,
) -> Result<(Array1<f64>, f64)> {
    if grid.dim() != 2 {
        return Err(Error::invalid(format!(
            "shallow-water initial condition requires a 2D grid, got d = {}",
            grid.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(0.3..0.7);
    let h = Array1::from_iter(grid.positions().rows().into_iter().map(|p| {
        let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let outside_high = r < rho;
        if outside_high != invert {
            2.0
        } else {
            1.0
        }
    }));
    Ok((h, r))
}

/// Dataset of single-frame trajectories holding sampled initial conditions.
/// Time evolution of the shallow-water system is out of scope; this feeds
/// encoders/pipelines that only need the t = 0 field.
pub fn generate_shallow_water_ic_dataset(
    n_traj: usize,
    grid: &SensorSet,
    split_seed: u64,
    invert: bool,
) -> Result<TrajectoryDataset> {
    if n_traj == 0 {
        return Err(Error::invalid("n_traj must be positive"));
    }
    let seeds = super::derive_traj_seeds(split_seed, n_traj);
    let n = grid.n();
    let mut u = Array4::zeros((n_traj, 1, n, 1));
    let mut radii = Vec::with_capacity(n_traj);
    for (i, &seed) in seeds.iter().enumerate() {
        let (h, r) = sample_shallow_water_ic(seed, grid, invert)?;
        for s in 0..n {
            u[[i, 0, s, 0]] = h[s] as f32;
        }
        radii.push(r);
    }
    let mut params = serde_json::Map::new();
    params.insert("invert".into(), serde_json::json!(invert));
    params.insert("radii".into(), serde_json::json!(radii));
    let meta = DatasetMeta {
        equation: "shallow-water-ic".into(),
        seed: split_seed,
        params,
        traj_seeds: seeds,
        ic_coeffs: None,
    };
    TrajectoryDataset::new(u, grid.clone(), Array1::from_vec(vec![0.0]), meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainSpec;

    fn grid() -> SensorSet {
        let dom = DomainSpec::square(-2.5, 2.5, false).unwrap();
        SensorSet::uniform_grid(dom, &[16, 16]).unwrap()
    }

    #[test]
    fn printed_inequality_is_applied_literally() {
        // force a known radius by scanning seeds? No: check against the
        // returned radius instead.
        let g = grid();
        let (h, r) = sample_shallow_water_ic(4, &g, false).unwrap();
        for (i, p) in g.positions().rows().into_iter().enumerate() {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let expect = if r < rho { 2.0 } else { 1.0 };
            assert_eq!(h[i], expect, "at {:?} with r = {r}", &p);
        }
        // point (1,1): sqrt(2) > r for any r in [0.3, 0.7] -> high value
        // point (0,0): rho = 0 <= r -> low value
        let origin_idx = g
            .positions()
            .rows()
            .into_iter()
            .position(|p| p[0] == 0.0 && p[1] == 0.0)
            .unwrap();
        assert_eq!(h[origin_idx], 1.0);
    }

    #[test]
    fn invert_flag_flips_orientation() {
        let g = grid();
        let (h, _) = sample_shallow_water_ic(4, &g, false).unwrap();
        let (hi, _) = sample_shallow_water_ic(4, &g, true).unwrap();
        for i in 0..h.len() {
            assert_eq!(h[i] + hi[i], 3.0); // one is 1.0, the other 2.0
        }
    }

    #[test]
    fn values_are_binary_and_radius_in_range() {
        for seed in 0..20 {
            let (h, r) = sample_shallow_water_ic(seed, &grid(), false).unwrap();
            assert!((0.3..0.7).contains(&r));
            assert!(h.iter().all(|&v| v == 1.0 || v == 2.0));
        }
    }

    #[test]
    fn rejects_non_2d_grids() {
        let dom = DomainSpec::periodic_interval(0.0, 1.0).unwrap();
        let g1 = SensorSet::uniform_grid(dom, &[8]).unwrap();
        assert!(sample_shallow_water_ic(0, &g1, false).is_err());
    }

    #[test]
    fn dataset_has_single_frame_shape() {
        let ds = generate_shallow_water_ic_dataset(3, &grid(), 9, false).unwrap();
        assert_eq!(ds.u.dim(), (3, 1, 256, 1));
        assert_eq!(ds.times.len(), 1);
    }
}
