//! Fixed-grid failure demonstration on the 1D transport equation.
//!
//! Two initial conditions on the unit torus: the zero function, and a
//! smooth bump that is 1 on [3/8, 5/8] and 0 outside [5/16, 11/16]. With
//! sensors confined to (0, 1/8) and velocity 1, both initial conditions
//! (and their first transported step at dt = 1/4) read identically zero on
//! the sensors, yet at t = 2 dt the bump sits exactly on top of them. Any
//! deterministic map from the confined observations therefore incurs a
//! two-case mean-square error of at least 1/2 at that step, while a
//! trunk-based model still evaluates everywhere on the torus.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{build_knn_graph, SensorSet};
use crate::model::{GraphDeepONet, GraphInput, ModelConfig};
use crate::nn::Scalar;

/// C-infinity step that rises from 0 at tau <= 0 to 1 at tau >= 1.
fn smoothstep(tau: f64) -> f64 {
    let g = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    let a = g(tau);
    let b = g(1.0 - tau);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

/// Smooth bump: exactly 1 on [3/8, 5/8], exactly 0 outside [5/16, 11/16].
pub fn bump(x: f64) -> f64 {
    let x = x.rem_euclid(1.0);
    const LO: f64 = 5.0 / 16.0;
    const RISE: f64 = 6.0 / 16.0;
    const FALL: f64 = 10.0 / 16.0;
    const HI: f64 = 11.0 / 16.0;
    if x < LO || x > HI {
        0.0
    } else if x < RISE {
        smoothstep((x - LO) * 16.0)
    } else if x <= FALL {
        1.0
    } else {
        smoothstep((HI - x) * 16.0)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TransportDemoReport {
    /// Sensor observations of the two cases agree exactly at t = 0 and
    /// t = dt.
    pub observations_identical: bool,
    /// Smallest pointwise gap between the two true solutions on the grid at
    /// the post-transit step (1.0 when the bump plateau covers the grid).
    pub target_gap_min: f64,
    /// Best achievable mean-square error of any deterministic fixed-grid
    /// predictor, summed over the two equally likely initial conditions at
    /// the post-transit step.
    pub fixed_grid_best_mse: f64,
    /// Whether the graph model's field evaluation stayed finite at every
    /// query point across the torus.
    pub surrogate_queries_finite: bool,
    pub n_sensors: usize,
    pub dt: f64,
    pub sensor_xs: Vec<f64>,
    pub query_xs: Vec<f64>,
    /// True bump solution at the post-transit step, on the query grid.
    pub truth_bump: Vec<f64>,
    /// Zero-case solution at the same step (identically zero).
    pub truth_zero: Vec<f64>,
    /// The surrogate's (untrained) field values at the query grid, recorded
    /// to show the evaluation is defined off-sensor.
    pub surrogate_values: Vec<f64>,
}

/// Run the confined-grid demonstration. The sensors must live inside
/// (0, 1/8) on the periodic unit interval.
pub fn transport_counterexample_demo(grid: &SensorSet) -> Result<TransportDemoReport> {
    let domain = grid.domain();
    if domain.dim() != 1
        || !domain.periodic()[0]
        || (domain.lower()[0], domain.upper()[0]) != (0.0, 1.0)
    {
        return Err(Error::invalid("demo requires the periodic unit interval"));
    }
    let xs: Vec<f64> = grid.positions().column(0).to_vec();
    if xs.iter().any(|&x| x <= 0.0 || x >= 0.125) {
        return Err(Error::invalid("sensors must be confined to (0, 1/8)"));
    }
    let dt = 0.25;
    let velocity = 1.0;
    let transported = |t: f64, x: f64| bump(x - velocity * t);

    // observations for the two cases at t = 0 and t = dt
    let obs_bump_t0: Vec<f64> = xs.iter().map(|&x| transported(0.0, x)).collect();
    let obs_bump_t1: Vec<f64> = xs.iter().map(|&x| transported(dt, x)).collect();
    let observations_identical =
        obs_bump_t0.iter().all(|&v| v == 0.0) && obs_bump_t1.iter().all(|&v| v == 0.0);

    // true targets at the post-transit step 2*dt
    let y_bump: Vec<f64> = xs.iter().map(|&x| transported(2.0 * dt, x)).collect();
    let y_zero = vec![0.0; xs.len()];
    let target_gap_min = y_bump
        .iter()
        .zip(&y_zero)
        .map(|(a, b)| (a - b).abs())
        .fold(f64::INFINITY, f64::min);

    // optimal fixed-grid predictor: both cases present the same input, so
    // the best per-node output is the two-case mean; sum the two cases'
    // per-node-mean squared errors.
    let n = xs.len() as f64;
    let fixed_grid_best_mse: f64 = y_bump
        .iter()
        .zip(&y_zero)
        .map(|(a, b)| {
            let mid = 0.5 * (a + b);
            ((a - mid).powi(2) + (b - mid).powi(2)) / n
        })
        .sum();

    // the trunk-based surrogate remains evaluable across the whole torus
    let config = ModelConfig { k_bundle: 1, ..ModelConfig::desk(16, 8, 1) };
    let model = GraphDeepONet::<f64>::new(config, domain, 12)?;
    let graph = build_knn_graph(grid, grid.n().min(7) - 1)?;
    let ginput = GraphInput::<f64>::from_graph(&graph, false);
    let u0 = Array2::from_shape_vec(
        (xs.len(), 1),
        obs_bump_t0.iter().map(|&v| v).collect(),
    )
    .unwrap();
    let preds = model.forward(&u0, &ginput, 2, dt)?;
    let query_xs: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
    let queries = Array2::from_shape_vec((query_xs.len(), 1), query_xs.clone()).unwrap();
    let vals = model.evaluate_field(&preds[1], &queries)?;
    let surrogate_values: Vec<f64> = (0..query_xs.len())
        .map(|q| vals[[0, 0, q, 0]].as_f64())
        .collect();
    let surrogate_queries_finite = surrogate_values.iter().all(|v| v.is_finite());

    let truth_bump: Vec<f64> = query_xs.iter().map(|&x| transported(2.0 * dt, x)).collect();
    let truth_zero: Vec<f64> = vec![0.0; query_xs.len()];

    Ok(TransportDemoReport {
        observations_identical,
        target_gap_min,
        fixed_grid_best_mse,
        surrogate_queries_finite,
        n_sensors: xs.len(),
        dt,
        sensor_xs: xs,
        query_xs,
        truth_bump,
        truth_zero,
        surrogate_values,
    })
}

/// Default confined sensor grid for the demo: `n` uniform points inside
/// (0, 1/8).
pub fn confined_demo_grid(n: usize) -> Result<SensorSet> {
    let domain = crate::geometry::DomainSpec::periodic_interval(0.0, 1.0)?;
    let mut pos = Array2::zeros((n, 1));
    for i in 0..n {
        pos[[i, 0]] = (i as f64 + 1.0) / (n as f64 + 1.0) * 0.125;
    }
    SensorSet::new(pos, domain)
}
