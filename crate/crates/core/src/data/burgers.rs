//! 1D forced Burgers solver: pseudo-spectral method of lines on a fine
//! periodic grid with an adaptive Dormand-Prince 5(4) integrator, restricted
//! to the requested output sensors by trigonometric interpolation.
//!
//! The PDE is the divergence form
//! `du/dt + d/dx(alpha u^2 - beta u_x + gamma u_xx) = delta(t, x)` on a
//! periodic interval, with initial condition `u(0, x) = delta(0, x)`.
//! The quadratic flux is dealiased with the 2/3 rule.

use ndarray::{Array1, Array2, Array4};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use super::{derive_traj_seeds, forcing::BurgersForcing, DatasetMeta, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::geometry::SensorSet;

/// Flux coefficients of the divergence-form Burgers equation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BurgersParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for BurgersParams {
    fn default() -> Self {
        BurgersParams { alpha: 0.5, beta: 0.01, gamma: 0.0 }
    }
}

/// Numerical configuration for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BurgersGenConfig {
    /// Output frames, uniformly spaced over `[0, t_end]`.
    pub n_frames: usize,
    pub t_end: f64,
    /// Internal fine-grid resolution of the solver.
    pub n_internal: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for BurgersGenConfig {
    fn default() -> Self {
        BurgersGenConfig { n_frames: 250, t_end: 4.0, n_internal: 256, rtol: 1e-6, atol: 1e-8 }
    }
}

const BLOWUP_LIMIT: f64 = 1e6;

/// Pseudo-spectral workspace for one resolution.
struct Spectral1d {
    n: usize,
    lower: f64,
    length: f64,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// Signed wavenumbers (odd-derivative convention: Nyquist zeroed).
    k_odd: Vec<f64>,
    k_signed: Vec<f64>,
    dealias: Vec<bool>,
}

impl Spectral1d {
    fn new(n: usize, lower: f64, length: f64) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let base = 2.0 * std::f64::consts::PI / length;
        let mut k_signed = vec![0.0; n];
        let mut k_odd = vec![0.0; n];
        let mut dealias = vec![false; n];
        for m in 0..n {
            let ms = if m <= n / 2 { m as isize } else { m as isize - n as isize };
            k_signed[m] = ms as f64 * base;
            k_odd[m] = if n % 2 == 0 && m == n / 2 { 0.0 } else { k_signed[m] };
            dealias[m] = ms.unsigned_abs() <= n / 3;
        }
        Spectral1d { n, lower, length, fft, ifft, k_odd, k_signed, dealias }
    }

    fn grid(&self) -> Vec<f64> {
        (0..self.n)
            .map(|m| self.lower + m as f64 * self.length / self.n as f64)
            .collect()
    }

    /// Right-hand side of the method-of-lines system.
    fn rhs(&self, t: f64, u: &[f64], forcing: &BurgersForcing, p: &BurgersParams, out: &mut [f64]) {
        let n = self.n;
        let mut u_hat: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut u_hat);
        let mut q_hat: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v * v, 0.0)).collect();
        self.fft.process(&mut q_hat);

        let mut rhs_hat = vec![Complex::new(0.0, 0.0); n];
        for m in 0..n {
            let q = if self.dealias[m] { q_hat[m] } else { Complex::new(0.0, 0.0) };
            let k = self.k_signed[m];
            let ko = self.k_odd[m];
            // -d/dx(alpha u^2) - d/dx(-beta u_x) - d/dx(gamma u_xx)
            rhs_hat[m] = Complex::new(0.0, -ko * p.alpha) * q
                + Complex::new(-p.beta * k * k, p.gamma * ko * k * k) * u_hat[m];
        }
        self.ifft.process(&mut rhs_hat);
        let scale = 1.0 / n as f64;
        let dx = self.length / n as f64;
        for m in 0..n {
            let x = self.lower + m as f64 * dx;
            out[m] = rhs_hat[m].re * scale + forcing.eval(t, x);
        }
    }

    /// Evaluate the trigonometric interpolant of grid samples `u` at
    /// arbitrary positions. Exact at the grid points up to roundoff.
    fn interpolate(&self, u: &[f64], xs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut u_hat: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut u_hat);
        let base = 2.0 * std::f64::consts::PI / self.length;
        xs.iter()
            .map(|&x| {
                let xr = x - self.lower;
                let mut acc = u_hat[0].re;
                for m in 1..n / 2 {
                    let ang = base * m as f64 * xr;
                    acc += 2.0 * (u_hat[m].re * ang.cos() - u_hat[m].im * ang.sin());
                }
                if n % 2 == 0 {
                    acc += u_hat[n / 2].re * (base * (n / 2) as f64 * xr).cos();
                }
                acc / n as f64
            })
            .collect()
    }
}

/// Evaluate the trigonometric interpolant of uniformly sampled periodic data
/// at arbitrary positions. `u` are samples at `lower + m*length/len(u)`.
pub fn trig_interpolate(u: &[f64], lower: f64, length: f64, xs: &[f64]) -> Vec<f64> {
    Spectral1d::new(u.len(), lower, length).interpolate(u, xs)
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights equal the last A row (FSAL form); these are the
// error-estimate weights b - b*.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate `du/dt = rhs(t, u)` with adaptive steps, sampling the solution
/// exactly at `out_times` (which must be ascending and start at 0).
fn integrate_adaptive(
    mut rhs: impl FnMut(f64, &[f64], &mut [f64]),
    u0: Vec<f64>,
    out_times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = u0.len();
    let t_end = *out_times.last().unwrap();
    let mut frames = Vec::with_capacity(out_times.len());
    let mut t = 0.0;
    let mut u = u0;
    let mut next_out = 0;
    if out_times[0] == 0.0 {
        frames.push(u.clone());
        next_out = 1;
    }
    let mut h = (t_end / 1000.0).min(1e-2).max(1e-6);
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    let check = |t: f64, u: &[f64]| -> Result<()> {
        let bad = u.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT);
        if bad {
            Err(Error::IntegrationFailure {
                t,
                reason: "solution exceeded blow-up limit or became non-finite".into(),
            })
        } else {
            Ok(())
        }
    };
    check(0.0, &u)?;

    let mut steps: u64 = 0;
    let time_eps = 1e-12 * t_end.max(1.0);
    while next_out < out_times.len() {
        let target = out_times[next_out];
        if (target - t).abs() <= time_eps {
            t = target;
            frames.push(u.clone());
            next_out += 1;
            continue;
        }
        let mut h_try = h.min(target - t);
        loop {
            steps += 1;
            if steps > 50_000_000 {
                return Err(Error::IntegrationFailure { t, reason: "step budget exhausted".into() });
            }
            if h_try < 1e-13 * t_end.max(1.0) {
                return Err(Error::IntegrationFailure { t, reason: "step size underflow".into() });
            }
            rhs(t, &u, &mut k[0]);
            for s in 0..6 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, &a) in DP_A[s].iter().enumerate() {
                        acc += a * k[j][i];
                    }
                    stage[i] = u[i] + h_try * acc;
                }
                rhs(t + DP_C[s] * h_try, &stage, &mut k[s + 1]);
            }
            // k[6] is the derivative at the 5th-order solution; stage still
            // holds that solution since DP_C[5] = 1 and A[5] = b.
            y5.copy_from_slice(&stage);
            let mut err_sq = 0.0;
            for i in 0..n {
                let mut e = 0.0;
                for (j, &w) in DP_E.iter().enumerate() {
                    e += w * k[j][i];
                }
                e *= h_try;
                let tol = atol + rtol * u[i].abs().max(y5[i].abs());
                let r = e / tol;
                err_sq += r * r;
            }
            let err = (err_sq / n as f64).sqrt();
            if err <= 1.0 {
                t += h_try;
                std::mem::swap(&mut u, &mut y5);
                check(t, &u)?;
                let grow = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
                h = (h_try * grow.clamp(0.2, 5.0)).min(t_end);
                break;
            }
            let shrink = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            h_try *= shrink;
        }
        // frame recording happens at the top of the while loop once t is
        // within tolerance of the target
    }
    Ok(frames)
}

/// Integrate the Burgers equation from an explicit initial condition on the
/// internal grid, returning frames on that grid. Test and oracle entry point.
pub fn integrate_burgers(
    ic: &[f64],
    forcing: &BurgersForcing,
    params: &BurgersParams,
    lower: f64,
    length: f64,
    out_times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Array2<f64>> {
    let spec = Spectral1d::new(ic.len(), lower, length);
    let frames = integrate_adaptive(
        |t, u, out| spec.rhs(t, u, forcing, params, out),
        ic.to_vec(),
        out_times,
        rtol,
        atol,
    )?;
    let n = ic.len();
    let mut out = Array2::zeros((frames.len(), n));
    for (i, f) in frames.iter().enumerate() {
        out.row_mut(i).assign(&Array1::from_vec(f.clone()));
    }
    Ok(out)
}

/// Solve one forced-Burgers trajectory with `u(0, x) = delta(0, x)` and
/// restrict the fine-grid solution onto the given output sensors.
pub fn solve_burgers(
    forcing: &BurgersForcing,
    params: &BurgersParams,
    grid: &SensorSet,
    cfg: &BurgersGenConfig,
) -> Result<TrajectoryDataset> {
    let domain = grid.domain().clone();
    if domain.dim() != 1 || !domain.periodic()[0] {
        return Err(Error::invalid("Burgers solver requires a 1D periodic domain"));
    }
    if cfg.n_frames < 2 {
        return Err(Error::invalid("need at least 2 output frames"));
    }
    let spec = Spectral1d::new(cfg.n_internal, domain.lower()[0], domain.extent(0));
    let ic: Vec<f64> = spec.grid().iter().map(|&x| forcing.eval(0.0, x)).collect();
    let out_times = super::uniform_times(cfg.t_end, cfg.n_frames);
    let frames = integrate_adaptive(
        |t, u, out| spec.rhs(t, u, forcing, params, out),
        ic,
        out_times.as_slice().unwrap(),
        cfg.rtol,
        cfg.atol,
    )?;

    let xs: Vec<f64> = grid.positions().column(0).to_vec();
    let n = grid.n();
    let mut u = Array4::zeros((1, cfg.n_frames, n, 1));
    for (k, f) in frames.iter().enumerate() {
        for (i, v) in spec.interpolate(f, &xs).into_iter().enumerate() {
            u[[0, k, i, 0]] = v as f32;
        }
    }
    let mut meta = DatasetMeta { equation: "burgers".into(), ..Default::default() };
    meta.params = burgers_params_json(params, cfg);
    TrajectoryDataset::new(u, grid.clone(), out_times, meta)
}

fn burgers_params_json(
    params: &BurgersParams,
    cfg: &BurgersGenConfig,
) -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("alpha".into(), serde_json::json!(params.alpha));
    m.insert("beta".into(), serde_json::json!(params.beta));
    m.insert("gamma".into(), serde_json::json!(params.gamma));
    m.insert("n_internal".into(), serde_json::json!(cfg.n_internal));
    m.insert("rtol".into(), serde_json::json!(cfg.rtol));
    m.insert("atol".into(), serde_json::json!(cfg.atol));
    m
}

/// Generate `n_traj` independent forced-Burgers trajectories. Forcing seeds
/// are derived from `split_seed` and recorded in the metadata, so the same
/// physical trajectories can be re-sampled on a different output grid.
pub fn generate_burgers_dataset(
    n_traj: usize,
    split_seed: u64,
    grid: &SensorSet,
    params: &BurgersParams,
    cfg: &BurgersGenConfig,
) -> Result<TrajectoryDataset> {
    if n_traj == 0 {
        return Err(Error::invalid("n_traj must be positive"));
    }
    let seeds = derive_traj_seeds(split_seed, n_traj);
    let n = grid.n();
    let mut u = Array4::zeros((n_traj, cfg.n_frames, n, 1));
    let mut times = None;
    for (i, &seed) in seeds.iter().enumerate() {
        let forcing = super::forcing::sample_burgers_forcing(seed);
        let single = solve_burgers(&forcing, params, grid, cfg).map_err(|e| match e {
            Error::IntegrationFailure { t, reason } => Error::IntegrationFailure {
                t,
                reason: format!("trajectory {i} (seed {seed}): {reason}"),
            },
            other => other,
        })?;
        u.index_axis_mut(ndarray::Axis(0), i)
            .assign(&single.u.index_axis(ndarray::Axis(0), 0));
        times = Some(single.times);
    }
    let meta = DatasetMeta {
        equation: "burgers".into(),
        seed: split_seed,
        params: burgers_params_json(params, cfg),
        traj_seeds: seeds,
        ic_coeffs: None,
    };
    TrajectoryDataset::new(u, grid.clone(), times.unwrap(), meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainSpec;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn grid50() -> SensorSet {
        let dom = DomainSpec::periodic_interval(0.0, 16.0).unwrap();
        SensorSet::uniform_grid(dom, &[50]).unwrap()
    }

    fn sine_ic(n: usize, length: f64) -> Vec<f64> {
        (0..n)
            .map(|m| {
                let x = m as f64 * length / n as f64;
                (2.0 * PI * x / length).sin() + 0.5 * (4.0 * PI * x / length).sin()
            })
            .collect()
    }

    /// Linear heat equation limit (alpha = 0): compare against the exact
    /// decaying-mode solution.
    #[test]
    fn heat_limit_matches_exact_decay() {
        let length = 16.0;
        let nu = 0.05;
        let params = BurgersParams { alpha: 0.0, beta: nu, gamma: 0.0 };
        let n = 128;
        let ic: Vec<f64> = (0..n)
            .map(|m| (2.0 * PI * (m as f64 / n as f64)).sin())
            .collect();
        let out_times = [0.0, 0.5, 1.0, 2.0];
        let frames = integrate_burgers(
            &ic,
            &BurgersForcing::zero(),
            &params,
            0.0,
            length,
            &out_times,
            1e-10,
            1e-12,
        )
        .unwrap();
        let k = 2.0 * PI / length;
        for (fi, &t) in out_times.iter().enumerate() {
            let decay = (-nu * k * k * t).exp();
            for m in (0..n).step_by(17) {
                let x = m as f64 * length / n as f64;
                assert_abs_diff_eq!(frames[[fi, m]], decay * (k * x).sin(), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn zero_forcing_conserves_spatial_mean() {
        let params = BurgersParams { alpha: 0.5, beta: 0.02, gamma: 0.0 };
        let n = 256;
        let ic = sine_ic(n, 16.0);
        let out_times: Vec<f64> = (0..9).map(|k| k as f64 * 0.25).collect();
        let frames = integrate_burgers(
            &ic,
            &BurgersForcing::zero(),
            &params,
            0.0,
            16.0,
            &out_times,
            1e-9,
            1e-11,
        )
        .unwrap();
        let mean0: f64 = frames.row(0).mean().unwrap();
        for fi in 1..out_times.len() {
            let mean: f64 = frames.row(fi).mean().unwrap();
            assert!((mean - mean0).abs() < 1e-8, "mean drift {}", (mean - mean0).abs());
        }
    }

    #[test]
    fn viscous_l2_norm_is_nonincreasing() {
        let params = BurgersParams { alpha: 0.5, beta: 0.05, gamma: 0.0 };
        let n = 256;
        let ic = sine_ic(n, 16.0);
        let out_times: Vec<f64> = (0..17).map(|k| k as f64 * 0.25).collect();
        let frames = integrate_burgers(
            &ic,
            &BurgersForcing::zero(),
            &params,
            0.0,
            16.0,
            &out_times,
            1e-9,
            1e-11,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for fi in 0..out_times.len() {
            let l2: f64 = frames.row(fi).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(l2 <= prev + 1e-9, "L2 grew: {prev} -> {l2}");
            prev = l2;
        }
    }

    #[test]
    fn self_convergence_under_refinement() {
        let forcing = super::super::forcing::sample_burgers_forcing(12345);
        let params = BurgersParams { alpha: 0.5, beta: 0.02, gamma: 0.0 };
        let grid = grid50();
        let mut diffs = Vec::new();
        let mut prev: Option<Array4<f32>> = None;
        for n_internal in [128usize, 256, 512] {
            let cfg = BurgersGenConfig {
                n_frames: 40,
                t_end: 2.0,
                n_internal,
                rtol: 1e-9,
                atol: 1e-11,
            };
            let ds = solve_burgers(&forcing, &params, &grid, &cfg).unwrap();
            if let Some(p) = prev.take() {
                let d = (&ds.u - &p).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                diffs.push(d);
            }
            prev = Some(ds.u);
        }
        assert!(
            diffs[1] < diffs[0],
            "no self-convergence: diffs {diffs:?}"
        );
    }

    #[test]
    fn blowup_is_reported_with_time() {
        // strong anti-diffusion blows up quickly
        let params = BurgersParams { alpha: 0.5, beta: -0.5, gamma: 0.0 };
        let forcing = super::super::forcing::sample_burgers_forcing(3);
        let cfg = BurgersGenConfig { n_frames: 10, t_end: 4.0, n_internal: 128, ..Default::default() };
        match solve_burgers(&forcing, &params, &grid50(), &cfg) {
            Err(Error::IntegrationFailure { t, .. }) => assert!(t >= 0.0 && t <= 4.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn trig_interpolation_is_exact_at_grid_points() {
        let n = 64;
        let u = sine_ic(n, 16.0);
        let xs: Vec<f64> = (0..n).map(|m| m as f64 * 16.0 / n as f64).collect();
        let vals = trig_interpolate(&u, 0.0, 16.0, &xs);
        for (a, b) in vals.iter().zip(&u) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // and reproduces the underlying smooth function off-grid
        let off = [0.123, 3.77, 11.502];
        let vals = trig_interpolate(&u, 0.0, 16.0, &off);
        for (&x, v) in off.iter().zip(&vals) {
            let exact = (2.0 * PI * x / 16.0).sin() + 0.5 * (4.0 * PI * x / 16.0).sin();
            assert_abs_diff_eq!(*v, exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn dataset_records_seeds_and_shape() {
        let grid = grid50();
        let cfg = BurgersGenConfig {
            n_frames: 20,
            t_end: 0.5,
            n_internal: 128,
            ..Default::default()
        };
        let ds = generate_burgers_dataset(3, 7, &grid, &BurgersParams::default(), &cfg).unwrap();
        assert_eq!(ds.u.dim(), (3, 20, 50, 1));
        assert_eq!(ds.meta.traj_seeds.len(), 3);
        let again = generate_burgers_dataset(3, 7, &grid, &BurgersParams::default(), &cfg).unwrap();
        assert_eq!(ds.u, again.u);
    }
}
