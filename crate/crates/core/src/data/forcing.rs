//! Random sinusoidal forcing for the 1D Burgers data generator.
//!
//! delta(t, x) = sum_{j=1}^{5} A_j sin(a_j t + b_j x + phi_j) with
//! A_j ~ U[-1/2, 1/2], a_j ~ U[-2/5, 2/5], b_j uniform over
//! {pi/8, 2pi/8, 3pi/8} and phi_j ~ U[0, 2pi]. The same expression at t = 0
//! doubles as the initial condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const N_FORCING_TERMS: usize = 5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BurgersForcing {
    /// Amplitudes A_j in [-1/2, 1/2].
    pub amplitude: [f64; N_FORCING_TERMS],
    /// Temporal frequencies a_j in [-2/5, 2/5].
    pub time_freq: [f64; N_FORCING_TERMS],
    /// Spatial frequencies b_j in {pi/8, 2pi/8, 3pi/8}.
    pub space_freq: [f64; N_FORCING_TERMS],
    /// Phases phi_j in [0, 2pi].
    pub phase: [f64; N_FORCING_TERMS],
}

/// Draw forcing parameters from the stated distributions; deterministic
/// given the seed.
pub fn sample_burgers_forcing(seed: u64) -> BurgersForcing {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = BurgersForcing {
        amplitude: [0.0; N_FORCING_TERMS],
        time_freq: [0.0; N_FORCING_TERMS],
        space_freq: [0.0; N_FORCING_TERMS],
        phase: [0.0; N_FORCING_TERMS],
    };
    for j in 0..N_FORCING_TERMS {
        f.amplitude[j] = rng.random_range(-0.5..0.5);
        f.time_freq[j] = rng.random_range(-0.4..0.4);
        f.space_freq[j] = (rng.random_range(0..3u32) + 1) as f64 * PI / 8.0;
        f.phase[j] = rng.random_range(0.0..2.0 * PI);
    }
    f
}

impl BurgersForcing {
    /// Zero forcing (used by the conservation/dissipation oracles).
    pub fn zero() -> Self {
        BurgersForcing {
            amplitude: [0.0; N_FORCING_TERMS],
            time_freq: [0.0; N_FORCING_TERMS],
            space_freq: [0.0; N_FORCING_TERMS],
            phase: [0.0; N_FORCING_TERMS],
        }
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        (0..N_FORCING_TERMS)
            .map(|j| {
                self.amplitude[j]
                    * (self.time_freq[j] * t + self.space_freq[j] * x + self.phase[j]).sin()
            })
            .sum()
    }

    pub fn eval_profile(&self, t: f64, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(t, x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parameters_stay_in_stated_ranges() {
        let mut max_amp: f64 = 0.0;
        let mut min_a = f64::INFINITY;
        let mut max_a = f64::NEG_INFINITY;
        let allowed = [PI / 8.0, PI / 4.0, 3.0 * PI / 8.0];
        for seed in 0..10_000u64 {
            let f = sample_burgers_forcing(seed);
            for j in 0..N_FORCING_TERMS {
                max_amp = max_amp.max(f.amplitude[j].abs());
                min_a = min_a.min(f.time_freq[j]);
                max_a = max_a.max(f.time_freq[j]);
                assert!(
                    allowed.iter().any(|b| (b - f.space_freq[j]).abs() < 1e-12),
                    "b_j = {} not in the allowed set",
                    f.space_freq[j]
                );
                assert!((0.0..=2.0 * PI).contains(&f.phase[j]));
            }
        }
        assert!(max_amp <= 0.5);
        assert!(min_a >= -0.4 && max_a <= 0.4);
        // the sampler actually explores the ranges
        assert!(max_amp > 0.49);
        assert!(max_a > 0.39 && min_a < -0.39);
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_burgers_forcing(77), sample_burgers_forcing(77));
    }

    #[test]
    fn zero_amplitudes_give_zero_forcing() {
        let f = BurgersForcing::zero();
        assert_eq!(f.eval(1.3, 4.2), 0.0);
    }

    #[test]
    fn single_term_closed_form() {
        let mut f = BurgersForcing::zero();
        f.amplitude[0] = 1.0;
        f.space_freq[0] = PI / 8.0;
        for &x in &[0.0, 1.0, 7.5, 15.9] {
            assert_abs_diff_eq!(f.eval(3.0, x), (PI * x / 8.0).sin(), epsilon = 1e-14);
        }
    }

    #[test]
    fn triangle_inequality_bound() {
        for seed in 0..50u64 {
            let f = sample_burgers_forcing(seed);
            for i in 0..200 {
                let t = i as f64 * 0.02;
                let x = (i as f64 * 0.37) % 16.0;
                assert!(f.eval(t, x).abs() <= 2.5 + 1e-12);
            }
        }
    }
}
