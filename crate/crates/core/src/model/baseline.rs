//! Classic branch/trunk operator baseline.
//!
//! The branch net maps the flattened sensor observations to `p`
//! coefficients once; the trunk net takes `(t, x)` jointly, so time lives
//! in the basis rather than in the coefficients. The sensor layout is fixed
//! at construction: feeding observations from a different layout is an
//! error by design, which is exactly the limitation the graph model lifts.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, SensorSet};
use crate::nn::{mlp_dims, Activation, Mlp, Scalar};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeepOnetConfig {
    pub p: usize,
    pub k_bundle: usize,
    pub channels: usize,
    pub branch_width: usize,
    pub branch_depth: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub activation: Activation,
}

impl Default for DeepOnetConfig {
    fn default() -> Self {
        DeepOnetConfig {
            p: 128,
            k_bundle: 25,
            channels: 1,
            branch_width: 128,
            branch_depth: 3,
            trunk_width: 128,
            trunk_depth: 3,
            activation: Activation::Gelu,
        }
    }
}

pub struct DeepOnet<F: Scalar> {
    pub config: DeepOnetConfig,
    sensors: Array2<f64>,
    domain: DomainSpec,
    branch: Mlp<F>,
    trunk: Mlp<F>,
}

impl<F: Scalar> Clone for DeepOnet<F> {
    fn clone(&self) -> Self {
        DeepOnet {
            config: self.config.clone(),
            sensors: self.sensors.clone(),
            domain: self.domain.clone(),
            branch: self.branch.clone(),
            trunk: self.trunk.clone(),
        }
    }
}

impl<F: Scalar> DeepOnet<F> {
    pub fn new(config: DeepOnetConfig, sensors: &SensorSet, seed: u64) -> Result<Self> {
        if config.p == 0 || config.k_bundle == 0 || config.channels == 0 {
            return Err(Error::invalid("p, k_bundle and channels must be >= 1"));
        }
        let n = sensors.n();
        let d = sensors.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = Mlp::new(
            &mlp_dims(
                n * config.k_bundle * config.channels,
                config.branch_width,
                config.branch_depth,
                config.channels * config.p,
            ),
            config.activation,
            &mut rng,
        );
        let trunk = Mlp::new(
            &mlp_dims(1 + d, config.trunk_width, config.trunk_depth, config.p),
            config.activation,
            &mut rng,
        );
        Ok(DeepOnet {
            config,
            sensors: sensors.positions().clone(),
            domain: sensors.domain().clone(),
            branch,
            trunk,
        })
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn training_sensors(&self) -> &Array2<f64> {
        &self.sensors
    }

    /// The baseline is grid-bound: observations must come from exactly the
    /// training layout.
    pub fn check_layout(&self, positions: &Array2<f64>) -> Result<()> {
        if positions != &self.sensors {
            return Err(Error::invalid(
                "sensor layout differs from the training layout; the fixed-grid baseline \
                 cannot ingest it",
            ));
        }
        Ok(())
    }

    /// Branch coefficients for a batch of flattened inputs `[B, N*K*C]`
    /// (node-major). Returns `[B, C*p]`.
    pub fn branch_coeffs(&self, branch_input: &Array2<F>) -> Result<Array2<F>> {
        if branch_input.ncols() != self.branch.in_dim() {
            return Err(Error::invalid(format!(
                "branch input width {} does not match N*K*C = {}",
                branch_input.ncols(),
                self.branch.in_dim()
            )));
        }
        Ok(self.branch.forward(branch_input))
    }

    /// Trunk values for every (time, query) pair; rows are time-major.
    fn trunk_matrix(&self, times: &[f64], queries: &Array2<f64>) -> Result<Array2<F>> {
        let d = self.domain.dim();
        if queries.ncols() != d {
            return Err(Error::invalid("query dimension mismatch"));
        }
        let q = queries.nrows();
        let mut input = Array2::zeros((times.len() * q, 1 + d));
        for (ti, &t) in times.iter().enumerate() {
            for qi in 0..q {
                input[[ti * q + qi, 0]] = F::from_f64(t);
                for a in 0..d {
                    input[[ti * q + qi, 1 + a]] = F::from_f64(queries[[qi, a]]);
                }
            }
        }
        Ok(self.trunk.forward(&input))
    }

    /// Single-point evaluation `u(t, x) = sum_j nu_j[input] tau_j(t, x)`.
    pub fn eval_at(&self, branch_input: &Array1<F>, t: f64, x: &[f64]) -> Result<Array1<F>> {
        let coeffs = self.branch_coeffs(
            &branch_input.view().insert_axis(ndarray::Axis(0)).to_owned(),
        )?;
        let queries = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let trunk = self.trunk_matrix(&[t], &queries)?; // [1, p]
        let c = self.config.channels;
        let p = self.config.p;
        let mut out = Array1::zeros(c);
        for ch in 0..c {
            let mut acc = F::zero();
            for j in 0..p {
                acc = acc + coeffs[[0, ch * p + j]] * trunk[[0, j]];
            }
            out[ch] = acc;
        }
        Ok(out)
    }

    /// Predict frames at the given times and query positions:
    /// `[B, T, Q, C]`. Times outside the training window are legal inputs;
    /// the trunk is an ordinary function of `(t, x)`.
    pub fn predict_frames(
        &self,
        branch_input: &Array2<F>,
        times: &[f64],
        queries: &Array2<f64>,
    ) -> Result<Array4<F>> {
        let coeffs = self.branch_coeffs(branch_input)?; // [B, Cp]
        let trunk = self.trunk_matrix(times, queries)?; // [T*Q, p]
        let b = coeffs.nrows();
        let c = self.config.channels;
        let p = self.config.p;
        let coeff_rows = coeffs
            .view()
            .into_shape_with_order((b * c, p))
            .expect("coeff reshape");
        let flat = coeff_rows.dot(&trunk.t()); // [B*C, T*Q]
        let q = queries.nrows();
        let mut out = Array4::zeros((b, times.len(), q, c));
        for bi in 0..b {
            for ch in 0..c {
                let row = bi * c + ch;
                for (ti, _) in times.iter().enumerate() {
                    for qi in 0..q {
                        out[[bi, ti, qi, ch]] = flat[[row, ti * q + qi]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mean-over-frames MSE at the training sensors plus parameter
    /// gradients (branch first, then trunk).
    /// `inputs`: `[B, N*K*C]`; `targets`: `[B*T, N*C]` sample-major rows.
    pub fn loss_and_grads(
        &self,
        inputs: &Array2<F>,
        targets: &Array2<F>,
        times: &[f64],
    ) -> Result<(f64, Vec<ArrayD<F>>)> {
        let n = self.sensors.nrows();
        let c = self.config.channels;
        let p = self.config.p;
        let b = inputs.nrows();
        let t_count = times.len();
        if targets.nrows() != b * t_count || targets.ncols() != n * c {
            return Err(Error::invalid("target shape mismatch"));
        }
        let (coeffs, branch_cache) = self.branch.forward_cached(inputs);
        let trunk_in = {
            let mut input = Array2::zeros((t_count * n, 1 + self.domain.dim()));
            for (ti, &t) in times.iter().enumerate() {
                for qi in 0..n {
                    input[[ti * n + qi, 0]] = F::from_f64(t);
                    for a in 0..self.domain.dim() {
                        input[[ti * n + qi, 1 + a]] = F::from_f64(self.sensors[[qi, a]]);
                    }
                }
            }
            input
        };
        let (trunk, trunk_cache) = self.trunk.forward_cached(&trunk_in); // [T*N, p]
        let coeff_rows = coeffs
            .view()
            .into_shape_with_order((b * c, p))
            .expect("coeff reshape")
            .to_owned();
        let mut resid = coeff_rows.dot(&trunk.t()); // [B*C, T*N]
        for bi in 0..b {
            for ch in 0..c {
                let row = bi * c + ch;
                for ti in 0..t_count {
                    for ni in 0..n {
                        resid[[row, ti * n + ni]] = resid[[row, ti * n + ni]]
                            - targets[[bi * t_count + ti, ni * c + ch]];
                    }
                }
            }
        }
        let denom = (b * t_count * n * c) as f64;
        let loss = resid.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / denom;
        if !loss.is_finite() {
            return Err(Error::NumericFailure("non-finite training loss".into()));
        }
        let scale = F::from_f64(2.0 / denom);
        let d_u = resid.mapv(|v| v * scale); // [B*C, T*N]
        let d_coeff_rows = d_u.dot(&trunk); // [B*C, p]
        let d_trunk = d_u.t().dot(&coeff_rows); // [T*N, p]
        let d_coeffs = d_coeff_rows
            .into_shape_with_order((b, c * p))
            .expect("grad reshape");

        let mut branch_grads = self.branch.zero_grads();
        let mut trunk_grads = self.trunk.zero_grads();
        self.branch.backward(&branch_cache, &d_coeffs, &mut branch_grads);
        self.trunk.backward(&trunk_cache, &d_trunk, &mut trunk_grads);
        let mut out = Vec::new();
        branch_grads.push_flat(&mut out);
        trunk_grads.push_flat(&mut out);
        Ok((loss, out))
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, F>)) {
        self.branch.visit_params(f);
        self.trunk.visit_params(f);
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, F>)) {
        self.branch.visit_params_mut(f);
        self.trunk.visit_params_mut(f);
    }

    pub fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = Vec::new();
        self.visit_params_mut(&mut |v| out.push(v));
        out
    }

    pub fn params_flat(&self) -> Vec<ArrayD<F>> {
        let mut out = Vec::new();
        self.visit_params(&mut |v| out.push(v.to_owned()));
        out
    }

    pub fn set_params_flat(&mut self, params: &[ArrayD<F>]) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        self.visit_params_mut(&mut |mut v| {
            if idx >= params.len() {
                err = Some("too few parameter arrays".to_string());
            } else if v.shape() != params[idx].shape() {
                err = Some(format!("parameter {idx} shape mismatch"));
            } else {
                v.assign(&params[idx]);
            }
            idx += 1;
        });
        if idx != params.len() && err.is_none() {
            err = Some("too many parameter arrays".to_string());
        }
        match err {
            Some(e) => Err(Error::schema("params", e)),
            None => Ok(()),
        }
    }

    /// Zero the branch net's output layer; predictions become identically 0.
    pub fn zero_branch_output(&mut self) {
        self.branch.zero_last_layer();
    }
}

/// Flatten per-node bundled frames `[B*N, K*C]` into the baseline's
/// node-major branch rows `[B, N*K*C]`.
pub(crate) fn flatten_branch_input<F: Scalar>(u_bundle: &Array2<F>, n: usize) -> Array2<F> {
    let rows = u_bundle.nrows();
    debug_assert_eq!(rows % n, 0);
    let batch = rows / n;
    let kc = u_bundle.ncols();
    let mut out = Array2::zeros((batch, n * kc));
    for b in 0..batch {
        for ni in 0..n {
            out.slice_mut(s![b, ni * kc..(ni + 1) * kc])
                .assign(&u_bundle.row(b * n + ni));
        }
    }
    out
}
