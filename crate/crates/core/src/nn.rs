//! Small dense-network toolkit: MLPs with hand-written backward passes and
//! an Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training throughput and in f64 for gradient verification. Parameters are
//! exposed as flat lists of dynamic-dimension views in a fixed canonical
//! order (layer by layer, weight before bias), which is what the optimizer
//! and the checkpoint writer consume.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floating-point element type for network parameters and activations.
pub trait Scalar: ndarray::NdFloat + num_traits::Float + serde::Serialize {
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Hyperbolic tangent on the activation hot path. f32 uses a rational
    /// polynomial accurate to about one ulp; f64 stays on the libm call so
    /// double-precision gradient checks see the exact function.
    fn fast_tanh(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn fast_tanh(self) -> Self {
        // odd rational approximation p(x)/q(x); beyond the clamp tanh
        // saturates to +-1 at f32 precision
        const CLAMP: f32 = 7.905_311_3;
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let p = 4.893_525e-3
            + x2 * (6.372_619e-4
                + x2 * (1.485_722_4e-5
                    + x2 * (5.122_297e-8
                        + x2 * (-8.604_672e-11 + x2 * (2.000_188e-13 + x2 * -2.760_768_5e-16)))));
        let p = x * p;
        let q = 4.893_525_2e-3 + x2 * (2.268_434_6e-3 + x2 * (1.185_347e-4 + x2 * 1.198_258_4e-6));
        p / q
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

/// Hidden-layer activation. GELU uses the tanh form so that forward and
/// derivative stay cheap and exactly consistent with each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    /// Activation value together with the auxiliary tanh value reused by
    /// [`Self::grad_aux`] (zero for ReLU, which needs none).
    #[inline]
    pub fn apply_aux<F: Scalar>(self, z: F) -> (F, F) {
        match self {
            Activation::Gelu => {
                let c = F::from_f64(GELU_C);
                let a = F::from_f64(GELU_A);
                let half = F::from_f64(0.5);
                let inner = c * (z + a * z * z * z);
                let t = inner.fast_tanh();
                (half * z * (F::one() + t), t)
            }
            Activation::Tanh => {
                let t = z.fast_tanh();
                (t, t)
            }
            Activation::Relu => {
                if z > F::zero() {
                    (z, F::zero())
                } else {
                    (F::zero(), F::zero())
                }
            }
        }
    }

    #[inline]
    pub fn apply<F: Scalar>(self, z: F) -> F {
        self.apply_aux(z).0
    }

    /// Derivative at pre-activation `z` given the cached tanh value.
    #[inline]
    pub fn grad_aux<F: Scalar>(self, z: F, t: F) -> F {
        match self {
            Activation::Gelu => {
                let c = F::from_f64(GELU_C);
                let a = F::from_f64(GELU_A);
                let half = F::from_f64(0.5);
                let three = F::from_f64(3.0);
                let sech2 = F::one() - t * t;
                half * (F::one() + t) + half * z * sech2 * c * (F::one() + three * a * z * z)
            }
            Activation::Tanh => F::one() - t * t,
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    pub fn grad<F: Scalar>(self, z: F) -> F {
        let (_, t) = self.apply_aux(z);
        self.grad_aux(z, t)
    }
}

/// Affine layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// Fan-in uniform init: both weight and bias from U(-1/sqrt(in), 1/sqrt(in)).
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Array2::zeros((out_dim, in_dim));
        for w in weight.iter_mut() {
            *w = F::from_f64(rng.random_range(-bound..bound));
        }
        let mut bias = Array1::zeros(out_dim);
        for b in bias.iter_mut() {
            *b = F::from_f64(rng.random_range(-bound..bound));
        }
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Multilayer perceptron; `dims = [in, hidden.., out]`, activation between
/// layers only (the output is linear).
#[derive(Debug, Clone)]
pub struct Mlp<F: Scalar> {
    pub layers: Vec<Linear<F>>,
    pub act: Activation,
}

/// Per-layer inputs, hidden pre-activations and cached tanh values
/// recorded by [`Mlp::forward_cached`], consumed by [`Mlp::backward`].
pub struct MlpCache<F: Scalar> {
    inputs: Vec<Array2<F>>,
    preacts: Vec<Array2<F>>,
    aux: Vec<Array2<F>>,
}

/// Gradient buffers mirroring [`Mlp::layers`].
#[derive(Debug, Clone)]
pub struct MlpGrads<F: Scalar> {
    pub layers: Vec<(Array2<F>, Array1<F>)>,
}

impl<F: Scalar> MlpGrads<F> {
    pub fn add_assign(&mut self, other: &MlpGrads<F>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
    }

    pub fn push_flat(self, out: &mut Vec<ArrayD<F>>) {
        for (w, b) in self.layers {
            out.push(w.into_dyn());
            out.push(b.into_dyn());
        }
    }
}

impl<F: Scalar> Mlp<F> {
    pub fn new(dims: &[usize], act: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers, act }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    /// Zero the final layer so the network starts as the constant-zero map.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weight.fill(F::zero());
        last.bias.fill(F::zero());
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let n = self.layers.len();
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..n] {
            h.mapv_inplace(|z| self.act.apply(z));
            h = layer.forward(&h);
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n.saturating_sub(1));
        let mut aux = Vec::with_capacity(n.saturating_sub(1));
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&cur);
            inputs.push(cur);
            if l + 1 < n {
                let mut t = Array2::zeros(z.dim());
                let mut a = z.clone();
                ndarray::Zip::from(&mut a).and(&mut t).for_each(|av, tv| {
                    let (v, tt) = self.act.apply_aux(*av);
                    *av = v;
                    *tv = tt;
                });
                preacts.push(z);
                aux.push(t);
                cur = a;
            } else {
                cur = z;
            }
        }
        (cur, MlpCache { inputs, preacts, aux })
    }

    /// Backpropagate `grad_out` through the cached forward pass, adding
    /// parameter gradients into `grads` and returning the input gradient.
    pub fn backward(
        &self,
        cache: &MlpCache<F>,
        grad_out: &Array2<F>,
        grads: &mut MlpGrads<F>,
    ) -> Array2<F> {
        let n = self.layers.len();
        let mut dz = grad_out.clone();
        for l in (0..n).rev() {
            let x = &cache.inputs[l];
            grads.layers[l].0 += &dz.t().dot(x);
            grads.layers[l].1 += &dz.sum_axis(Axis(0));
            let mut dx = dz.dot(&self.layers[l].weight);
            if l > 0 {
                // chain through the activation that produced inputs[l]
                ndarray::Zip::from(&mut dx)
                    .and(&cache.preacts[l - 1])
                    .and(&cache.aux[l - 1])
                    .for_each(|g, &z, &t| *g = *g * self.act.grad_aux(z, t));
            }
            dz = dx;
        }
        dz
    }

    pub fn zero_grads(&self) -> MlpGrads<F> {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.dim()),
                        Array1::zeros(l.bias.dim()),
                    )
                })
                .collect(),
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, F>)) {
        for l in &self.layers {
            f(l.weight.view().into_dyn());
            f(l.bias.view().into_dyn());
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, F>)) {
        for l in &mut self.layers {
            f(l.weight.view_mut().into_dyn());
            f(l.bias.view_mut().into_dyn());
        }
    }
}

/// Build `[in, width x (depth-1), out]` layer dims; `depth` counts affine
/// layers, matching "width W, depth D" network descriptions.
pub fn mlp_dims(in_dim: usize, width: usize, depth: usize, out_dim: usize) -> Vec<usize> {
    assert!(depth >= 1);
    let mut dims = Vec::with_capacity(depth + 1);
    dims.push(in_dim);
    for _ in 0..depth.saturating_sub(1) {
        dims.push(width);
    }
    dims.push(out_dim);
    dims
}

/// Global L2 norm over a gradient list.
pub fn grad_norm<F: Scalar>(grads: &[ArrayD<F>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [ArrayD<F>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Adam with bias correction. Moment buffers are allocated lazily from the
/// first gradient list and must keep the same shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [ArrayViewMutD<'_, F>], grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let alpha = F::from_f64(self.lr * bc2.sqrt() / bc1);
        let eps = F::from_f64(self.eps);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (one - b1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (one - b2) * gv * gv);
            let p = &mut params[i];
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| *pv = *pv - alpha * mv / (vv.sqrt() + eps));
        }
    }
}
