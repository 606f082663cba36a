//! The graph-based operator surrogate: encoder, message-passing processor,
//! soft-attention coefficient decoder and Fourier-featured trunk, plus the
//! hand-written backward pass used for training.
//!
//! Batches are folded into the row dimension: all per-node arrays have
//! `B * N` rows with sample `b` occupying rows `b*N .. (b+1)*N`, and the
//! (shared) edge list is offset per sample. This keeps every matrix product
//! large enough to be efficient without threading.

use ndarray::{s, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{pos_embed_dim, GraphInput, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::DomainSpec;
use crate::nn::{mlp_dims, Mlp, MlpCache, MlpGrads, Scalar};

/// Per-node latent vectors `f_i^(k)`, stacked over the batch.
#[derive(Debug, Clone)]
pub struct LatentState<F: Scalar> {
    /// `[B*N, d_lat]`
    pub f: Array2<F>,
    pub batch: usize,
    /// How many processor applications produced this state.
    pub step_index: usize,
}

/// Coefficients for one predicted time block, evaluable against the trunk
/// basis at arbitrary queries via [`GraphDeepONet::evaluate_field`].
#[derive(Debug, Clone)]
pub struct FieldPrediction<F: Scalar> {
    /// `[B*K, C*p]`, row `b*K + kappa`.
    pub coeffs: Array2<F>,
    pub batch: usize,
    /// Absolute frame times (shared across the batch).
    pub times: Vec<f64>,
    /// 1-based rollout block index.
    pub block_index: usize,
}

pub struct GraphDeepONet<F: Scalar> {
    pub config: ModelConfig,
    domain: DomainSpec,
    encoder: Mlp<F>,
    msg_nets: Vec<Mlp<F>>,
    upd_nets: Vec<Mlp<F>>,
    gate_net: Mlp<F>,
    feat_net: Mlp<F>,
    trunk_net: Mlp<F>,
    encode_calls: AtomicU64,
}

impl<F: Scalar> Clone for GraphDeepONet<F> {
    fn clone(&self) -> Self {
        GraphDeepONet {
            config: self.config.clone(),
            domain: self.domain.clone(),
            encoder: self.encoder.clone(),
            msg_nets: self.msg_nets.clone(),
            upd_nets: self.upd_nets.clone(),
            gate_net: self.gate_net.clone(),
            feat_net: self.feat_net.clone(),
            trunk_net: self.trunk_net.clone(),
            encode_calls: AtomicU64::new(0),
        }
    }
}

/// Gradient buffers in the canonical parameter order.
pub(crate) struct GdonGrads<F: Scalar> {
    enc: MlpGrads<F>,
    msg: Vec<MlpGrads<F>>,
    upd: Vec<MlpGrads<F>>,
    gate: MlpGrads<F>,
    feat: MlpGrads<F>,
    trunk: MlpGrads<F>,
}

impl<F: Scalar> GdonGrads<F> {
    fn flatten(self) -> Vec<ArrayD<F>> {
        let mut out = Vec::new();
        self.enc.push_flat(&mut out);
        for g in self.msg {
            g.push_flat(&mut out);
        }
        for g in self.upd {
            g.push_flat(&mut out);
        }
        self.gate.push_flat(&mut out);
        self.feat.push_flat(&mut out);
        self.trunk.push_flat(&mut out);
        out
    }
}

struct MpStepCache<F: Scalar> {
    phi: MlpCache<F>,
    psi: MlpCache<F>,
}

struct BlockCache<F: Scalar> {
    mp: Vec<MpStepCache<F>>,
    gate: MlpCache<F>,
    alpha: Array2<F>,
    /// One stacked cache/value matrix covering all K offsets of the block.
    feat_cache: MlpCache<F>,
    feat_vals: Array2<F>,
}

impl<F: Scalar> GraphDeepONet<F> {
    /// Build a model bound to a domain (the domain fixes the position
    /// embedding and trunk feature layout). Initialization is fan-in
    /// uniform; the last layer of the final update net starts at zero so
    /// the untrained processor is the identity on latents.
    pub fn new(config: ModelConfig, domain: &DomainSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = domain.dim();
        let pe = pos_embed_dim(domain, config.raw_positions);
        let cp = config.channels * config.p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = config.activation;
        let encoder = Mlp::new(
            &mlp_dims(
                config.k_bundle * config.channels + pe,
                config.enc_width,
                config.enc_depth,
                config.d_lat,
            ),
            act,
            &mut rng,
        );
        let msg_nets: Vec<Mlp<F>> = (0..config.m_steps)
            .map(|_| {
                Mlp::new(
                    &mlp_dims(2 * config.d_lat + d, config.msg_width, config.msg_depth, config.d_lat),
                    act,
                    &mut rng,
                )
            })
            .collect();
        let mut upd_nets: Vec<Mlp<F>> = (0..config.m_steps)
            .map(|_| {
                Mlp::new(
                    &mlp_dims(2 * config.d_lat, config.upd_width, config.upd_depth, config.d_lat),
                    act,
                    &mut rng,
                )
            })
            .collect();
        let gate_net = Mlp::new(
            &mlp_dims(config.d_lat + pe, config.gate_width, config.gate_depth, cp),
            act,
            &mut rng,
        );
        let feat_net = Mlp::new(
            &mlp_dims(config.d_lat + 1, config.feat_width, config.feat_depth, cp),
            act,
            &mut rng,
        );
        let trunk_in: usize = 1 + domain
            .periodic()
            .iter()
            .map(|&p| if p { 2 * config.n_fourier_modes } else { 1 })
            .sum::<usize>();
        let trunk_net = Mlp::new(
            &mlp_dims(trunk_in, config.trunk_width, config.trunk_depth, config.p),
            act,
            &mut rng,
        );
        // start the autoregressive rollout from the identity map
        upd_nets.last_mut().unwrap().zero_last_layer();
        Ok(GraphDeepONet {
            config,
            domain: domain.clone(),
            encoder,
            msg_nets,
            upd_nets,
            gate_net,
            feat_net,
            trunk_net,
            encode_calls: AtomicU64::new(0),
        })
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    /// Number of `encode` invocations since construction (diagnostic).
    pub fn encode_call_count(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    /// Zero every processor parameter; `process` then reduces to the
    /// identity map on latents. Test hook for the residual contract.
    pub fn zero_processor(&mut self) {
        for net in self.msg_nets.iter_mut().chain(self.upd_nets.iter_mut()) {
            for layer in &mut net.layers {
                layer.weight.fill(F::zero());
                layer.bias.fill(F::zero());
            }
        }
    }

    // ---- encoder ----------------------------------------------------

    fn encoder_input(&self, u_bundle: &Array2<F>, graph: &GraphInput<F>) -> Result<Array2<F>> {
        let n = graph.n_nodes();
        let rows = u_bundle.nrows();
        let kc = self.config.k_bundle * self.config.channels;
        if u_bundle.ncols() != kc {
            return Err(Error::invalid(format!(
                "encoder expects K*C = {kc} input columns, got {}",
                u_bundle.ncols()
            )));
        }
        if rows == 0 || rows % n != 0 {
            return Err(Error::invalid(format!(
                "encoder expects a multiple of N = {n} rows, got {rows}"
            )));
        }
        let batch = rows / n;
        let pe = graph.pos_embed();
        let mut input = Array2::zeros((rows, kc + pe.ncols()));
        input.slice_mut(s![.., 0..kc]).assign(u_bundle);
        for b in 0..batch {
            input
                .slice_mut(s![b * n..(b + 1) * n, kc..])
                .assign(pe);
        }
        Ok(input)
    }

    /// Pointwise encoding of the bundled input frames: `f_i^0`.
    /// `u_bundle` is `[B*N, K*C]` with frame-major columns.
    pub fn encode(&self, u_bundle: &Array2<F>, graph: &GraphInput<F>) -> Result<LatentState<F>> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let input = self.encoder_input(u_bundle, graph)?;
        let f = self.encoder.forward(&input);
        Ok(LatentState { f, batch: u_bundle.nrows() / graph.n_nodes(), step_index: 0 })
    }

    // ---- processor ---------------------------------------------------

    fn gather_message_inputs(
        &self,
        h: &Array2<F>,
        graph: &GraphInput<F>,
        batch: usize,
    ) -> Array2<F> {
        let n = graph.n_nodes();
        let e = graph.n_edges();
        let dl = self.config.d_lat;
        let d = graph.rel_pos().ncols();
        let w = 2 * dl + d;
        let mut g = Array2::zeros((batch * e, w));
        let hs = h.as_slice().expect("standard layout");
        let rp = graph.rel_pos().as_slice().expect("standard layout");
        let gs = g.as_slice_mut().expect("standard layout");
        for b in 0..batch {
            let off = b * n;
            for ei in 0..e {
                let row = (b * e + ei) * w;
                let r = (off + graph.recv()[ei]) * dl;
                let s_ = (off + graph.send()[ei]) * dl;
                gs[row..row + dl].copy_from_slice(&hs[r..r + dl]);
                gs[row + dl..row + 2 * dl].copy_from_slice(&hs[s_..s_ + dl]);
                gs[row + 2 * dl..row + w].copy_from_slice(&rp[ei * d..(ei + 1) * d]);
            }
        }
        g
    }

    fn scatter_add_messages(
        &self,
        msg: &Array2<F>,
        graph: &GraphInput<F>,
        batch: usize,
    ) -> Array2<F> {
        let n = graph.n_nodes();
        let e = graph.n_edges();
        let dl = self.config.d_lat;
        let mut agg = Array2::zeros((batch * n, dl));
        let ms = msg.as_slice().expect("standard layout");
        let asl = agg.as_slice_mut().expect("standard layout");
        for b in 0..batch {
            let off = b * n;
            for ei in 0..e {
                let dst = (off + graph.recv()[ei]) * dl;
                let src = (b * e + ei) * dl;
                for c in 0..dl {
                    asl[dst + c] = asl[dst + c] + ms[src + c];
                }
            }
        }
        agg
    }

    /// One message-passing update `h <- psi_m(h, sum_j phi_m(h_i, h_j, x_i - x_j))`.
    pub fn message_passing_step(
        &self,
        h: &Array2<F>,
        graph: &GraphInput<F>,
        step: usize,
    ) -> Result<Array2<F>> {
        let (h_next, _) = self.mp_step_inner(h, graph, step, false)?;
        Ok(h_next)
    }

    fn mp_step_inner(
        &self,
        h: &Array2<F>,
        graph: &GraphInput<F>,
        step: usize,
        record: bool,
    ) -> Result<(Array2<F>, Option<MpStepCache<F>>)> {
        if step >= self.config.m_steps {
            return Err(Error::invalid(format!(
                "message-passing step {step} out of range (M = {})",
                self.config.m_steps
            )));
        }
        let n = graph.n_nodes();
        if h.nrows() % n != 0 || h.ncols() != self.config.d_lat {
            return Err(Error::invalid("latent shape does not match the graph"));
        }
        let batch = h.nrows() / n;
        let g = self.gather_message_inputs(h, graph, batch);
        let (msg, phi_cache) = if record {
            let (m, c) = self.msg_nets[step].forward_cached(&g);
            (m, Some(c))
        } else {
            (self.msg_nets[step].forward(&g), None)
        };
        let agg = self.scatter_add_messages(&msg, graph, batch);
        let mut u = Array2::zeros((h.nrows(), 2 * self.config.d_lat));
        u.slice_mut(s![.., 0..self.config.d_lat]).assign(h);
        u.slice_mut(s![.., self.config.d_lat..]).assign(&agg);
        let (h_next, psi_cache) = if record {
            let (hn, c) = self.upd_nets[step].forward_cached(&u);
            (hn, Some(c))
        } else {
            (self.upd_nets[step].forward(&u), None)
        };
        let cache = record.then(|| MpStepCache { phi: phi_cache.unwrap(), psi: psi_cache.unwrap() });
        Ok((h_next, cache))
    }

    /// Advance the latent state one block: `f^(k+1) = f^(k) + h^M` where
    /// `h^0 = f^(k)` runs through `M` message-passing steps.
    pub fn process(&self, latent: &LatentState<F>, graph: &GraphInput<F>) -> Result<LatentState<F>> {
        let (f, _) = self.process_inner(latent, graph, false)?;
        Ok(f)
    }

    fn process_inner(
        &self,
        latent: &LatentState<F>,
        graph: &GraphInput<F>,
        record: bool,
    ) -> Result<(LatentState<F>, Option<Vec<MpStepCache<F>>>)> {
        let mut h = latent.f.clone();
        let mut caches = record.then(Vec::new);
        for m in 0..self.config.m_steps {
            let (hn, cache) = self.mp_step_inner(&h, graph, m, record)?;
            h = hn;
            if let (Some(cs), Some(c)) = (caches.as_mut(), cache) {
                cs.push(c);
            }
        }
        let f = &latent.f + &h;
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite latent after processor application {}",
                latent.step_index + 1
            )));
        }
        Ok((
            LatentState { f, batch: latent.batch, step_index: latent.step_index + 1 },
            caches,
        ))
    }

    // ---- decoder ------------------------------------------------------

    /// Column-wise softmax over the nodes of each sample.
    fn segment_softmax(&self, scores: &Array2<F>, n: usize, batch: usize) -> Array2<F> {
        let scale = F::from_f64(1.0 / (self.config.d_lat as f64).sqrt());
        let cols = scores.ncols();
        let mut alpha = scores.mapv(|v| v * scale);
        for b in 0..batch {
            let mut seg = alpha.slice_mut(s![b * n..(b + 1) * n, ..]);
            for j in 0..cols {
                let mut col = seg.column_mut(j);
                let max = col.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in col.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in col.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        alpha
    }

    fn gate_input(&self, f: &Array2<F>, graph: &GraphInput<F>, batch: usize) -> Array2<F> {
        let n = graph.n_nodes();
        let pe = graph.pos_embed();
        let mut input = Array2::zeros((batch * n, pe.ncols() + self.config.d_lat));
        for b in 0..batch {
            input.slice_mut(s![b * n..(b + 1) * n, 0..pe.ncols()]).assign(pe);
        }
        input.slice_mut(s![.., pe.ncols()..]).assign(f);
        input
    }

    /// Feature-net input for several target offsets at once, stacked
    /// offset-major: rows `kappa*B*N .. (kappa+1)*B*N` carry offset
    /// `offsets[kappa]` in column 0 and the latents in the rest.
    fn feature_input_stacked(&self, f: &Array2<F>, offsets: &[f64]) -> Array2<F> {
        let rows = f.nrows();
        let mut input = Array2::zeros((offsets.len() * rows, 1 + self.config.d_lat));
        for (ki, &t) in offsets.iter().enumerate() {
            let mut chunk = input.slice_mut(s![ki * rows..(ki + 1) * rows, ..]);
            chunk.column_mut(0).fill(F::from_f64(t));
            chunk.slice_mut(s![.., 1..]).assign(f);
        }
        input
    }

    /// Block offsets fed to the feature net: `((r-1)K + kappa) * dt`.
    fn block_offsets(&self, r: usize, dt: f64) -> Vec<f64> {
        let k = self.config.k_bundle;
        (1..=k).map(|kappa| (((r - 1) * k + kappa) as f64) * dt).collect()
    }

    /// The per-node, per-channel attention weights used by [`Self::aggregate`]:
    /// softmax over each sample's nodes of the scaled gate scores. Each
    /// column of a sample segment sums to 1. Diagnostic accessor.
    pub fn attention(&self, latent: &LatentState<F>, graph: &GraphInput<F>) -> Array2<F> {
        let scores = self.gate_net.forward(&self.gate_input(&latent.f, graph, latent.batch));
        self.segment_softmax(&scores, graph.n_nodes(), latent.batch)
    }

    /// Soft-attention readout producing the `C*p` coefficients for one
    /// target time offset (time since the last input frame).
    /// Returns `[B, C*p]`.
    pub fn aggregate(
        &self,
        latent: &LatentState<F>,
        graph: &GraphInput<F>,
        t_offset: f64,
    ) -> Array2<F> {
        debug_assert!(t_offset > 0.0, "target time offset must be positive");
        let alpha = self.attention(latent, graph);
        let feat = self
            .feat_net
            .forward(&self.feature_input_stacked(&latent.f, &[t_offset]));
        weighted_segment_sum(&alpha, feat.view(), graph.n_nodes(), latent.batch)
    }

    /// Decode one whole block: the attention weights are computed once and
    /// the feature net runs on all `offsets` stacked into a single pass.
    /// Returns `[B*K, C*p]` with row `b*K + kappa`.
    fn decode_block(
        &self,
        latent: &LatentState<F>,
        graph: &GraphInput<F>,
        offsets: &[f64],
    ) -> Array2<F> {
        let n = graph.n_nodes();
        let batch = latent.batch;
        let k = offsets.len();
        let cp = self.config.channels * self.config.p;
        let alpha = self.attention(latent, graph);
        let feat = self
            .feat_net
            .forward(&self.feature_input_stacked(&latent.f, offsets));
        let rows = batch * n;
        let mut coeffs = Array2::zeros((batch * k, cp));
        for kappa in 0..k {
            let nu = weighted_segment_sum(
                &alpha,
                feat.slice(s![kappa * rows..(kappa + 1) * rows, ..]),
                n,
                batch,
            );
            for b in 0..batch {
                coeffs.row_mut(b * k + kappa).assign(&nu.row(b));
            }
        }
        coeffs
    }

    /// Trunk basis at arbitrary query positions: `[Q, p]`.
    pub fn trunk_basis(&self, queries: &Array2<f64>) -> Result<Array2<F>> {
        Ok(self.trunk_net.forward(&self.trunk_features(queries)?))
    }

    /// Fourier feature map for the trunk: constant 1, then per periodic
    /// axis cos/sin pairs of the first `n_fourier_modes` harmonics (with
    /// the coordinate reduced modulo the extent first, so the features are
    /// exactly periodic), and raw coordinates on non-periodic axes.
    fn trunk_features(&self, queries: &Array2<f64>) -> Result<Array2<F>> {
        let d = self.domain.dim();
        if queries.ncols() != d {
            return Err(Error::invalid(format!(
                "queries have dimension {}, domain has {d}",
                queries.ncols()
            )));
        }
        let nm = self.config.n_fourier_modes;
        let width: usize =
            1 + self.domain.periodic().iter().map(|&p| if p { 2 * nm } else { 1 }).sum::<usize>();
        let mut out = Array2::zeros((queries.nrows(), width));
        for (q, row) in queries.rows().into_iter().enumerate() {
            out[[q, 0]] = F::one();
            let mut c = 1;
            for axis in 0..d {
                if self.domain.periodic()[axis] {
                    let l = self.domain.extent(axis);
                    let base =
                        std::f64::consts::TAU * (row[axis] - self.domain.lower()[axis]).rem_euclid(l) / l;
                    for mode in 1..=nm {
                        let ang = base * mode as f64;
                        out[[q, c]] = F::from_f64(ang.cos());
                        out[[q, c + 1]] = F::from_f64(ang.sin());
                        c += 2;
                    }
                } else {
                    out[[q, c]] = F::from_f64(row[axis]);
                    c += 1;
                }
            }
        }
        Ok(out)
    }

    // ---- rollout --------------------------------------------------------

    /// Full autoregressive forward pass: encode once, then `n_rollout`
    /// processor applications, decoding `K` coefficient vectors per block.
    /// The time offset fed to the feature net for block `r`, frame `kappa`
    /// is `((r-1)K + kappa) * dt`, i.e. the horizon past the last input
    /// frame; reported frame times are absolute.
    pub fn forward(
        &self,
        u_bundle: &Array2<F>,
        graph: &GraphInput<F>,
        n_rollout: usize,
        dt: f64,
    ) -> Result<Vec<FieldPrediction<F>>> {
        if n_rollout == 0 {
            return Err(Error::invalid("n_rollout must be at least 1"));
        }
        let k = self.config.k_bundle;
        let mut latent = self.encode(u_bundle, graph)?;
        let mut out = Vec::with_capacity(n_rollout);
        for r in 1..=n_rollout {
            latent = self.process(&latent, graph).map_err(|e| match e {
                Error::NumericFailure(msg) => {
                    Error::NumericFailure(format!("rollout block {r}: {msg}"))
                }
                other => other,
            })?;
            let coeffs = self.decode_block(&latent, graph, &self.block_offsets(r, dt));
            let times = (1..=k)
                .map(|kappa| ((k - 1) + (r - 1) * k + kappa) as f64 * dt)
                .collect();
            out.push(FieldPrediction {
                coeffs,
                batch: latent.batch,
                times,
                block_index: r,
            });
        }
        Ok(out)
    }

    /// Evaluate a predicted field at arbitrary query positions.
    /// Returns `[B, K, Q, C]`; linear in the stored coefficients, and the
    /// coefficients themselves never depend on the query set.
    pub fn evaluate_field(
        &self,
        pred: &FieldPrediction<F>,
        queries: &Array2<f64>,
    ) -> Result<Array4<F>> {
        let trunk = self.trunk_basis(queries)?;
        let (bk, cp) = pred.coeffs.dim();
        let c = self.config.channels;
        let p = self.config.p;
        debug_assert_eq!(cp, c * p);
        let k = bk / pred.batch;
        let coeff_rows = pred
            .coeffs
            .view()
            .into_shape_with_order((bk * c, p))
            .expect("coeff reshape");
        let flat = coeff_rows.dot(&trunk.t()); // [B*K*C, Q]
        let q = queries.nrows();
        let mut out = Array4::zeros((pred.batch, k, q, c));
        for b in 0..pred.batch {
            for kappa in 0..k {
                for ch in 0..c {
                    let row = (b * k + kappa) * c + ch;
                    for qi in 0..q {
                        out[[b, kappa, qi, ch]] = flat[[row, qi]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Rollout + evaluation in one call: `[B, R*K, Q, C]` frame values at
    /// the query positions.
    pub fn predict_frames(
        &self,
        u_bundle: &Array2<F>,
        graph: &GraphInput<F>,
        n_rollout: usize,
        dt: f64,
        queries: &Array2<f64>,
    ) -> Result<Array4<F>> {
        let preds = self.forward(u_bundle, graph, n_rollout, dt)?;
        let k = self.config.k_bundle;
        let q = queries.nrows();
        let batch = preds[0].batch;
        let mut out = Array4::zeros((batch, n_rollout * k, q, self.config.channels));
        for (r, pred) in preds.iter().enumerate() {
            let vals = self.evaluate_field(pred, queries)?;
            out.slice_mut(s![.., r * k..(r + 1) * k, .., ..]).assign(&vals);
        }
        Ok(out)
    }

    // ---- training -------------------------------------------------------

    /// Mean-over-frames MSE of the rollout against targets at the graph
    /// sensors, together with parameter gradients in canonical order.
    ///
    /// `inputs`: `[B*N, K*C]`; `targets`: `[B*RK, N*C]` with rows ordered
    /// sample-major then frame.
    pub fn loss_and_grads(
        &self,
        graph: &GraphInput<F>,
        inputs: &Array2<F>,
        targets: &Array2<F>,
        dt: f64,
        r_blocks: usize,
    ) -> Result<(f64, Vec<ArrayD<F>>)> {
        let n = graph.n_nodes();
        let k = self.config.k_bundle;
        let c = self.config.channels;
        let p = self.config.p;
        let cp = c * p;
        let dl = self.config.d_lat;
        let batch = inputs.nrows() / n;
        let rk = r_blocks * k;
        if targets.nrows() != batch * rk || targets.ncols() != n * c {
            return Err(Error::invalid(format!(
                "targets must be [{} x {}], got [{} x {}]",
                batch * rk,
                n * c,
                targets.nrows(),
                targets.ncols()
            )));
        }

        // forward with caches
        let enc_input = self.encoder_input(inputs, graph)?;
        let (f0, enc_cache) = self.encoder.forward_cached(&enc_input);
        let mut latent = LatentState { f: f0, batch, step_index: 0 };

        let mut blocks: Vec<BlockCache<F>> = Vec::with_capacity(r_blocks);
        let mut latents: Vec<Array2<F>> = Vec::with_capacity(r_blocks);
        // coefficient matrix, row (b*RK + k_global)*C + ch
        let mut coeff_mat = Array2::zeros((batch * rk * c, p));
        let rows = batch * n;
        for r in 1..=r_blocks {
            let (next, mp_caches) = self.process_inner(&latent, graph, true)?;
            latent = next;
            let (gate_out, gate_cache) =
                self.gate_net.forward_cached(&self.gate_input(&latent.f, graph, batch));
            let alpha = self.segment_softmax(&gate_out, n, batch);
            let offsets = self.block_offsets(r, dt);
            let (feat_vals, feat_cache) = self
                .feat_net
                .forward_cached(&self.feature_input_stacked(&latent.f, &offsets));
            for kappa in 1..=k {
                let feat = feat_vals.slice(s![(kappa - 1) * rows..kappa * rows, ..]);
                let nu = weighted_segment_sum(&alpha, feat, n, batch); // [B, Cp]
                let kg = (r - 1) * k + kappa - 1;
                for b in 0..batch {
                    for ch in 0..c {
                        let row = (b * rk + kg) * c + ch;
                        coeff_mat
                            .row_mut(row)
                            .assign(&nu.slice(s![b, ch * p..(ch + 1) * p]));
                    }
                }
            }
            blocks.push(BlockCache { mp: mp_caches.unwrap(), gate: gate_cache, alpha, feat_cache, feat_vals });
            latents.push(latent.f.clone());
        }

        let (trunk, trunk_cache) =
            self.trunk_net.forward_cached(&self.trunk_features(graph.positions())?);
        let u_hat = coeff_mat.dot(&trunk.t()); // [B*RK*C, N]

        // targets reordered to match u_hat rows/cols: row (b,kg,ch), col n
        let mut resid = u_hat;
        for b in 0..batch {
            for kg in 0..rk {
                for ch in 0..c {
                    let row = (b * rk + kg) * c + ch;
                    for ni in 0..n {
                        resid[[row, ni]] = resid[[row, ni]] - targets[[b * rk + kg, ni * c + ch]];
                    }
                }
            }
        }
        let denom = (batch * rk * n * c) as f64;
        let loss: f64 = resid.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / denom;
        if !loss.is_finite() {
            return Err(Error::NumericFailure("non-finite training loss".into()));
        }

        // ---- backward ----
        let mut grads = GdonGrads {
            enc: self.encoder.zero_grads(),
            msg: self.msg_nets.iter().map(|m| m.zero_grads()).collect(),
            upd: self.upd_nets.iter().map(|m| m.zero_grads()).collect(),
            gate: self.gate_net.zero_grads(),
            feat: self.feat_net.zero_grads(),
            trunk: self.trunk_net.zero_grads(),
        };
        let scale = F::from_f64(2.0 / denom);
        let d_uhat = resid.mapv(|v| v * scale); // [B*RK*C, N]
        let d_coeff = d_uhat.dot(&trunk); // [B*RK*C, p]
        let d_trunk = d_uhat.t().dot(&coeff_mat); // [N, p]
        self.trunk_net.backward(&trunk_cache, &d_trunk, &mut grads.trunk);

        let inv_sqrt = F::from_f64(1.0 / (dl as f64).sqrt());
        let mut df: Array2<F> = Array2::zeros((batch * n, dl));
        for r in (1..=r_blocks).rev() {
            let bc = &blocks[r - 1];
            // gradient w.r.t. alpha accumulated over the K frames, and the
            // stacked feature gradient for one backward pass
            let mut d_alpha: Array2<F> = Array2::zeros((batch * n, cp));
            let mut d_feat_stacked: Array2<F> = Array2::zeros((k * rows, cp));
            for kappa in 1..=k {
                // dnu for this (block, kappa): [B, Cp]
                let kg = (r - 1) * k + kappa - 1;
                let mut dnu = Array2::zeros((batch, cp));
                for b in 0..batch {
                    for ch in 0..c {
                        let row = (b * rk + kg) * c + ch;
                        dnu.slice_mut(s![b, ch * p..(ch + 1) * p])
                            .assign(&d_coeff.row(row));
                    }
                }
                let base = (kappa - 1) * rows;
                for b in 0..batch {
                    let nu_row = dnu.row(b);
                    for i in b * n..(b + 1) * n {
                        for j in 0..cp {
                            // d feat = alpha * dnu, d alpha += feat * dnu
                            d_feat_stacked[[base + i, j]] = bc.alpha[[i, j]] * nu_row[j];
                            d_alpha[[i, j]] =
                                d_alpha[[i, j]] + bc.feat_vals[[base + i, j]] * nu_row[j];
                        }
                    }
                }
            }
            let d_in = self.feat_net.backward(&bc.feat_cache, &d_feat_stacked, &mut grads.feat);
            for kappa in 0..k {
                df += &d_in.slice(s![kappa * rows..(kappa + 1) * rows, 1..]);
            }
            // softmax backward per sample segment and channel
            let mut d_score: Array2<F> = Array2::zeros((batch * n, cp));
            for b in 0..batch {
                for j in 0..cp {
                    let mut dot = F::zero();
                    for i in b * n..(b + 1) * n {
                        dot = dot + bc.alpha[[i, j]] * d_alpha[[i, j]];
                    }
                    for i in b * n..(b + 1) * n {
                        d_score[[i, j]] =
                            bc.alpha[[i, j]] * (d_alpha[[i, j]] - dot) * inv_sqrt;
                    }
                }
            }
            let d_gate_in = self.gate_net.backward(&bc.gate, &d_score, &mut grads.gate);
            let pe_cols = graph.pos_embed().ncols();
            df += &d_gate_in.slice(s![.., pe_cols..]);

            // back through the processor of this block:
            // f^(r) = f^(r-1) + h^M(f^(r-1))
            let mut dh = df.clone();
            for m in (0..self.config.m_steps).rev() {
                let step_cache = &bc.mp[m];
                let d_u = self.upd_nets[m].backward(&step_cache.psi, &dh, &mut grads.upd[m]);
                let mut dh_prev = d_u.slice(s![.., 0..dl]).to_owned();
                let d_agg = d_u.slice(s![.., dl..]);
                // messages: gather receiver gradients, push through phi
                let e = graph.n_edges();
                if e > 0 {
                    let mut d_msg = Array2::zeros((batch * e, dl));
                    {
                        let da = d_agg.to_owned();
                        let da = da.as_slice().expect("standard layout");
                        let dm = d_msg.as_slice_mut().expect("standard layout");
                        for b in 0..batch {
                            let off = b * n;
                            for ei in 0..e {
                                let dst = (b * e + ei) * dl;
                                let src = (off + graph.recv()[ei]) * dl;
                                dm[dst..dst + dl].copy_from_slice(&da[src..src + dl]);
                            }
                        }
                    }
                    let d_g = self.msg_nets[m].backward(&step_cache.phi, &d_msg, &mut grads.msg[m]);
                    let w = d_g.ncols();
                    let dg = d_g.as_slice().expect("standard layout");
                    let dh_s = dh_prev.as_slice_mut().expect("standard layout");
                    for b in 0..batch {
                        let off = b * n;
                        for ei in 0..e {
                            let row = (b * e + ei) * w;
                            let r = (off + graph.recv()[ei]) * dl;
                            let s_ = (off + graph.send()[ei]) * dl;
                            for c in 0..dl {
                                dh_s[r + c] = dh_s[r + c] + dg[row + c];
                                dh_s[s_ + c] = dh_s[s_ + c] + dg[row + dl + c];
                            }
                        }
                    }
                }
                dh = dh_prev;
            }
            // residual: df^(r-1) = df^(r) + dh^0
            df += &dh;
        }
        self.encoder.backward(&enc_cache, &df, &mut grads.enc);

        Ok((loss, grads.flatten()))
    }

    // ---- parameter access ------------------------------------------------

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(ArrayViewD<'a, F>)) {
        self.encoder.visit_params(f);
        for m in &self.msg_nets {
            m.visit_params(f);
        }
        for m in &self.upd_nets {
            m.visit_params(f);
        }
        self.gate_net.visit_params(f);
        self.feat_net.visit_params(f);
        self.trunk_net.visit_params(f);
    }

    pub fn visit_params_mut<'a>(&'a mut self, f: &mut dyn FnMut(ArrayViewMutD<'a, F>)) {
        self.encoder.visit_params_mut(f);
        for m in &mut self.msg_nets {
            m.visit_params_mut(f);
        }
        for m in &mut self.upd_nets {
            m.visit_params_mut(f);
        }
        self.gate_net.visit_params_mut(f);
        self.feat_net.visit_params_mut(f);
        self.trunk_net.visit_params_mut(f);
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
                idx += 1;
                return;
            }
            if v.shape() != params[idx].shape() {
                err = Some(format!(
                    "parameter {idx} shape mismatch: {:?} vs {:?}",
                    v.shape(),
                    params[idx].shape()
                ));
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

    pub fn n_params(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |v| count += v.len());
        count
    }
}

/// `out[b, j] = sum_{i in segment b} alpha[i, j] * feat[i, j]`.
fn weighted_segment_sum<F: Scalar>(
    alpha: &Array2<F>,
    feat: ndarray::ArrayView2<'_, F>,
    n: usize,
    batch: usize,
) -> Array2<F> {
    let cols = alpha.ncols();
    let mut out = Array2::zeros((batch, cols));
    for b in 0..batch {
        let seg_a = alpha.slice(s![b * n..(b + 1) * n, ..]);
        let seg_f = feat.slice(s![b * n..(b + 1) * n, ..]);
        let mut row = out.row_mut(b);
        for i in 0..n {
            for j in 0..cols {
                row[j] = row[j] + seg_a[[i, j]] * seg_f[[i, j]];
            }
        }
    }
    out
}
