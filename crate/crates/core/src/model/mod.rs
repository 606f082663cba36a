//! The graph deep-operator-network surrogate and the classic branch/trunk
//! baseline.
//!
//! The surrogate follows encode-process-decode on a sensor graph:
//!
//! - encoder: per-node MLP on the bundled input frames and the (periodic)
//!   position embedding, giving latents `f_i^0`;
//! - processor: `M` message-passing steps `m_ij = phi(h_i, h_j, x_i - x_j)`,
//!   `h_i <- psi(h_i, sum_j m_ij)`, applied once per predicted time block
//!   with a residual update `f^(k+1) = f^(k) + h^M`;
//! - decoder: per-channel soft-attention aggregation over nodes produces
//!   `p` coefficients per target time, paired with a trunk basis `tau(x)`
//!   that is evaluable at arbitrary positions (Fourier features on periodic
//!   axes make the basis exactly periodic).

mod baseline;
mod checkpoint;
mod gdon;

pub use baseline::{DeepOnet, DeepOnetConfig};
pub(crate) use baseline::flatten_branch_input;
pub use checkpoint::{
    load_deeponet, load_gdon, peek_checkpoint, save_deeponet, save_gdon, CheckpointInfo,
};
pub use gdon::{FieldPrediction, GraphDeepONet, LatentState};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, SensorSet, SpatialGraph};
use crate::nn::{Activation, Scalar};

/// Architecture hyperparameters. Widths/depths follow the usual
/// "width W, depth D" convention where depth counts affine layers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Latent width per node.
    pub d_lat: usize,
    /// Number of basis functions / coefficients.
    pub p: usize,
    /// Message-passing steps per processor application.
    pub m_steps: usize,
    /// Temporal bundle size K.
    pub k_bundle: usize,
    /// Solution channels C.
    pub channels: usize,
    /// Fourier modes per periodic axis in the trunk input.
    pub n_fourier_modes: usize,
    pub enc_width: usize,
    pub enc_depth: usize,
    pub msg_width: usize,
    pub msg_depth: usize,
    pub upd_width: usize,
    pub upd_depth: usize,
    pub gate_width: usize,
    pub gate_depth: usize,
    pub feat_width: usize,
    pub feat_depth: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub activation: Activation,
    /// Feed raw coordinates (instead of the periodic cos/sin embedding) to
    /// the encoder and the gate network. Strict-replication switch; the
    /// trunk always uses Fourier features on periodic axes.
    pub raw_positions: bool,
}

impl Default for ModelConfig {
    /// The reference small architecture: width 128 everywhere, encoder and
    /// processor nets of depth 2, decoder and trunk nets of depth 3, three
    /// message-passing steps.
    fn default() -> Self {
        ModelConfig {
            d_lat: 128,
            p: 128,
            m_steps: 3,
            k_bundle: 25,
            channels: 1,
            n_fourier_modes: 5,
            enc_width: 128,
            enc_depth: 2,
            msg_width: 128,
            msg_depth: 2,
            upd_width: 128,
            upd_depth: 2,
            gate_width: 128,
            gate_depth: 3,
            feat_width: 128,
            feat_depth: 3,
            trunk_width: 128,
            trunk_depth: 3,
            activation: Activation::Gelu,
            raw_positions: false,
        }
    }
}

impl ModelConfig {
    /// Compact configuration for desk-scale experiments.
    pub fn desk(d_lat: usize, p: usize, k_bundle: usize) -> Self {
        ModelConfig {
            d_lat,
            p,
            k_bundle,
            n_fourier_modes: 4,
            enc_width: d_lat,
            enc_depth: 2,
            msg_width: d_lat,
            msg_depth: 2,
            upd_width: d_lat,
            upd_depth: 2,
            gate_width: d_lat,
            gate_depth: 2,
            feat_width: d_lat,
            feat_depth: 2,
            trunk_width: d_lat,
            trunk_depth: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_lat", self.d_lat),
            ("p", self.p),
            ("m_steps", self.m_steps),
            ("k_bundle", self.k_bundle),
            ("channels", self.channels),
            ("enc_width", self.enc_width),
            ("enc_depth", self.enc_depth),
            ("msg_width", self.msg_width),
            ("msg_depth", self.msg_depth),
            ("upd_width", self.upd_width),
            ("upd_depth", self.upd_depth),
            ("gate_width", self.gate_width),
            ("gate_depth", self.gate_depth),
            ("feat_width", self.feat_width),
            ("feat_depth", self.feat_depth),
            ("trunk_width", self.trunk_width),
            ("trunk_depth", self.trunk_depth),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("config field {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Width of the position embedding fed to the encoder and gate nets:
/// cos/sin pair per periodic axis, raw coordinate per non-periodic axis.
pub(crate) fn pos_embed_dim(domain: &DomainSpec, raw: bool) -> usize {
    if raw {
        domain.dim()
    } else {
        domain.periodic().iter().map(|&p| if p { 2 } else { 1 }).sum()
    }
}

/// Embed absolute positions for the encoder/gate nets. Periodic coordinates
/// are reduced modulo the extent before the angle is taken, so congruent
/// positions produce bitwise-identical features.
pub(crate) fn pos_embedding<F: Scalar>(
    positions: &Array2<f64>,
    domain: &DomainSpec,
    raw: bool,
) -> Array2<F> {
    let n = positions.nrows();
    let dim = pos_embed_dim(domain, raw);
    let mut out = Array2::zeros((n, dim));
    for (i, row) in positions.rows().into_iter().enumerate() {
        let mut c = 0;
        for (axis, &x) in row.iter().enumerate() {
            if raw || !domain.periodic()[axis] {
                out[[i, c]] = F::from_f64(x);
                c += 1;
            } else {
                let l = domain.extent(axis);
                let ang = std::f64::consts::TAU * (x - domain.lower()[axis]).rem_euclid(l) / l;
                out[[i, c]] = F::from_f64(ang.cos());
                out[[i, c + 1]] = F::from_f64(ang.sin());
                c += 2;
            }
        }
    }
    out
}

/// Sensor graph prepared for network consumption: edge lists, edge features
/// and node position embeddings in the parameter dtype.
#[derive(Debug, Clone)]
pub struct GraphInput<F: Scalar> {
    n_nodes: usize,
    recv: Vec<usize>,
    send: Vec<usize>,
    rel_pos: Array2<F>,
    pos_embed: Array2<F>,
    positions: Array2<f64>,
    domain: DomainSpec,
}

impl<F: Scalar> GraphInput<F> {
    pub fn from_graph(graph: &SpatialGraph, raw_positions: bool) -> Self {
        let sensors = graph.sensors();
        let e = graph.n_edges();
        let d = sensors.dim();
        let mut rel_pos = Array2::zeros((e, d));
        for (i, r) in graph.rel_pos().rows().into_iter().enumerate() {
            for c in 0..d {
                rel_pos[[i, c]] = F::from_f64(r[c]);
            }
        }
        GraphInput {
            n_nodes: sensors.n(),
            recv: graph.edges().iter().map(|&(r, _)| r).collect(),
            send: graph.edges().iter().map(|&(_, s)| s).collect(),
            rel_pos,
            pos_embed: pos_embedding(sensors.positions(), sensors.domain(), raw_positions),
            positions: sensors.positions().clone(),
            domain: sensors.domain().clone(),
        }
    }

    /// Edge-free graph: message sums are empty, so the processor reduces to
    /// a pointwise update. Supports the masked-graph unit tests and
    /// single-node decoding.
    pub fn from_sensors(sensors: &SensorSet, raw_positions: bool) -> Self {
        GraphInput {
            n_nodes: sensors.n(),
            recv: Vec::new(),
            send: Vec::new(),
            rel_pos: Array2::zeros((0, sensors.dim())),
            pos_embed: pos_embedding(sensors.positions(), sensors.domain(), raw_positions),
            positions: sensors.positions().clone(),
            domain: sensors.domain().clone(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.recv.len()
    }

    pub fn recv(&self) -> &[usize] {
        &self.recv
    }

    pub fn send(&self) -> &[usize] {
        &self.send
    }

    pub fn rel_pos(&self) -> &Array2<F> {
        &self.rel_pos
    }

    pub fn pos_embed(&self) -> &Array2<F> {
        &self.pos_embed
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }
}
