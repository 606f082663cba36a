//! Spatial domains, sensor point clouds and k-NN graph construction.
//!
//! Distances on periodic axes use the minimum-image convention: the
//! displacement component along a periodic axis of extent `L` is wrapped
//! into `[-L/2, L/2)`. Non-periodic axes use the plain difference.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A bounded axis-aligned box domain, with per-axis periodicity flags.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    periodic: Vec<bool>,
}

impl DomainSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, periodic: Vec<bool>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != periodic.len() {
            return Err(Error::invalid(format!(
                "domain field lengths disagree: lower {}, upper {}, periodic {}",
                lower.len(),
                upper.len(),
                periodic.len()
            )));
        }
        if lower.is_empty() {
            return Err(Error::invalid("domain dimension must be at least 1"));
        }
        for i in 0..lower.len() {
            let ext = upper[i] - lower[i];
            if !(ext.is_finite() && ext > 0.0) {
                return Err(Error::invalid(format!(
                    "axis {i}: extent must be finite and positive, got [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(DomainSpec { lower, upper, periodic })
    }

    /// 1D periodic interval `[lo, hi)`.
    pub fn periodic_interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi], vec![true])
    }

    /// 1D non-periodic interval.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi], vec![false])
    }

    /// Square 2D box with uniform periodicity.
    pub fn square(lo: f64, hi: f64, periodic: bool) -> Result<Self> {
        Self::new(vec![lo, lo], vec![hi, hi], vec![periodic, periodic])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    /// Extent `upper - lower` along one axis.
    pub fn extent(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// True when the point lies in `[lower, upper)` componentwise.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, &xi)| xi >= self.lower[i] && xi < self.upper[i])
    }

    /// Wrap a coordinate along a periodic axis into `[lower, upper)`.
    /// Non-periodic axes are returned unchanged.
    pub fn wrap_coord(&self, axis: usize, x: f64) -> f64 {
        if self.periodic[axis] {
            self.lower[axis] + (x - self.lower[axis]).rem_euclid(self.extent(axis))
        } else {
            x
        }
    }
}

/// Displacement `xi - xj` with the minimum-image convention applied on
/// periodic axes: each periodic component is wrapped into `[-L/2, L/2)`.
pub fn minimum_image_displacement(xi: &[f64], xj: &[f64], domain: &DomainSpec) -> Result<Vec<f64>> {
    if xi.len() != domain.dim() || xj.len() != domain.dim() {
        return Err(Error::invalid(format!(
            "displacement dimension mismatch: xi {}, xj {}, domain {}",
            xi.len(),
            xj.len(),
            domain.dim()
        )));
    }
    let mut out = Vec::with_capacity(domain.dim());
    for c in 0..domain.dim() {
        let r = xi[c] - xj[c];
        if domain.periodic()[c] {
            let l = domain.extent(c);
            out.push((r + 0.5 * l).rem_euclid(l) - 0.5 * l);
        } else {
            out.push(r);
        }
    }
    Ok(out)
}

/// Squared minimum-image distance between two points.
pub fn wrapped_distance_sq(xi: &[f64], xj: &[f64], domain: &DomainSpec) -> Result<f64> {
    let d = minimum_image_displacement(xi, xj, domain)?;
    Ok(d.iter().map(|v| v * v).sum())
}

/// A set of `N` distinct sensor positions inside a domain.
#[derive(Debug, Clone)]
pub struct SensorSet {
    positions: Array2<f64>,
    domain: DomainSpec,
}

impl SensorSet {
    pub fn new(positions: Array2<f64>, domain: DomainSpec) -> Result<Self> {
        let (n, d) = positions.dim();
        if d != domain.dim() {
            return Err(Error::invalid(format!(
                "sensor dimension {d} does not match domain dimension {}",
                domain.dim()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("sensor set must be non-empty"));
        }
        for (i, row) in positions.rows().into_iter().enumerate() {
            let p = row.as_slice().expect("contiguous row");
            if !domain.contains(p) {
                return Err(Error::invalid(format!(
                    "sensor {i} at {p:?} lies outside [lower, upper)"
                )));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if positions.row(i) == positions.row(j) {
                    return Err(Error::invalid(format!("sensors {i} and {j} coincide")));
                }
            }
        }
        Ok(SensorSet { positions, domain })
    }

    /// Uniform product grid with `counts[a]` points along axis `a`, placed at
    /// `lower + i * extent / counts` (the upper face is excluded, so points
    /// satisfy the `[lower, upper)` invariant and tile periodic axes evenly).
    pub fn uniform_grid(domain: DomainSpec, counts: &[usize]) -> Result<Self> {
        if counts.len() != domain.dim() {
            return Err(Error::invalid("counts length must equal domain dimension"));
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("grid counts must be positive"));
        }
        let n: usize = counts.iter().product();
        let d = domain.dim();
        let mut pos = Array2::zeros((n, d));
        for flat in 0..n {
            let mut rem = flat;
            for axis in (0..d).rev() {
                let idx = rem % counts[axis];
                rem /= counts[axis];
                pos[[flat, axis]] =
                    domain.lower()[axis] + idx as f64 * domain.extent(axis) / counts[axis] as f64;
            }
        }
        SensorSet::new(pos, domain)
    }

    pub fn n(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Vec<f64> {
        self.positions.row(i).to_vec()
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    /// Reorder sensors by a permutation (`perm[new] = old`). Test helper for
    /// permutation-equivariance checks; preserves the domain.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::invalid("permutation length must equal N"));
        }
        let mut pos = Array2::zeros((self.n(), self.dim()));
        for (new, &old) in perm.iter().enumerate() {
            pos.row_mut(new).assign(&self.positions.row(old));
        }
        SensorSet::new(pos, self.domain.clone())
    }
}

/// Select `n_select` sensors without replacement from a uniform candidate
/// grid of `n_candidates` points. For 2D domains `n_candidates` must be a
/// perfect square (the grid is `sqrt(n) x sqrt(n)`). Deterministic given the
/// seed; selected indices are returned in grid order.
pub fn sample_irregular_sensors(
    domain: &DomainSpec,
    n_candidates: usize,
    n_select: usize,
    seed: u64,
) -> Result<SensorSet> {
    if n_select > n_candidates {
        return Err(Error::invalid(format!(
            "cannot select {n_select} sensors from {n_candidates} candidates"
        )));
    }
    if n_select == 0 {
        return Err(Error::invalid("n_select must be positive"));
    }
    let d = domain.dim();
    let per_axis = match d {
        1 => n_candidates,
        _ => {
            let root = (n_candidates as f64).powf(1.0 / d as f64).round() as usize;
            if root.pow(d as u32) != n_candidates {
                return Err(Error::invalid(format!(
                    "n_candidates = {n_candidates} is not a {d}-th power"
                )));
            }
            root
        }
    };
    let candidates = SensorSet::uniform_grid(domain.clone(), &vec![per_axis; d])?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, n_candidates, n_select).into_vec();
    chosen.sort_unstable();

    let mut pos = Array2::zeros((n_select, d));
    for (row, &idx) in chosen.iter().enumerate() {
        pos.row_mut(row).assign(&candidates.positions().row(idx));
    }
    SensorSet::new(pos, domain.clone())
}

/// Directed k-NN graph over a sensor set.
///
/// Edge `(i, j)` means "node j sends a message to node i"; every node has
/// exactly `k` incoming edges from its `k` nearest distinct neighbors under
/// the minimum-image metric. `rel_pos` stores the receiver-minus-sender
/// displacement `x_i - x_j` per edge.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    sensors: SensorSet,
    k: usize,
    edges: Vec<(usize, usize)>,
    rel_pos: Array2<f64>,
}

/// Paper-default neighbor count: 6 in 1D, 8 in 2D and above.
pub fn default_k(dim: usize) -> usize {
    if dim == 1 {
        6
    } else {
        8
    }
}

/// Build the k-NN graph. Ties in distance are broken by the lower node
/// index, which makes the construction deterministic.
pub fn build_knn_graph(sensors: &SensorSet, k: usize) -> Result<SpatialGraph> {
    let n = sensors.n();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if n <= k {
        return Err(Error::invalid(format!(
            "k-NN graph needs more nodes than neighbors: N = {n}, k = {k}"
        )));
    }
    let domain = sensors.domain();
    let mut edges = Vec::with_capacity(n * k);
    let mut rel = Array2::zeros((n * k, sensors.dim()));
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let xi = sensors.position(i);
        dists.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d2 = wrapped_distance_sq(&xi, &sensors.position(j), domain)?;
            dists.push((d2, j));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in dists.iter().take(k) {
            let e = edges.len();
            let dis = minimum_image_displacement(&xi, &sensors.position(j), domain)?;
            rel.row_mut(e).assign(&Array1::from_vec(dis));
            edges.push((i, j));
        }
    }
    Ok(SpatialGraph { sensors: sensors.clone(), k, edges, rel_pos: rel })
}

impl SpatialGraph {
    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_nodes(&self) -> usize {
        self.sensors.n()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge list as (receiver, sender) pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Per-edge displacement `x_receiver - x_sender` (minimum image).
    pub fn rel_pos(&self) -> &Array2<f64> {
        &self.rel_pos
    }

    /// Incoming neighbor set of node `i`, sorted ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter(|(r, _)| *r == i)
            .map(|(_, s)| *s)
            .collect();
        out.sort_unstable();
        out
    }

    /// Relabel nodes by a permutation (`perm[new] = old`), keeping the edge
    /// set geometrically identical. Used by permutation-invariance tests.
    pub fn permuted(&self, perm: &[usize]) -> Result<SpatialGraph> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(Error::invalid("permutation length must equal N"));
        }
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let sensors = self.sensors.permuted(perm)?;
        // Keep edges grouped by receiver so the k-incoming invariant stays
        // visible; order within a group follows the original ordering.
        let mut order: Vec<usize> = (0..self.edges.len()).collect();
        order.sort_by_key(|&e| (inv[self.edges[e].0], e));
        let mut edges = Vec::with_capacity(self.edges.len());
        let mut rel = Array2::zeros(self.rel_pos.dim());
        for (new_e, &e) in order.iter().enumerate() {
            let (r, s) = self.edges[e];
            edges.push((inv[r], inv[s]));
            rel.row_mut(new_e).assign(&self.rel_pos.row(e));
        }
        Ok(SpatialGraph { sensors, k: self.k, edges, rel_pos: rel })
    }
}
