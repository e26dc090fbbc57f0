//! Logits from an absorbed grid: exact summation for small grids and
//! boundary-MPS contraction with truncation for large ones.
//!
//! Every function records on the given tape, so gradients flow through the
//! QR and SVD steps. Intermediate tensors are divided by their largest
//! magnitude entry; the logarithms of those factors are carried separately
//! as `log_scale`, and the recorded scale factors are constants.

use crate::autodiff::{NodeId, Tape, DEFAULT_SVD_EPS};
use crate::error::{Error, Result};
use crate::peps::{AbsorbedGrid, Geometry, Leg};
use crate::tensor::DenseTensor;

/// Largest `D^L` accepted by `exact_contract`.
pub const EXACT_LIMIT: u128 = 1 << 20;

/// Logits as a tape node: true logit = value * exp(log_scale).
#[derive(Clone, Copy, Debug)]
pub struct LogitNode {
    pub values: NodeId,
    pub log_scale: f64,
}

/// Plain logits: true logit = value * exp(log_scale).
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
    pub log_scale: f64,
}

impl Logits {
    pub fn from_node(tape: &Tape, node: LogitNode) -> Self {
        Self {
            values: tape.value(node.values).to_vec(),
            log_scale: node.log_scale,
        }
    }

    /// `ln f` for each label. Non-positive scores map to `-inf` / NaN.
    pub fn log_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.ln() + self.log_scale)
            .collect()
    }

    /// The unscaled logits; may overflow or underflow.
    pub fn unscaled(&self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.values.iter().map(|v| v * s).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.log_scale.is_finite() && self.values.iter().all(|v| v.is_finite())
    }
}

/// Divides `x` by its largest magnitude entry; returns the new node and the
/// log of the factor. All-zero tensors are left alone.
pub fn normalize(tape: &mut Tape, x: NodeId) -> Result<(NodeId, f64)> {
    let m = tape.value(x).max_abs();
    if m == 0.0 || !m.is_finite() || m == 1.0 {
        return Ok((x, 0.0));
    }
    Ok((tape.scale(x, 1.0 / m)?, m.ln()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Bond {
    /// between (i, j) and (i, j + 1)
    H(usize, usize),
    /// between (i, j) and (i + 1, j)
    V(usize, usize),
    Label,
}

fn site_bonds(g: &Geometry, i: usize, j: usize) -> Vec<Bond> {
    let mut out: Vec<Bond> = g
        .legs(i, j)
        .into_iter()
        .map(|leg| match leg {
            Leg::N => Bond::V(i - 1, j),
            Leg::E => Bond::H(i, j),
            Leg::S => Bond::V(i, j),
            Leg::W => Bond::H(i, j - 1),
        })
        .collect();
    if g.is_center(i, j) {
        out.push(Bond::Label);
    }
    out
}

/// Exact sum over every virtual index, absorbing sites in row-major order.
pub fn exact_contract(tape: &mut Tape, grid: &AbsorbedGrid) -> Result<LogitNode> {
    let g = grid.geom;
    let cost = (g.bond as u128).checked_pow(g.side as u32);
    if cost.is_none_or(|c| c > EXACT_LIMIT) {
        return Err(Error::Capacity(format!(
            "exact contraction needs D^L = {}^{} <= 2^20",
            g.bond, g.side
        )));
    }
    let mut log_scale = 0.0;
    let mut env: Option<(NodeId, Vec<Bond>)> = None;
    for i in 0..g.side {
        for j in 0..g.side {
            let site = grid.site(i, j);
            let bonds = site_bonds(&g, i, j);
            let (node, legs) = match env.take() {
                None => (site, bonds),
                Some((e, elegs)) => {
                    let pairs: Vec<(usize, usize)> = elegs
                        .iter()
                        .enumerate()
                        .filter_map(|(k, b)| bonds.iter().position(|x| x == b).map(|s| (k, s)))
                        .collect();
                    let node = tape.contract(e, site, &pairs)?;
                    let mut legs: Vec<Bond> = elegs
                        .iter()
                        .filter(|b| !bonds.contains(b))
                        .copied()
                        .collect();
                    legs.extend(bonds.iter().filter(|b| !elegs.contains(b)));
                    (node, legs)
                }
            };
            let (node, ls) = normalize(tape, node)?;
            log_scale += ls;
            env = Some((node, legs));
        }
    }
    let (node, legs) = env.expect("grid has at least one site");
    debug_assert_eq!(legs, vec![Bond::Label]);
    Ok(LogitNode {
        values: node,
        log_scale,
    })
}

/// A row of rank-3 tensors (left, phys, right) with open end bonds of extent 1.
#[derive(Clone, Debug)]
pub struct BoundaryMps {
    pub sites: Vec<NodeId>,
    /// chi
    pub max_bond: usize,
    /// Represented vector = contraction of `sites` times exp(log_scale).
    pub log_scale: f64,
}

impl BoundaryMps {
    /// Product of (1, 1, 1) ones tensors: the empty boundary.
    pub fn trivial(tape: &mut Tape, len: usize, max_bond: usize) -> Self {
        let sites = (0..len)
            .map(|_| tape.constant(DenseTensor::ones(&[1, 1, 1])))
            .collect();
        Self {
            sites,
            max_bond,
            log_scale: 0.0,
        }
    }

    /// Wraps existing nodes after checking the bond chain.
    pub fn from_nodes(tape: &Tape, sites: Vec<NodeId>, max_bond: usize) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::arg("an MPS needs at least one site"));
        }
        let mut left = 1;
        for (k, &s) in sites.iter().enumerate() {
            let sh = tape.shape(s);
            if sh.len() != 3 || sh[0] != left {
                return Err(Error::dim(format!(
                    "MPS site {k} has shape {sh:?}, expected ({left}, p, r)"
                )));
            }
            left = sh[2];
        }
        if left != 1 {
            return Err(Error::dim("MPS right end bond must have extent 1"));
        }
        Ok(Self {
            sites,
            max_bond,
            log_scale: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Extents of the internal bonds.
    pub fn bond_dims(&self, tape: &Tape) -> Vec<usize> {
        self.sites[..self.len() - 1]
            .iter()
            .map(|&s| tape.shape(s)[2])
            .collect()
    }

    /// Dense vector over the physical legs, without the `log_scale` factor.
    pub fn to_dense(&self, tape: &Tape) -> DenseTensor {
        let mut acc = tape.value(self.sites[0]).clone();
        for &s in &self.sites[1..] {
            acc = crate::tensor::contract(&acc, tape.value(s), &[(acc.rank() - 1, 0)])
                .expect("chained bonds");
        }
        let phys: Vec<usize> = acc.shape()[1..acc.rank() - 1].to_vec();
        acc.reshape(&phys).expect("end bonds have extent 1")
    }
}

/// QR of site `j` as a left isometry; the triangular factor moves into `j + 1`.
fn shift_right(tape: &mut Tape, site: NodeId, next: NodeId) -> Result<(NodeId, NodeId)> {
    let sh = tape.shape(site).to_vec();
    let m = tape.reshape(site, &[sh[0] * sh[1], sh[2]])?;
    let (q, r) = tape.qr(m)?;
    let k = tape.shape(q)[1];
    let q = tape.reshape(q, &[sh[0], sh[1], k])?;
    let next = tape.contract(r, next, &[(1, 0)])?;
    Ok((q, next))
}

/// QR of site `j` as a right isometry; the triangular factor moves into `j - 1`.
fn shift_left(tape: &mut Tape, prev: NodeId, site: NodeId) -> Result<(NodeId, NodeId)> {
    let sh = tape.shape(site).to_vec();
    let t = tape.permute(site, &[1, 2, 0])?;
    let m = tape.reshape(t, &[sh[1] * sh[2], sh[0]])?;
    let (q, r) = tape.qr(m)?;
    let k = tape.shape(q)[1];
    let q = tape.reshape(q, &[sh[1], sh[2], k])?;
    let q = tape.permute(q, &[2, 0, 1])?;
    let prev = tape.contract(prev, r, &[(2, 1)])?;
    Ok((prev, q))
}

/// Brings the MPS into mixed canonical form about `center`: sites left of it
/// are left isometries, sites right of it are right isometries, and the
/// center tensor is divided by its largest entry.
pub fn canonicalize(tape: &mut Tape, mps: BoundaryMps, center: usize) -> Result<BoundaryMps> {
    let n = mps.len();
    if center >= n {
        return Err(Error::arg(format!(
            "canonical center {center} outside an MPS of length {n}"
        )));
    }
    let BoundaryMps {
        mut sites,
        max_bond,
        mut log_scale,
    } = mps;
    for j in 0..center {
        let (a, b) = shift_right(tape, sites[j], sites[j + 1])?;
        sites[j] = a;
        sites[j + 1] = b;
    }
    for j in (center + 1..n).rev() {
        let (a, b) = shift_left(tape, sites[j - 1], sites[j])?;
        sites[j - 1] = a;
        sites[j] = b;
    }
    let (c, ls) = normalize(tape, sites[center])?;
    sites[center] = c;
    log_scale += ls;
    Ok(BoundaryMps {
        sites,
        max_bond,
        log_scale,
    })
}

/// Result of absorbing one row.
#[derive(Clone, Debug)]
pub struct RowAbsorption {
    pub mps: BoundaryMps,
    /// Per internal bond: 2-norm of the dropped singular values over the
    /// 2-norm of all of them.
    pub discarded: Vec<f64>,
}

/// Absorbs a row of operators (in, east, out, west) into the MPS: the `in`
/// legs contract with the MPS physical legs and the `out` legs become the new
/// ones. The grown MPS is brought into right-canonical form, then a left to
/// right SVD sweep truncates every bond to at most `chi`.
pub fn apply_row(
    tape: &mut Tape,
    mps: BoundaryMps,
    row: &[NodeId],
    chi: usize,
    eps: f64,
) -> Result<RowAbsorption> {
    let n = mps.len();
    if row.len() != n {
        return Err(Error::dim(format!(
            "row of {} operators for an MPS of length {n}",
            row.len()
        )));
    }
    if chi == 0 {
        return Err(Error::arg("chi must be at least 1"));
    }
    let mut log_scale = mps.log_scale;
    let mut sites = Vec::with_capacity(n);
    for (j, (&s, &op)) in mps.sites.iter().zip(row).enumerate() {
        let (ms, os) = (tape.shape(s).to_vec(), tape.shape(op).to_vec());
        if os.len() != 4 || os[0] != ms[1] {
            return Err(Error::dim(format!(
                "operator {j} of shape {os:?} does not fit MPS site {ms:?}"
            )));
        }
        let t = tape.contract(s, op, &[(1, 0)])?;
        let t = tape.permute(t, &[0, 4, 3, 1, 2])?;
        let t = tape.reshape(t, &[ms[0] * os[3], os[2], ms[2] * os[1]])?;
        let (t, ls) = normalize(tape, t)?;
        log_scale += ls;
        sites.push(t);
    }
    let grown = BoundaryMps {
        sites,
        max_bond: chi,
        log_scale,
    };
    let BoundaryMps {
        mut sites,
        mut log_scale,
        ..
    } = canonicalize(tape, grown, 0)?;

    let mut discarded = Vec::with_capacity(n.saturating_sub(1));
    for j in 0..n - 1 {
        let sh = tape.shape(sites[j]).to_vec();
        let m = tape.reshape(sites[j], &[sh[0] * sh[1], sh[2]])?;
        let svd = tape.svd_truncated(m, chi, eps)?;
        let kept = tape.value(svd.s).norm();
        let total = kept.hypot(svd.discarded_weight);
        discarded.push(if total > 0.0 {
            svd.discarded_weight / total
        } else {
            0.0
        });
        let k = tape.shape(svd.s)[0];
        sites[j] = tape.reshape(svd.u, &[sh[0], sh[1], k])?;
        let ones = tape.constant(DenseTensor::ones(&[sh[2]]));
        let s_rows = tape.contract(svd.s, ones, &[])?;
        let sv = tape.mul(s_rows, svd.v)?;
        let next = tape.contract(sv, sites[j + 1], &[(1, 0)])?;
        let (next, ls) = normalize(tape, next)?;
        log_scale += ls;
        sites[j + 1] = next;
    }
    Ok(RowAbsorption {
        mps: BoundaryMps {
            sites,
            max_bond: chi,
            log_scale,
        },
        discarded,
    })
}

/// Settings for the boundary-MPS contraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractOptions {
    pub chi: usize,
    pub svd_eps: f64,
    /// Record each row absorption as a checkpoint segment, trading a second
    /// forward evaluation during backward for a smaller tape.
    pub checkpoint_rows: bool,
}

impl ContractOptions {
    pub fn new(chi: usize) -> Self {
        Self {
            chi,
            svd_eps: DEFAULT_SVD_EPS,
            checkpoint_rows: false,
        }
    }
}

fn absorb_row(
    tape: &mut Tape,
    mps: BoundaryMps,
    row: &[NodeId],
    opts: &ContractOptions,
) -> Result<BoundaryMps> {
    if !opts.checkpoint_rows || !tape.is_recording() {
        return Ok(apply_row(tape, mps, row, opts.chi, opts.svd_eps)?.mps);
    }
    let n = mps.len();
    let (chi, eps) = (opts.chi, opts.svd_eps);
    let inputs: Vec<NodeId> = mps.sites.iter().chain(row).copied().collect();
    let outs = tape.checkpoint(&inputs, move |t, ins| {
        let inner = BoundaryMps {
            sites: ins[..n].to_vec(),
            max_bond: chi,
            log_scale: 0.0,
        };
        let done = apply_row(t, inner, &ins[n..], chi, eps)?.mps;
        let mut out = done.sites;
        out.push(t.constant(DenseTensor::scalar(done.log_scale)));
        Ok(out)
    })?;
    Ok(BoundaryMps {
        sites: outs[..n].to_vec(),
        max_bond: chi,
        log_scale: mps.log_scale + tape.value(outs[n]).item(),
    })
}

/// Absorbed sites of row `i` reshaped to (N, E, S, W[, T]) with extent-1
/// placeholders for missing legs.
fn padded_row(tape: &mut Tape, grid: &AbsorbedGrid, i: usize) -> Result<Vec<NodeId>> {
    (0..grid.geom.side)
        .map(|j| {
            let shape = grid.geom.padded_shape(i, j);
            tape.reshape(grid.site(i, j), &shape)
        })
        .collect()
}

/// Boundary-MPS contraction: a top MPS absorbs rows above the label row
/// downward, a bottom MPS absorbs rows below it upward, and the remaining
/// three-layer strip is contracted column by column from the left.
pub fn bidirectional_contract(
    tape: &mut Tape,
    grid: &AbsorbedGrid,
    chi: usize,
) -> Result<LogitNode> {
    bidirectional_contract_with(tape, grid, &ContractOptions::new(chi))
}

pub fn bidirectional_contract_with(
    tape: &mut Tape,
    grid: &AbsorbedGrid,
    opts: &ContractOptions,
) -> Result<LogitNode> {
    let g = grid.geom;
    if opts.chi == 0 {
        return Err(Error::arg("chi must be at least 1"));
    }
    let (c, _) = g.center();
    let l = g.side;

    let mut top = BoundaryMps::trivial(tape, l, opts.chi);
    for i in 0..c {
        let row = padded_row(tape, grid, i)?;
        top = absorb_row(tape, top, &row, opts)?;
    }
    let mut bottom = BoundaryMps::trivial(tape, l, opts.chi);
    for i in (c + 1..l).rev() {
        let row = padded_row(tape, grid, i)?
            .into_iter()
            .map(|s| tape.permute(s, &[2, 1, 0, 3]))
            .collect::<Result<Vec<_>>>()?;
        bottom = absorb_row(tape, bottom, &row, opts)?;
    }

    let middle = padded_row(tape, grid, c)?;
    let mut log_scale = top.log_scale + bottom.log_scale;
    // env legs: (top bond, west bond, bottom bond, label)
    let mut env = tape.constant(DenseTensor::ones(&[1, 1, 1, 1]));
    #[allow(clippy::needless_range_loop)] // j also indexes the grid columns
    for j in 0..l {
        let e = tape.contract(env, top.sites[j], &[(0, 0)])?; // (w, b, lab, p, tr)
        let e = tape.contract(e, middle[j], &[(0, 3), (3, 0)])?; // (b, lab, tr, E, S[, T])
        let e = tape.contract(e, bottom.sites[j], &[(0, 0), (4, 1)])?; // (lab, tr, E[, T], br)
        let e = if g.is_center(c, j) {
            let sh = tape.shape(e).to_vec();
            let e = tape.permute(e, &[1, 2, 4, 0, 3])?;
            tape.reshape(e, &[sh[1], sh[2], sh[4], sh[0] * sh[3]])?
        } else {
            tape.permute(e, &[1, 2, 3, 0])?
        };
        let (e, ls) = normalize(tape, e)?;
        log_scale += ls;
        env = e;
    }
    let values = tape.reshape(env, &[g.labels])?;
    Ok(LogitNode { values, log_scale })
}

#[cfg(test)]
mod tests;
