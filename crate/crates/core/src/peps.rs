//! The PEPS weight grid, feature absorption and checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::features::{ConvParams, FeatureGrid, FeatureKind};
use crate::tensor::DenseTensor;

/// Virtual leg directions, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Leg {
    N,
    E,
    S,
    W,
}

pub const LEGS: [Leg; 4] = [Leg::N, Leg::E, Leg::S, Leg::W];

/// Sizes shared by a PEPS and everything derived from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// L
    pub side: usize,
    /// D
    pub bond: usize,
    /// d
    pub phys: usize,
    /// T
    pub labels: usize,
}

impl Geometry {
    pub fn new(side: usize, bond: usize, phys: usize, labels: usize) -> Result<Self> {
        for (name, v) in [("L", side), ("D", bond), ("d", phys), ("T", labels)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(Self {
            side,
            bond,
            phys,
            labels,
        })
    }

    pub fn center(&self) -> (usize, usize) {
        (self.side / 2, self.side / 2)
    }

    pub fn is_center(&self, i: usize, j: usize) -> bool {
        (i, j) == self.center()
    }

    pub fn sites(&self) -> usize {
        self.side * self.side
    }

    /// Virtual legs present at (i, j), in (N, E, S, W) order.
    pub fn legs(&self, i: usize, j: usize) -> Vec<Leg> {
        let last = self.side - 1;
        LEGS.into_iter()
            .filter(|leg| match leg {
                Leg::N => i > 0,
                Leg::E => j < last,
                Leg::S => i < last,
                Leg::W => j > 0,
            })
            .collect()
    }

    /// Stored shape: virtual legs, physical leg, then the label leg at the center.
    pub fn site_shape(&self, i: usize, j: usize) -> Vec<usize> {
        let mut shape = vec![self.bond; self.legs(i, j).len()];
        shape.push(self.phys);
        if self.is_center(i, j) {
            shape.push(self.labels);
        }
        shape
    }

    /// Shape after the physical leg is absorbed.
    pub fn absorbed_shape(&self, i: usize, j: usize) -> Vec<usize> {
        let mut shape = vec![self.bond; self.legs(i, j).len()];
        if self.is_center(i, j) {
            shape.push(self.labels);
        }
        shape
    }

    /// Absorbed shape with missing virtual legs re-inserted with extent 1,
    /// so every site is (N, E, S, W) or (N, E, S, W, T).
    pub fn padded_shape(&self, i: usize, j: usize) -> Vec<usize> {
        let legs = self.legs(i, j);
        let mut shape: Vec<usize> = LEGS
            .iter()
            .map(|l| if legs.contains(l) { self.bond } else { 1 })
            .collect();
        if self.is_center(i, j) {
            shape.push(self.labels);
        }
        shape
    }

    /// Number of stored PEPS entries.
    pub fn param_count(&self) -> usize {
        (0..self.side)
            .flat_map(|i| (0..self.side).map(move |j| (i, j)))
            .map(|(i, j)| self.site_shape(i, j).iter().product::<usize>())
            .sum()
    }
}

/// The trainable tensor grid, sites stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PepsGrid {
    geom: Geometry,
    tensors: Vec<DenseTensor>,
}

impl PepsGrid {
    /// Entries i.i.d. uniform in [0, 0.01).
    pub fn init(geom: Geometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = (0..geom.side)
            .flat_map(|i| (0..geom.side).map(move |j| (i, j)))
            .map(|(i, j)| {
                DenseTensor::from_fn(&geom.site_shape(i, j), |_| rng.gen_range(0.0..0.01))
            })
            .collect();
        Self { geom, tensors }
    }

    pub fn from_tensors(geom: Geometry, tensors: Vec<DenseTensor>) -> Result<Self> {
        if tensors.len() != geom.sites() {
            return Err(Error::dim(format!(
                "{} site tensors for a {}x{} grid",
                tensors.len(),
                geom.side,
                geom.side
            )));
        }
        for (k, t) in tensors.iter().enumerate() {
            let want = geom.site_shape(k / geom.side, k % geom.side);
            if t.shape() != want {
                return Err(Error::dim(format!(
                    "site ({}, {}) has shape {:?}, expected {want:?}",
                    k / geom.side,
                    k % geom.side,
                    t.shape()
                )));
            }
        }
        Ok(Self { geom, tensors })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn tensor(&self, i: usize, j: usize) -> &DenseTensor {
        &self.tensors[i * self.geom.side + j]
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    /// Replaces every site tensor; shapes must be unchanged.
    pub fn set_tensors(&mut self, tensors: Vec<DenseTensor>) -> Result<()> {
        *self = Self::from_tensors(self.geom, tensors)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(DenseTensor::len).sum()
    }

    pub fn min_entry(&self) -> f64 {
        self.entries().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.entries().fold(f64::NEG_INFINITY, f64::max)
    }

    fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    /// Records every site as a parameter leaf (or a constant).
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Replaces every entry by its absolute value.
pub fn apply_positivity(grid: PepsGrid) -> PepsGrid {
    PepsGrid {
        geom: grid.geom,
        tensors: grid.tensors.iter().map(|t| t.map(f64::abs)).collect(),
    }
}

/// Site tensors with physical legs contracted away, as tape nodes.
#[derive(Clone, Debug)]
pub struct AbsorbedGrid {
    pub geom: Geometry,
    /// Row-major; shapes follow `Geometry::absorbed_shape`.
    pub sites: Vec<NodeId>,
}

impl AbsorbedGrid {
    pub fn site(&self, i: usize, j: usize) -> NodeId {
        self.sites[i * self.geom.side + j]
    }
}

/// Contracts each site's physical leg with that site's feature vector.
pub fn absorb_features(
    tape: &mut Tape,
    geom: Geometry,
    sites: &[NodeId],
    features: &[NodeId],
) -> Result<AbsorbedGrid> {
    if sites.len() != geom.sites() || features.len() != geom.sites() {
        return Err(Error::dim(format!(
            "{} sites and {} feature vectors for a {}x{} grid",
            sites.len(),
            features.len(),
            geom.side,
            geom.side
        )));
    }
    let mut out = Vec::with_capacity(sites.len());
    for (k, (&t, &f)) in sites.iter().zip(features).enumerate() {
        let (i, j) = (k / geom.side, k % geom.side);
        let want = geom.site_shape(i, j);
        if tape.shape(t) != want || tape.shape(f) != [geom.phys] {
            return Err(Error::dim(format!(
                "site ({i}, {j}): tensor {:?} with feature {:?}, expected {want:?} with [{}]",
                tape.shape(t),
                tape.shape(f),
                geom.phys
            )));
        }
        let phys_axis = geom.legs(i, j).len();
        out.push(tape.contract(t, f, &[(phys_axis, 0)])?);
    }
    Ok(AbsorbedGrid { geom, sites: out })
}

/// Records a fixed feature grid as per-site constant vectors.
pub fn record_features(tape: &mut Tape, features: &FeatureGrid) -> Vec<NodeId> {
    (0..features.side())
        .flat_map(|i| (0..features.side()).map(move |j| (i, j)))
        .map(|(i, j)| tape.constant(DenseTensor::vector(features.vector(i, j).to_vec())))
        .collect()
}

/// A PEPS together with its feature map: everything a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub peps: PepsGrid,
    pub feature: FeatureKind,
    /// Present iff `feature` is `Conv`.
    pub conv: Option<ConvParams>,
    pub positivity: bool,
}

impl Model {
    pub fn new(
        peps: PepsGrid,
        feature: FeatureKind,
        conv: Option<ConvParams>,
        positivity: bool,
    ) -> Result<Self> {
        let g = peps.geometry();
        match (&conv, feature) {
            (None, FeatureKind::Product) => {}
            (Some(c), FeatureKind::Conv) if c.channels() == g.phys => {}
            _ => {
                return Err(Error::Config(format!(
                    "feature map {} does not fit a PEPS with d = {}",
                    feature.as_str(),
                    g.phys
                )))
            }
        }
        if feature == FeatureKind::Product && g.phys != feature.phys_dim() {
            return Err(Error::Config(format!(
                "product feature map needs d = 16, got {}",
                g.phys
            )));
        }
        Ok(Self {
            peps,
            feature,
            conv,
            positivity,
        })
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.peps.param_count() + self.conv.as_ref().map_or(0, ConvParams::param_count)
    }

    /// Trainable tensors: PEPS sites row-major, then conv kernels and biases.
    pub fn params(&self) -> Vec<DenseTensor> {
        let mut out = self.peps.tensors().to_vec();
        if let Some(c) = &self.conv {
            out.push(c.kernels.clone());
            out.push(c.biases.clone());
        }
        out
    }

    /// Inverse of `params`; shapes must be unchanged.
    pub fn set_params(&mut self, mut params: Vec<DenseTensor>) -> Result<()> {
        let want = self.peps.geometry().sites() + if self.conv.is_some() { 2 } else { 0 };
        if params.len() != want {
            return Err(Error::dim(format!(
                "{} parameter tensors, expected {want}",
                params.len()
            )));
        }
        let conv = match &self.conv {
            Some(c) => {
                let biases = params.pop().expect("length checked");
                let kernels = params.pop().expect("length checked");
                if kernels.shape() != c.kernels.shape() || biases.shape() != c.biases.shape() {
                    return Err(Error::dim("conv parameter shapes changed"));
                }
                Some(ConvParams { kernels, biases })
            }
            None => None,
        };
        self.peps = PepsGrid::from_tensors(self.peps.geometry(), params)?;
        self.conv = conv;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(self);
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes)
    }
}

const MAGIC: &[u8; 8] = b"PEPSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout, all integers u32 and floats f64, little-endian:
/// magic, version, L, D, d, T, center row, center col, positivity (u8),
/// feature kind (u8), then optional conv kernels and biases (rank, dims,
/// data each), then L*L sites as (rank, dims, data).
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let g = model.peps.geometry();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let (ci, cj) = g.center();
    for v in [
        CHECKPOINT_VERSION,
        g.side as u32,
        g.bond as u32,
        g.phys as u32,
        g.labels as u32,
        ci as u32,
        cj as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(u8::from(model.positivity));
    out.push(match model.feature {
        FeatureKind::Product => 0,
        FeatureKind::Conv => 1,
    });
    let put = |out: &mut Vec<u8>, t: &DenseTensor| {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &s in t.shape() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    if let Some(c) = &model.conv {
        put(&mut out, &c.kernels);
        put(&mut out, &c.biases);
    }
    for t in model.peps.tensors() {
        put(&mut out, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("checkpoint truncated, needed {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self, want: &[usize]) -> Result<DenseTensor> {
        let at = self.pos;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        if shape != want {
            return Err(Error::Version(format!(
                "tensor at byte {at} has shape {shape:?}, header implies {want:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DenseTensor::new(shape, data)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(0, "not a PEPS checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Version(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let (side, bond, phys, labels) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let geom =
        Geometry::new(side, bond, phys, labels).map_err(|e| Error::Version(e.to_string()))?;
    let center = (r.u32()?, r.u32()?);
    if center != geom.center() {
        return Err(Error::Version(format!(
            "label site {center:?} differs from {:?}",
            geom.center()
        )));
    }
    let positivity = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::format(r.pos - 1, format!("bad positivity flag {b}"))),
    };
    let feature = match r.u8()? {
        0 => FeatureKind::Product,
        1 => FeatureKind::Conv,
        b => return Err(Error::format(r.pos - 1, format!("bad feature kind {b}"))),
    };
    let conv = if feature == FeatureKind::Conv {
        let kernels = r.tensor(&[
            phys,
            crate::features::CONV_KERNEL,
            crate::features::CONV_KERNEL,
        ])?;
        let biases = r.tensor(&[phys])?;
        Some(ConvParams { kernels, biases })
    } else {
        None
    };
    let mut tensors = Vec::with_capacity(geom.sites());
    for i in 0..side {
        for j in 0..side {
            tensors.push(r.tensor(&geom.site_shape(i, j))?);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after the last site"));
    }
    let peps = PepsGrid::from_tensors(geom, tensors)?;
    Model::new(peps, feature, conv, positivity).map_err(|e| Error::Version(e.to_string()))
}
