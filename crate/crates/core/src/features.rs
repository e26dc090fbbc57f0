//! Feature maps lifting an image onto an L x L grid of local vectors.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Square grayscale image with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::dim(format!(
                "{} pixels for a {side}x{side} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self { side, pixels })
    }

    /// Raw 8-bit intensities, scaled by 1/255.
    pub fn from_bytes(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(side, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    /// Intensity at (row, col), zero outside the image.
    fn padded(&self, row: isize, col: isize) -> f64 {
        if row < 0 || col < 0 || row as usize >= self.side || col as usize >= self.side {
            0.0
        } else {
            self.get(row as usize, col as usize)
        }
    }
}

/// L x L grid of d-dimensional feature vectors, stored row-major by site.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    side: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(side: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || dim == 0 || data.len() != side * side * dim {
            return Err(Error::dim(format!(
                "{} values for a {side}x{side} grid of {dim}-vectors",
                data.len()
            )));
        }
        Ok(Self { side, dim, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_tensor(&self) -> DenseTensor {
        DenseTensor::from_parts(vec![self.side, self.side, self.dim], self.data.clone())
    }

    /// Multiplies the vector at one site by `c`.
    pub fn scale_site(&mut self, row: usize, col: usize, c: f64) {
        let start = (row * self.side + col) * self.dim;
        self.data[start..start + self.dim]
            .iter_mut()
            .for_each(|x| *x *= c);
    }
}

/// Which feature map feeds the PEPS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Fixed cos/sin embedding with 2x2 blocking (d = 16).
    Product,
    /// Trainable 5x5 convolution, ReLU and 2x2 max pooling (d = channels).
    Conv,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Product => "product",
            FeatureKind::Conv => "conv",
        }
    }

    /// Physical dimension produced by this map.
    pub fn phys_dim(self) -> usize {
        match self {
            FeatureKind::Product => 16,
            FeatureKind::Conv => CONV_CHANNELS,
        }
    }

    /// Grid side for an image of side `image_side`.
    pub fn grid_side(self, image_side: usize) -> usize {
        image_side.div_ceil(2)
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(FeatureKind::Product),
            "conv" => Ok(FeatureKind::Conv),
            other => Err(Error::Config(format!(
                "unknown feature map `{other}` (expected product or conv)"
            ))),
        }
    }
}

/// `(cos(pi x / 2), sin(pi x / 2))`.
pub fn pixel_embed(x: f64) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::arg(format!("pixel {x} outside [0, 1]")));
    }
    let a = FRAC_PI_2 * x;
    Ok([a.cos(), a.sin()])
}

/// Kronecker product of the pixel embeddings of a 2x2 block given in
/// row-major order (NW, NE, SW, SE).
pub fn block_embed(block: &[f64]) -> Result<Vec<f64>> {
    if block.len() != 4 {
        return Err(Error::arg(format!(
            "block of {} pixels, expected 4",
            block.len()
        )));
    }
    let mut out = vec![1.0];
    for &x in block {
        let e = pixel_embed(x)?;
        out = out.iter().flat_map(|&o| [o * e[0], o * e[1]]).collect();
    }
    Ok(out)
}

/// Product-state map with 2x2 blocking: site (i, j) embeds pixels
/// {2i, 2i+1} x {2j, 2j+1}. Odd sides are padded with black pixels.
pub fn product_state_map(img: &Image) -> FeatureGrid {
    let side = img.side().div_ceil(2);
    let mut data = Vec::with_capacity(side * side * 16);
    for i in 0..side {
        for j in 0..side {
            let (r, c) = (2 * i as isize, 2 * j as isize);
            let block = [
                img.padded(r, c),
                img.padded(r, c + 1),
                img.padded(r + 1, c),
                img.padded(r + 1, c + 1),
            ];
            data.extend(block_embed(&block).expect("image pixels are in range"));
        }
    }
    FeatureGrid {
        side,
        dim: 16,
        data,
    }
}

pub const CONV_CHANNELS: usize = 10;
pub const CONV_KERNEL: usize = 5;
pub const CONV_PAD: usize = 2;

/// Weights of the single convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// (channels, 5, 5)
    pub kernels: DenseTensor,
    /// (channels)
    pub biases: DenseTensor,
}

impl ConvParams {
    /// Uniform in [-s, s] with s = 1/sqrt(fan-in) for kernels and biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / ((CONV_KERNEL * CONV_KERNEL) as f64).sqrt();
        let kernels = DenseTensor::from_fn(&[CONV_CHANNELS, CONV_KERNEL, CONV_KERNEL], |_| {
            rng.gen_range(-s..=s)
        });
        let biases = DenseTensor::from_fn(&[CONV_CHANNELS], |_| rng.gen_range(-s..=s));
        Self { kernels, biases }
    }

    pub fn channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }
}

/// Image patches for a stride-1, pad-2 5x5 convolution: (side*side, 25).
fn im2col(img: &Image) -> DenseTensor {
    let side = img.side();
    let k = CONV_KERNEL;
    let pad = CONV_PAD as isize;
    let mut data = Vec::with_capacity(side * side * k * k);
    for r in 0..side as isize {
        for c in 0..side as isize {
            for dr in 0..k as isize {
                for dc in 0..k as isize {
                    data.push(img.padded(r + dr - pad, c + dc - pad));
                }
            }
        }
    }
    DenseTensor::from_parts(vec![side * side, k * k], data)
}

/// Records conv -> ReLU -> 2x2 max pool on the tape; returns an
/// (side/2, side/2, channels) node. `kernels` is (channels, 5, 5) and
/// `biases` is (channels).
pub fn conv_feature_map_on(
    tape: &mut Tape,
    img: &Image,
    kernels: NodeId,
    biases: NodeId,
) -> Result<NodeId> {
    let side = img.side();
    if !side.is_multiple_of(2) {
        return Err(Error::dim(format!(
            "conv feature map needs an even image side, got {side}"
        )));
    }
    let kshape = tape.shape(kernels).to_vec();
    let channels = kshape[0];
    if kshape[1..] != [CONV_KERNEL, CONV_KERNEL] || tape.shape(biases) != [channels] {
        return Err(Error::dim(format!(
            "conv params of shapes {kshape:?} and {:?}",
            tape.shape(biases)
        )));
    }
    let patches = tape.constant(im2col(img));
    let flat_k = tape.reshape(kernels, &[channels, CONV_KERNEL * CONV_KERNEL])?;
    let pre = tape.contract(patches, flat_k, &[(1, 1)])?;
    let ones = tape.constant(DenseTensor::ones(&[side * side]));
    let bias = tape.contract(ones, biases, &[])?;
    let pre = tape.add(pre, bias)?;
    let pre = tape.reshape(pre, &[side, side, channels])?;
    let act = tape.relu(pre)?;
    tape.max_pool2(act)
}

/// Plain evaluation of the convolution feature map.
pub fn conv_feature_map(img: &Image, params: &ConvParams) -> Result<FeatureGrid> {
    let mut tape = Tape::inference();
    let k = tape.constant(params.kernels.clone());
    let b = tape.constant(params.biases.clone());
    let out = conv_feature_map_on(&mut tape, img, k, b)?;
    let t = tape.value(out);
    FeatureGrid::new(t.shape()[0], t.shape()[2], t.to_vec())
}

/// Splits an (L, L, d) feature node into one d-vector node per site, in
/// row-major site order, by contracting with one-hot selectors.
pub fn site_vectors(tape: &mut Tape, grid: NodeId) -> Result<Vec<NodeId>> {
    let shape = tape.shape(grid).to_vec();
    let &[rows, cols, _] = shape.as_slice() else {
        return Err(Error::arg(format!("feature grid node of shape {shape:?}")));
    };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let ei = tape.constant(DenseTensor::from_fn(&[rows], |k| {
            f64::from(u8::from(k[0] == i))
        }));
        let row = tape.contract(grid, ei, &[(0, 0)])?;
        for j in 0..cols {
            let ej = tape.constant(DenseTensor::from_fn(&[cols], |k| {
                f64::from(u8::from(k[0] == j))
            }));
            out.push(tape.contract(row, ej, &[(0, 0)])?);
        }
    }
    Ok(out)
}
