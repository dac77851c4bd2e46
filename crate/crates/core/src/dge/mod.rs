//! Forward pass of the diffusion-gradient encoding block.
//!
//! ```text
//! Y   = F1(X)                       3×3×3 convolution, unit zero padding
//! E'  = F2(mean_spatial(Y)) + F3(E)  two independent MLPs
//! X'  = Y ⊙ E'                      E' broadcast over spatial positions
//! ```
//!
//! The initial embedding comes from the flattened 7×3 direction table
//! (b0 first) through one affine layer.

mod golden;
mod refine;

pub use golden::{decode_records, encode_records, read_records, write_records, Record};
pub use refine::{smoke_refine, RefineOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gradscheme::GradientScheme;

/// Row-major `(N, C, W, H, D)` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::DimensionMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        FeatureMap { shape, data: vec![0.0; shape.iter().product()] }
    }

    /// Standard-normal activations drawn from a seeded stream.
    pub fn random(shape: [usize; 5], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(shape, data)
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Contiguous spatial block of batch `n`, channel `c`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let s = self.spatial_len();
        let off = (n * self.shape[1] + c) * s;
        &self.data[off..off + s]
    }

    fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let s = self.spatial_len();
        let off = (n * self.shape[1] + c) * s;
        &mut self.data[off..off + s]
    }
}

/// Row-major `(N, C)` embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEmbedding {
    pub batch: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GradientEmbedding {
    pub fn new(batch: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || channels == 0 || data.len() != batch * channels {
            return Err(Error::DimensionMismatch(format!("{} values for ({batch}, {channels})", data.len())));
        }
        Ok(GradientEmbedding { batch, channels, data })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }
}

/// Fully connected layer, weights `out × in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Affine { in_dim, out_dim, weight, bias }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }
}

/// `output(max(0, hidden(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Affine,
    pub output: Affine,
}

impl Mlp {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.hidden.apply(x).into_iter().map(|v| v.max(0.0)).collect();
        self.output.apply(&h)
    }
}

/// Width of the flattened direction table fed to the input embedding.
pub const EMBED_INPUT: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct DgeParams {
    pub channels: usize,
    /// `(C_out, C_in, 3, 3, 3)` row-major.
    pub conv_weight: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub f2: Mlp,
    pub f3: Mlp,
    pub embed_in: Affine,
}

impl DgeParams {
    /// Uniform `±1/√fan_in` initialization from a seed.
    pub fn seeded(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("channel count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = channels * 27;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let conv_weight = (0..channels * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        let conv_bias = (0..channels).map(|_| rng.random_range(-bound..bound)).collect();
        let mlp = |rng: &mut ChaCha8Rng| Mlp {
            hidden: Affine::seeded(channels, channels, rng),
            output: Affine::seeded(channels, channels, rng),
        };
        let f2 = mlp(&mut rng);
        let f3 = mlp(&mut rng);
        let embed_in = Affine::seeded(EMBED_INPUT, channels, &mut rng);
        Ok(DgeParams { channels, conv_weight, conv_bias, f2, f3, embed_in })
    }

    /// Zeroes the last layers of F2 and F3, which forces `E' = 0`.
    pub fn zero_final_layers(&mut self) {
        self.f2.output.zero();
        self.f3.output.zero();
    }

    /// Parameter tensors in a fixed order, for golden files.
    pub fn to_records(&self) -> Vec<Record> {
        let c = self.channels;
        let aff = |a: &Affine| {
            vec![
                Record { dims: vec![a.out_dim, a.in_dim], data: a.weight.clone() },
                Record { dims: vec![a.out_dim], data: a.bias.clone() },
            ]
        };
        let mut out = vec![
            Record { dims: vec![c, c, 3, 3, 3], data: self.conv_weight.clone() },
            Record { dims: vec![c], data: self.conv_bias.clone() },
        ];
        for a in [&self.f2.hidden, &self.f2.output, &self.f3.hidden, &self.f3.output, &self.embed_in] {
            out.extend(aff(a));
        }
        out
    }
}

/// 3×3×3 cross-correlation with unit zero padding (`F1`).
pub fn conv3d(x: &FeatureMap, p: &DgeParams) -> Result<FeatureMap> {
    let [n, c, w, h, d] = x.shape;
    if c != p.channels {
        return Err(Error::DimensionMismatch(format!("{c} input channels, block has {}", p.channels)));
    }
    let mut y = FeatureMap::zeros(x.shape);
    for b in 0..n {
        for o in 0..c {
            let out = y.channel_mut(b, o);
            out.fill(p.conv_bias[o]);
            for i in 0..c {
                let src = x.channel(b, i);
                let kernel = &p.conv_weight[(o * c + i) * 27..(o * c + i + 1) * 27];
                for xi in 0..w {
                    for yi in 0..h {
                        for zi in 0..d {
                            let mut acc = 0.0;
                            for (t, kw) in kernel.iter().enumerate() {
                                let (dx, dy, dz) = (t / 9, (t / 3) % 3, t % 3);
                                let (sx, sy, sz) = (xi + dx, yi + dy, zi + dz);
                                if sx == 0 || sy == 0 || sz == 0 || sx > w || sy > h || sz > d {
                                    continue;
                                }
                                acc += kw * src[((sx - 1) * h + (sy - 1)) * d + (sz - 1)];
                            }
                            out[(xi * h + yi) * d + zi] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Spatial average per `(n, c)`.
pub fn global_average_pool(y: &FeatureMap) -> GradientEmbedding {
    let [n, c, ..] = y.shape;
    let s = y.spatial_len() as f64;
    let mut data = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            data.push(y.channel(b, ch).iter().sum::<f64>() / s);
        }
    }
    GradientEmbedding { batch: n, channels: c, data }
}

/// Channel-wise product `Y ⊙ E`.
pub fn recalibrate(y: &FeatureMap, e: &GradientEmbedding) -> Result<FeatureMap> {
    if y.shape[0] != e.batch || y.shape[1] != e.channels {
        return Err(Error::DimensionMismatch(format!(
            "feature map {:?} vs embedding ({}, {})",
            y.shape, e.batch, e.channels
        )));
    }
    let mut out = y.clone();
    for b in 0..e.batch {
        for c in 0..e.channels {
            let s = e.row(b)[c];
            out.channel_mut(b, c).iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(out)
}

/// Embeds a batch of 7-entry gradient tables (b0 first).
pub fn embed_bvecs(schemes: &[GradientScheme], p: &DgeParams) -> Result<GradientEmbedding> {
    if schemes.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut data = Vec::with_capacity(schemes.len() * p.channels);
    for s in schemes {
        if s.len() != 7 {
            return Err(Error::InvalidScheme(format!("embedding needs 7 entries, got {}", s.len())));
        }
        if !s.entries()[0].is_b0() {
            return Err(Error::InvalidScheme("first entry must be the b0 volume".into()));
        }
        let flat: Vec<f64> = s.entries().iter().flat_map(|e| e.bvec).collect();
        data.extend(p.embed_in.apply(&flat));
    }
    GradientEmbedding::new(schemes.len(), p.channels, data)
}

/// One DGE block: returns `(X', E')`.
pub fn dge_forward(x: &FeatureMap, e: &GradientEmbedding, p: &DgeParams) -> Result<(FeatureMap, GradientEmbedding)> {
    let [n, c, w, h, d] = x.shape;
    if e.batch != n || e.channels != c || c != p.channels {
        return Err(Error::DimensionMismatch(format!(
            "input {:?}, embedding ({}, {}), block channels {}",
            x.shape, e.batch, e.channels, p.channels
        )));
    }
    if w < 3 || h < 3 || d < 3 {
        return Err(Error::DimensionMismatch(format!("spatial extents must be >= 3, got {:?}", &x.shape[2..])));
    }
    if !x.data.iter().chain(&e.data).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("DGE input".into()));
    }
    let y = conv3d(x, p)?;
    let pooled = global_average_pool(&y);
    let mut next = Vec::with_capacity(n * c);
    for b in 0..n {
        let from_x = p.f2.apply(pooled.row(b));
        let from_e = p.f3.apply(e.row(b));
        next.extend(from_x.iter().zip(&from_e).map(|(a, b)| a + b));
    }
    let e_next = GradientEmbedding::new(n, c, next)?;
    let x_next = recalibrate(&y, &e_next)?;
    Ok((x_next, e_next))
}
