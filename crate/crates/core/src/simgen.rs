//! Latent factor simulation model.
//!
//! Every block gets a covariance `Σ = S + (‖S‖_F / (η‖E‖_F)) E` with
//! `S = w w^T / ‖w‖⁴` and `E = P T T^T P`, `P` the projector onto the
//! orthogonal of `w`, so that `w^T Σ w = 1`. Samples are drawn as
//! `x_l | z ~ N(a_l z, Σ_l − a_l a_l^T)` with `a_l = ρ_l Σ_l w_l` and a
//! shared `z ~ N(0, 1)`.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_tensor;
use crate::linalg::{orthonormalize, sym_eigen, truncated_svd};
use crate::model::BlockSet;
use crate::tensor::{CpVector, DenseTensor};

/// Relative singular-value cutoff used to read off the rank of a 2-mode shape.
pub const SHAPE_RANK_TOL: f64 = 1e-10;

/// Parametric canonical-vector (or structured noise) shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    /// Indicator of a box, one half-open `[start, end)` range per mode. Rank 1.
    Rect { dims: Vec<usize>, ranges: Vec<[usize; 2]> },
    /// A horizontal and a vertical bar of the given thickness, each stopping
    /// `margin` short of the border; the overlap counts twice. Rank 2.
    Cross { dims: [usize; 2], thickness: usize, margin: usize },
    /// Ones on `|i - j| < width`.
    DiagBand { dims: [usize; 2], width: usize },
    /// Random orthonormal factors with decreasing weights.
    Random { dims: Vec<usize>, rank: usize },
    /// A tensor file with one or two modes.
    File { path: PathBuf },
}

/// A built shape: the folded tensor and an exact CP decomposition of it.
#[derive(Debug, Clone)]
pub struct Shape {
    pub mask: DenseTensor,
    pub cp: CpVector,
}

/// Default parameters for a named shape on the given dims.
pub fn builtin_shape(name: &str, dims: &[usize]) -> Result<ShapeSpec> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad shape dims {dims:?}")));
    }
    let two = || -> Result<[usize; 2]> {
        match dims {
            [a, b] => Ok([*a, *b]),
            _ => Err(Error::InvalidArgument(format!("shape {name} needs two modes, got {dims:?}"))),
        }
    };
    match name {
        "rect" => Ok(ShapeSpec::Rect {
            dims: dims.to_vec(),
            ranges: dims.iter().map(|&p| [p / 4, (p - p / 4).max(p / 4 + 1)]).collect(),
        }),
        "cross" => {
            let d = two()?;
            let small = d[0].min(d[1]);
            Ok(ShapeSpec::Cross {
                dims: d,
                thickness: (small / 5).max(1),
                margin: small / 10,
            })
        }
        "diag_band" => {
            let d = two()?;
            Ok(ShapeSpec::DiagBand {
                dims: d,
                width: (d[0].min(d[1]) / 6).max(2),
            })
        }
        "random" | "vector" => Ok(ShapeSpec::Random {
            dims: dims.to_vec(),
            rank: 1,
        }),
        other => Err(Error::InvalidArgument(format!("unknown shape {other:?}"))),
    }
}

fn indicator(p: usize, range: [usize; 2]) -> DVector<f64> {
    DVector::from_fn(p, |i, _| if i >= range[0] && i < range[1] { 1.0 } else { 0.0 })
}

/// Orthogonal CP of a matrix shape through its SVD, truncated at its numerical rank.
fn matrix_cp(m: &DMatrix<f64>) -> Result<CpVector> {
    let full = truncated_svd(m, m.nrows().min(m.ncols()))?;
    let top = full.singular[0];
    if top == 0.0 {
        return Err(Error::InvalidArgument("shape is identically zero".into()));
    }
    let k = full.singular.iter().filter(|&&s| s > SHAPE_RANK_TOL * top).count();
    CpVector::new(
        full.singular.rows(0, k).into_owned(),
        vec![full.left.columns(0, k).into_owned(), full.right.columns(0, k).into_owned()],
    )
}

fn from_matrix(m: DMatrix<f64>) -> Result<Shape> {
    let cp = matrix_cp(&m)?;
    let mask = DenseTensor::new(vec![m.nrows(), m.ncols()], m.as_slice().to_vec())?;
    Ok(Shape { mask, cp })
}

fn from_cp(cp: CpVector) -> Result<Shape> {
    let mask = DenseTensor::fold(cp.reconstruct().as_slice(), &cp.dims())?;
    Ok(Shape { mask, cp })
}

impl ShapeSpec {
    /// Variable dims, when known without reading a file.
    pub fn dims(&self) -> Option<Vec<usize>> {
        match self {
            ShapeSpec::Rect { dims, .. } | ShapeSpec::Random { dims, .. } => Some(dims.clone()),
            ShapeSpec::Cross { dims, .. } | ShapeSpec::DiagBand { dims, .. } => Some(dims.to_vec()),
            ShapeSpec::File { .. } => None,
        }
    }

    /// `rng` is only consumed by random shapes.
    pub fn build(&self, rng: &mut impl Rng) -> Result<Shape> {
        match self {
            ShapeSpec::Rect { dims, ranges } => {
                if dims.is_empty() || ranges.len() != dims.len() {
                    return Err(Error::InvalidArgument(format!(
                        "rect needs one range per mode: dims {dims:?}, ranges {ranges:?}"
                    )));
                }
                let mut factors = Vec::with_capacity(dims.len());
                let mut weight = 1.0;
                for (&p, &r) in dims.iter().zip(ranges) {
                    if r[0] >= r[1] || r[1] > p {
                        return Err(Error::InvalidArgument(format!("range {r:?} does not fit a mode of size {p}")));
                    }
                    let len = (r[1] - r[0]) as f64;
                    factors.push(DMatrix::from_column_slice(p, 1, (indicator(p, r) / len.sqrt()).as_slice()));
                    weight *= len.sqrt();
                }
                let cp = CpVector::new(DVector::from_element(1, weight), factors)?;
                let mask = DenseTensor::from_fn(dims.clone(), |idx| {
                    let inside = idx.iter().zip(ranges).all(|(&i, r)| i >= r[0] && i < r[1]);
                    if inside {
                        1.0
                    } else {
                        0.0
                    }
                })?;
                Ok(Shape { mask, cp })
            }
            ShapeSpec::Cross { dims, thickness, margin } => {
                let [p1, p2] = *dims;
                let t = *thickness;
                if t == 0 || 2 * margin + t >= p1 || 2 * margin + t >= p2 {
                    return Err(Error::InvalidArgument(format!(
                        "cross with thickness {t} and margin {margin} does not fit {p1}x{p2}"
                    )));
                }
                let hrows = indicator(p1, [(p1 - t) / 2, (p1 - t) / 2 + t]);
                let hcols = indicator(p2, [*margin, p2 - margin]);
                let vrows = indicator(p1, [*margin, p1 - margin]);
                let vcols = indicator(p2, [(p2 - t) / 2, (p2 - t) / 2 + t]);
                from_matrix(&hrows * hcols.transpose() + &vrows * vcols.transpose())
            }
            ShapeSpec::DiagBand { dims, width } => {
                if *width == 0 {
                    return Err(Error::InvalidArgument("band width must be positive".into()));
                }
                let w = *width as isize;
                from_matrix(DMatrix::from_fn(dims[0], dims[1], |i, j| {
                    if (i as isize - j as isize).abs() < w {
                        1.0
                    } else {
                        0.0
                    }
                }))
            }
            ShapeSpec::Random { dims, rank } => {
                if dims.is_empty() || *rank == 0 || dims.iter().any(|&p| p < *rank) {
                    return Err(Error::InvalidArgument(format!("random shape of rank {rank} on {dims:?}")));
                }
                let factors: Vec<DMatrix<f64>> = dims
                    .iter()
                    .map(|&p| orthonormalize(&DMatrix::from_fn(p, *rank, |_, _| rng.sample(StandardNormal))))
                    .collect();
                let weights = DVector::from_fn(*rank, |r, _| (*rank - r) as f64);
                from_cp(CpVector::new(weights.normalize(), factors)?)
            }
            ShapeSpec::File { path } => {
                let t = read_tensor(path)?;
                match t.dims() {
                    [p] => {
                        let v = DVector::from_column_slice(t.data());
                        let norm = v.norm();
                        if norm == 0.0 {
                            return Err(Error::InvalidArgument("shape is identically zero".into()));
                        }
                        let cp = CpVector::new(DVector::from_element(1, norm), vec![DMatrix::from_column_slice(*p, 1, (v / norm).as_slice())])?;
                        Ok(Shape { mask: t, cp })
                    }
                    [p1, p2] => from_matrix(DMatrix::from_column_slice(*p1, *p2, t.data())),
                    d => Err(Error::InvalidArgument(format!(
                        "shape files must have one or two modes, got dims {d:?}"
                    ))),
                }
            }
        }
    }
}

/// `T T^T` with unit-Frobenius unstructured and structured parts.
///
/// The unstructured part is `T_u T_u^T` with `T_u` lower triangular Gaussian;
/// the structured part is `t t^T` with `t` the vectorized shape.
pub fn make_noise(
    p: usize,
    structured: Option<&DVector<f64>>,
    unstructured: bool,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let mut tt = DMatrix::zeros(p, p);
    if unstructured {
        let tu = DMatrix::from_fn(p, p, |i, j| if i >= j { rng.sample(StandardNormal) } else { 0.0 });
        let g = &tu * tu.transpose();
        tt += &g / g.norm();
    }
    if let Some(t) = structured {
        if t.len() != p {
            return Err(Error::Shape(format!("structured noise of length {} for {p} variables", t.len())));
        }
        let nn = t.norm_squared();
        if nn == 0.0 {
            return Err(Error::InvalidArgument("structured noise shape is zero".into()));
        }
        tt += t * t.transpose() / nn;
    }
    Ok(tt)
}

/// Block covariance for canonical vector `w`, SNR parameter `eta` and noise Gram `tt`.
pub fn build_block_cov(w: &DVector<f64>, eta: f64, tt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = w.len();
    if tt.shape() != (p, p) {
        return Err(Error::Shape(format!("noise Gram {:?} for {p} variables", tt.shape())));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be positive and finite, got {eta}")));
    }
    let ww = w.norm_squared();
    if ww == 0.0 {
        return Err(Error::InvalidArgument("canonical vector is zero".into()));
    }
    let s = w * w.transpose() / (ww * ww);
    let proj = DMatrix::identity(p, p) - w * w.transpose() / ww;
    let e = &proj * tt * &proj;
    let en = e.norm();
    if en <= 1e-14 * tt.norm() || en == 0.0 {
        log::warn!("noise covariance vanishes after projection; block covariance is noiseless");
        return Ok(s);
    }
    let sigma = &s + e * (s.norm() / (eta * en));
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// `F` with `F F^T = c`: Cholesky when it succeeds, otherwise a clamped
/// eigendecomposition for PSD matrices on the boundary.
fn psd_factor(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = c.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = sym_eigen(c);
    let top = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * top {
        return Err(Error::NotSpd { eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlockSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub shape: ShapeSpec,
    pub rho: f64,
    #[serde(default)]
    pub structured_noise: Option<ShapeSpec>,
    #[serde(default = "default_true")]
    pub unstructured_noise: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default)]
    pub seed: u64,
    /// Samples per fold.
    pub n: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub eta: f64,
    pub blocks: Vec<SimBlockSpec>,
}

fn default_folds() -> usize {
    1
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::InvalidArgument("need at least two blocks".into()));
        }
        if self.n < 2 || self.folds == 0 {
            return Err(Error::InvalidArgument(format!("n = {} and folds = {}", self.n, self.folds)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be positive and finite, got {}", self.eta)));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if !(b.rho.abs() <= 1.0) {
                return Err(Error::InvalidArgument(format!("block {l}: rho {} outside [-1, 1]", b.rho)));
            }
            if let (Some(s), Some(d)) = (&b.structured_noise, b.shape.dims()) {
                if let Some(sd) = s.dims() {
                    if sd.iter().product::<usize>() != d.iter().product::<usize>() {
                        return Err(Error::Shape(format!("block {l}: noise shape {sd:?} for dims {d:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sampling-ready model built from a [`SimSpec`].
#[derive(Debug, Clone)]
pub struct SimModel {
    pub spec: SimSpec,
    /// True canonical vectors.
    pub truths: Vec<CpVector>,
    /// `Σ_ll`.
    pub covariances: Vec<DMatrix<f64>>,
    /// `a_l = ρ_l Σ_ll w_l`.
    pub loadings: Vec<DVector<f64>>,
    cond_factors: Vec<DMatrix<f64>>,
}

/// Generator stream used for fold `fold`; stream 0 drives the model structure.
pub fn fold_stream_id(fold: usize) -> u64 {
    fold as u64 + 1
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SimModel {
    pub fn build(spec: &SimSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, 0);
        let mut truths = Vec::new();
        let mut covariances = Vec::new();
        let mut loadings = Vec::new();
        let mut cond_factors = Vec::new();
        for (l, b) in spec.blocks.iter().enumerate() {
            let ctx = |e: Error| match e {
                Error::NotSpd { eigenvalue } => Error::Singular(format!(
                    "block {l}: conditional covariance not PSD (eigenvalue {eigenvalue:e}); reduce |rho|"
                )),
                other => other,
            };
            let shape = b.shape.build(&mut rng)?;
            let w = shape.cp.reconstruct();
            let p = w.len();
            let structured = match &b.structured_noise {
                Some(s) => {
                    let t = s.build(&mut rng)?.mask.mode1_vectorize();
                    if t.len() != p {
                        return Err(Error::Shape(format!("block {l}: noise shape of length {} for {p} variables", t.len())));
                    }
                    Some(t)
                }
                None => None,
            };
            let tt = make_noise(p, structured.as_ref(), b.unstructured_noise, &mut rng)?;
            let sigma = build_block_cov(&w, spec.eta, &tt)?;
            let a = &sigma * &w * b.rho;
            let cond = &sigma - &a * a.transpose();
            cond_factors.push(psd_factor(&((&cond + cond.transpose()) * 0.5)).map_err(ctx)?);
            truths.push(shape.cp);
            covariances.push(sigma);
            loadings.push(a);
        }
        Ok(Self {
            spec: spec.clone(),
            truths,
            covariances,
            loadings,
            cond_factors,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.truths.len()
    }

    /// Block dims `[n, p_1, ..., p_d]` of a fold.
    pub fn block_dims(&self, l: usize) -> Vec<usize> {
        let mut dims = vec![self.spec.n];
        dims.extend(self.truths[l].dims());
        dims
    }

    /// Covariance of the concatenated variables `(x_1, ..., x_L)`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let widths: Vec<usize> = self.loadings.iter().map(|a| a.len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = DMatrix::zeros(total, total);
        let mut r0 = 0;
        for l in 0..widths.len() {
            let mut c0 = 0;
            for k in 0..widths.len() {
                let block = if l == k {
                    self.covariances[l].clone()
                } else {
                    &self.loadings[l] * self.loadings[k].transpose()
                };
                out.view_mut((r0, c0), (widths[l], widths[k])).copy_from(&block);
                c0 += widths[k];
            }
            r0 += widths[l];
        }
        out
    }

    /// Draws fold `fold`; each fold has its own generator stream.
    pub fn sample_fold(&self, fold: usize) -> Result<BlockSet> {
        let n = self.spec.n;
        let mut rng = stream(self.spec.seed, fold_stream_id(fold));
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut blocks = Vec::with_capacity(self.num_blocks());
        for l in 0..self.num_blocks() {
            let p = self.loadings[l].len();
            let eps = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &z * self.loadings[l].transpose() + eps * self.cond_factors[l].transpose();
            blocks.push(DenseTensor::new(self.block_dims(l), x.as_slice().to_vec())?);
        }
        BlockSet::new(blocks)
    }
}

/// Builds the model and draws every fold.
pub fn sample_dataset(spec: &SimSpec) -> Result<(SimModel, Vec<BlockSet>)> {
    let model = SimModel::build(spec)?;
    let folds = (0..spec.folds).map(|f| model.sample_fold(f)).collect::<Result<Vec<_>>>()?;
    Ok((model, folds))
}

/// Splits the samples of a fold into `parts` disjoint subsets after a
/// seeded shuffle. Sizes differ by at most one.
pub fn split_fold(fold: &BlockSet, parts: usize, seed: u64) -> Result<Vec<BlockSet>> {
    let n = fold.n();
    if parts == 0 || n / parts.max(1) < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples into {parts} parts of at least 2")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let size = n / parts + usize::from(k < n % parts);
        let idx = &order[start..start + size];
        start += size;
        let blocks = (0..fold.num_blocks())
            .map(|l| {
                let rows = fold.matrix(l).select_rows(idx);
                let mut dims = fold.block(l).dims().to_vec();
                dims[0] = size;
                DenseTensor::new(dims, rows.as_slice().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(BlockSet::new(blocks)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrLevel {
    pub eta: f64,
    pub label: &'static str,
}

/// The four noise levels of the simulation study.
pub const SNR_LEVELS: [SnrLevel; 4] = [
    SnrLevel { eta: 0.1, label: "-20dB" },
    SnrLevel { eta: 0.3, label: "-10.5dB" },
    SnrLevel { eta: 0.5, label: "-6dB" },
    SnrLevel { eta: 1.0, label: "0dB" },
];

/// `20 log10(η)`.
pub fn snr_db(eta: f64) -> f64 {
    20.0 * eta.log10()
}

pub fn snr_label(eta: f64) -> String {
    SNR_LEVELS
        .iter()
        .find(|s| (s.eta - eta).abs() <= 1e-12)
        .map(|s| s.label.to_string())
        .unwrap_or_else(|| format!("{:.1}dB", snr_db(eta)))
}
