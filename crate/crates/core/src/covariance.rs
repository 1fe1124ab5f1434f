//! Regularization matrices `M_l` and the whitening change of variables.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inv_sqrt, spectral_norm, sym_eigen};
use crate::tensor::{kron_vec, kronecker, mode_matricize, mode_product, CpVector, DenseTensor};

#[derive(Debug, Clone, PartialEq)]
pub enum RegularizationSpec {
    Identity,
    Full(DMatrix<f64>),
    /// Per-mode factors `M_1, ..., M_d`; the assembled matrix is `M_d ⊗ ... ⊗ M_1`.
    Separable(Vec<DMatrix<f64>>),
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    if m.clone().cholesky().is_none() {
        let min = sym_eigen(m).eigenvalues.min();
        return Err(Error::NotSpd { eigenvalue: min });
    }
    Ok(())
}

impl RegularizationSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RegularizationSpec::Identity => Ok(()),
            RegularizationSpec::Full(m) => check_spd(m),
            RegularizationSpec::Separable(fs) => {
                if fs.is_empty() {
                    return Err(Error::InvalidArgument("separable spec without factors".into()));
                }
                fs.iter().try_for_each(check_spd)
            }
        }
    }

    /// `‖M‖₂`; for a Kronecker product this is the product of factor norms.
    pub fn spectral_norm(&self) -> f64 {
        match self {
            RegularizationSpec::Identity => 1.0,
            RegularizationSpec::Full(m) => spectral_norm(m),
            RegularizationSpec::Separable(fs) => fs.iter().map(spectral_norm).product(),
        }
    }

    /// Dense `p x p` matrix. Only sensible for small `p`.
    pub fn assemble(&self, p: usize) -> DMatrix<f64> {
        match self {
            RegularizationSpec::Identity => DMatrix::identity(p, p),
            RegularizationSpec::Full(m) => m.clone(),
            RegularizationSpec::Separable(fs) => kron_chain(fs),
        }
    }

    /// `W^T M W` where the columns of `W` are the rank-one terms of `cp`.
    pub fn gram(&self, cp: &CpVector) -> DMatrix<f64> {
        let r = cp.rank();
        match self {
            RegularizationSpec::Full(m) => {
                let w = cp.rank_one_matrix();
                let g = w.transpose() * (m * &w);
                (&g + g.transpose()) * 0.5
            }
            RegularizationSpec::Identity | RegularizationSpec::Separable(_) => {
                let mut g = DMatrix::from_element(r, r, 1.0);
                for (m, f) in cp.factors.iter().enumerate() {
                    let gm = match self {
                        RegularizationSpec::Separable(fs) => f.transpose() * (&fs[m] * f),
                        _ => f.transpose() * f,
                    };
                    g.component_mul_assign(&gm);
                }
                g
            }
        }
    }
}

pub fn spec_spectral_norm(spec: &RegularizationSpec) -> f64 {
    spec.spectral_norm()
}

/// `A_d ⊗ ... ⊗ A_1`.
pub fn kron_chain(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = factors[0].clone();
    for f in &factors[1..] {
        acc = kronecker(f, &acc);
    }
    acc
}

fn sample_matrix(block: &DenseTensor) -> Result<(usize, usize)> {
    if block.order() < 2 {
        return Err(Error::Shape("block must be sample-stacked (order >= 2)".into()));
    }
    let n = block.dims()[0];
    if n == 0 {
        return Err(Error::Degenerate("block has no samples".into()));
    }
    Ok((n, block.len() / n))
}

/// `Σ̂ + τI` with `Σ̂ = X^T X / n` (the block is assumed centered).
pub fn estimate_full_m(block: &DenseTensor, tau: f64) -> Result<RegularizationSpec> {
    let (n, p) = sample_matrix(block)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("τ = {tau} must be nonnegative")));
    }
    let x = nalgebra::DMatrixView::from_slice(block.data(), n, p);
    let mut m = x.tr_mul(&x) / n as f64;
    m = (&m + m.transpose()) * 0.5;
    for i in 0..p {
        m[(i, i)] += tau;
    }
    if tau == 0.0 {
        check_spd(&m)?;
    }
    Ok(RegularizationSpec::Full(m))
}

/// Mode-wise moment estimator with `τ^{1/d} I` added to each factor.
///
/// Factors after the first are scaled to trace `p_m`; the removed scale is
/// carried by the first factor.
pub fn estimate_separable_m(block: &DenseTensor, tau: f64) -> Result<RegularizationSpec> {
    let (n, _) = sample_matrix(block)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("τ = {tau} must be nonnegative")));
    }
    let dims = &block.dims()[1..];
    let d = dims.len();
    let total: usize = dims.iter().product();
    let mut factors = Vec::with_capacity(d);
    for m in 0..d {
        let y = mode_matricize(block, m + 1)?;
        let denom = (n * total / dims[m]) as f64;
        let s = &y * y.transpose() / denom;
        factors.push((&s + s.transpose()) * 0.5);
    }
    let mut carried = 1.0;
    for m in 1..d {
        let tr = factors[m].trace();
        if tr > 0.0 {
            let c = tr / dims[m] as f64;
            factors[m] /= c;
            carried *= c;
        }
    }
    factors[0] *= carried;
    let shift = tau.powf(1.0 / d as f64);
    for f in &mut factors {
        for i in 0..f.nrows() {
            f[(i, i)] += shift;
        }
    }
    Ok(RegularizationSpec::Separable(factors))
}

#[derive(Debug, Clone)]
pub struct Whitened {
    pub block: DenseTensor,
    /// `M_m^{-1/2}` per sample mode; a single `p x p` matrix for a full spec;
    /// empty for the identity.
    pub inv_sqrt: Vec<DMatrix<f64>>,
}

/// Applies `M^{-1/2}` to every sample of a sample-stacked block.
///
/// Separable specs use one mode product per mode, so the cost is
/// `O(n p Σ p_m)` rather than `O(n p²)`.
pub fn whiten_block(block: &DenseTensor, spec: &RegularizationSpec) -> Result<Whitened> {
    let (n, p) = sample_matrix(block)?;
    match spec {
        RegularizationSpec::Identity => Ok(Whitened {
            block: block.clone(),
            inv_sqrt: Vec::new(),
        }),
        RegularizationSpec::Full(m) => {
            if m.nrows() != p {
                return Err(Error::Shape(format!("M is {}x{}, block width {p}", m.nrows(), m.ncols())));
            }
            let r = spd_inv_sqrt(m)?;
            let x = nalgebra::DMatrixView::from_slice(block.data(), n, p);
            let y = x * &r;
            Ok(Whitened {
                block: DenseTensor::new(block.dims().to_vec(), y.as_slice().to_vec())?,
                inv_sqrt: vec![r],
            })
        }
        RegularizationSpec::Separable(fs) => {
            let dims = &block.dims()[1..];
            if fs.len() != dims.len() || fs.iter().zip(dims).any(|(f, &q)| f.nrows() != q) {
                return Err(Error::Shape(format!(
                    "separable factors do not match block dims {dims:?}"
                )));
            }
            let inv: Vec<DMatrix<f64>> = fs.iter().map(spd_inv_sqrt).collect::<Result<_>>()?;
            let mut t = block.clone();
            for (m, a) in inv.iter().enumerate() {
                t = mode_product(&t, m + 1, a)?;
            }
            Ok(Whitened { block: t, inv_sqrt: inv })
        }
    }
}

/// Whitening through the assembled `p x p` Kronecker matrix `M^{-1/2}`,
/// built and applied in column panels so memory stays at `O(p · panel)`.
pub fn whiten_block_explicit(block: &DenseTensor, factors: &[DMatrix<f64>], panel: usize) -> Result<DenseTensor> {
    let (n, p) = sample_matrix(block)?;
    let dims = &block.dims()[1..];
    if factors.len() != dims.len() || factors.iter().zip(dims).any(|(f, &q)| f.nrows() != q) {
        return Err(Error::Shape(format!("factors do not match block dims {dims:?}")));
    }
    let inv: Vec<DMatrix<f64>> = factors.iter().map(spd_inv_sqrt).collect::<Result<_>>()?;
    let x = nalgebra::DMatrixView::from_slice(block.data(), n, p);
    let mut out = DMatrix::zeros(n, p);
    let panel = panel.max(1);
    let mut idx = vec![0usize; dims.len()];
    let mut start = 0;
    while start < p {
        let width = panel.min(p - start);
        let mut k = DMatrix::zeros(p, width);
        for j in 0..width {
            let mut col: Vec<f64> = inv[0].column(idx[0]).iter().copied().collect();
            for m in 1..dims.len() {
                let c: Vec<f64> = inv[m].column(idx[m]).iter().copied().collect();
                col = kron_vec(&c, &col);
            }
            k.set_column(j, &DVector::from_vec(col));
            for (m, i) in idx.iter_mut().enumerate() {
                *i += 1;
                if *i < dims[m] {
                    break;
                }
                *i = 0;
            }
        }
        out.columns_mut(start, width).copy_from(&(x * k));
        start += width;
    }
    DenseTensor::new(block.dims().to_vec(), out.as_slice().to_vec())
}

/// Maps a canonical vector found on whitened data back to the original
/// variables: `w = M^{-1/2} v`.
pub fn unwhiten(cp: &CpVector, inv_sqrt: &[DMatrix<f64>]) -> Result<CpVector> {
    if inv_sqrt.is_empty() {
        return Ok(cp.clone());
    }
    if inv_sqrt.len() != cp.order() {
        return Err(Error::Shape(format!(
            "{} whitening factors for a CP vector of order {}",
            inv_sqrt.len(),
            cp.order()
        )));
    }
    let factors = cp.factors.iter().zip(inv_sqrt).map(|(f, a)| a * f).collect();
    CpVector::new(cp.weights.clone(), factors)
}
