//! Dense tensors and the index-order algebra used throughout the crate.
//!
//! Storage follows mode-1 vectorization: the first index varies fastest, so a
//! tensor with dims `[p1, p2]` is laid out exactly like a column-major
//! `p1 x p2` matrix. Mode indices are zero-based everywhere in the API.
//!
//! Mode-`m` matricization orders its columns with the remaining indices in
//! increasing mode order, smallest mode fastest. Under this convention
//! `vec(a1 ∘ a2 ∘ a3) = a3 ⊗ a2 ⊗ a1`.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("tensor needs at least one mode".into()));
        }
        if dims.iter().any(|&p| p == 0) {
            return Err(Error::InvalidArgument(format!("zero-sized mode in {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for (i, p) in idx.iter_mut().zip(&dims) {
                *i += 1;
                if *i < *p {
                    break;
                }
                *i = 0;
            }
        }
        Self::new(dims, data)
    }

    /// Inverse of [`DenseTensor::mode1_vectorize`].
    pub fn fold(vec: &[f64], dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), vec.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut stride = 1;
        let mut off = 0;
        for (i, p) in idx.iter().zip(&self.dims) {
            off += i * stride;
            stride *= p;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn mode1_vectorize(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn check_mode(dims: &[usize], m: usize) -> Result<()> {
    if m >= dims.len() {
        Err(Error::OutOfRange(format!(
            "mode {m} for a tensor of order {}",
            dims.len()
        )))
    } else {
        Ok(())
    }
}

/// Sizes of the index blocks before, at and after mode `m`.
fn split_dims(dims: &[usize], m: usize) -> (usize, usize, usize) {
    let left = dims[..m].iter().product();
    let right = dims[m + 1..].iter().product();
    (left, dims[m], right)
}

/// Mode-`m` matricization: a `p_m x prod_{j != m} p_j` matrix.
pub fn mode_matricize(t: &DenseTensor, m: usize) -> Result<DMatrix<f64>> {
    check_mode(t.dims(), m)?;
    let (left, pm, right) = split_dims(t.dims(), m);
    let data = t.data();
    Ok(DMatrix::from_fn(pm, left * right, |i, col| {
        let l = col % left;
        let r = col / left;
        data[l + left * (i + pm * r)]
    }))
}

/// Inverse of [`mode_matricize`] for a tensor with the given dims.
pub fn fold_matricized(mat: &DMatrix<f64>, m: usize, dims: &[usize]) -> Result<DenseTensor> {
    check_mode(dims, m)?;
    let (left, pm, right) = split_dims(dims, m);
    if mat.nrows() != pm || mat.ncols() != left * right {
        return Err(Error::Shape(format!(
            "matrix {}x{} cannot fold into mode {m} of {dims:?}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    let mut data = vec![0.0; left * pm * right];
    for r in 0..right {
        for i in 0..pm {
            for l in 0..left {
                data[l + left * (i + pm * r)] = mat[(i, l + left * r)];
            }
        }
    }
    DenseTensor::new(dims.to_vec(), data)
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `(a ⊗ b)[i * b.len() + k] = a[i] * b[k]`.
pub fn kron_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}

/// Column-wise Kronecker product.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (m, p) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(m * p, a.ncols());
    for r in 0..a.ncols() {
        for i in 0..m {
            let ai = a[(i, r)];
            for k in 0..p {
                out[(i * p + k, r)] = ai * b[(k, r)];
            }
        }
    }
    Ok(out)
}

/// Mode-`m` product `t x_m a` with `a` of shape `q x p_m`.
pub fn mode_product(t: &DenseTensor, m: usize, a: &DMatrix<f64>) -> Result<DenseTensor> {
    check_mode(t.dims(), m)?;
    let (left, pm, right) = split_dims(t.dims(), m);
    if a.ncols() != pm {
        return Err(Error::Shape(format!(
            "mode-{m} product: matrix has {} columns, mode has size {pm}",
            a.ncols()
        )));
    }
    let q = a.nrows();
    let mut dims = t.dims().to_vec();
    dims[m] = q;
    let src = t.data();
    let mut out = vec![0.0; left * q * right];
    if left == 1 {
        let x = DMatrixView::from_slice(src, pm, right);
        let y = a * x;
        out.copy_from_slice(y.as_slice());
    } else {
        let at = a.transpose();
        for r in 0..right {
            let x = DMatrixView::from_slice(&src[r * left * pm..(r + 1) * left * pm], left, pm);
            let y = x * &at;
            out[r * left * q..(r + 1) * left * q].copy_from_slice(y.as_slice());
        }
    }
    DenseTensor::new(dims, out)
}

/// Contracts mode `m` of the tensor stored in `data` with vector `v`.
pub fn contract_mode(data: &[f64], dims: &[usize], m: usize, v: &[f64]) -> Vec<f64> {
    let (left, pm, right) = split_dims(dims, m);
    debug_assert_eq!(v.len(), pm);
    let mut out = vec![0.0; left * right];
    for r in 0..right {
        let dst = &mut out[r * left..(r + 1) * left];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let base = left * (i + pm * r);
            for (d, s) in dst.iter_mut().zip(&data[base..base + left]) {
                *d += vi * s;
            }
        }
    }
    out
}

/// Contracts every mode except `skip` with the matching entry of `vectors`.
/// The result has length `dims[skip]`.
pub fn contract_all_but(data: &[f64], dims: &[usize], vectors: &[&[f64]], skip: usize) -> Vec<f64> {
    debug_assert_eq!(vectors.len(), dims.len());
    let mut cur: Vec<f64> = data.to_vec();
    let mut cur_dims = dims.to_vec();
    for m in (0..dims.len()).rev() {
        if m == skip {
            continue;
        }
        cur = contract_mode(&cur, &cur_dims, m, vectors[m]);
        cur_dims.remove(m);
    }
    cur
}

/// Full contraction `<T, v_1 ∘ ... ∘ v_d>`.
pub fn contract_all(data: &[f64], dims: &[usize], vectors: &[&[f64]]) -> f64 {
    let last = dims.len() - 1;
    let rest = contract_all_but(data, dims, vectors, last);
    rest.iter().zip(vectors[last]).map(|(a, b)| a * b).sum()
}

/// Weights plus per-mode factor matrices: `[[λ; W_1, ..., W_d]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpVector {
    pub weights: DVector<f64>,
    pub factors: Vec<DMatrix<f64>>,
}

impl CpVector {
    pub fn new(weights: DVector<f64>, factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("CP vector needs at least one factor".into()));
        }
        let rank = weights.len();
        if rank == 0 {
            return Err(Error::InvalidArgument("CP rank must be positive".into()));
        }
        for (m, f) in factors.iter().enumerate() {
            if f.ncols() != rank {
                return Err(Error::Shape(format!(
                    "factor {m} has {} columns, rank is {rank}",
                    f.ncols()
                )));
            }
        }
        Ok(Self { weights, factors })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn len(&self) -> usize {
        self.factors.iter().map(|f| f.nrows()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `w^(r) = w_d^(r) ⊗ ... ⊗ w_1^(r)`.
    pub fn rank_one(&self, r: usize) -> DVector<f64> {
        let mut v: Vec<f64> = self.factors[0].column(r).iter().copied().collect();
        for f in &self.factors[1..] {
            let col: Vec<f64> = f.column(r).iter().copied().collect();
            v = kron_vec(&col, &v);
        }
        DVector::from_vec(v)
    }

    /// The `p x R` matrix whose columns are the rank-one terms.
    pub fn rank_one_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..self.rank()).map(|r| self.rank_one(r)).collect();
        DMatrix::from_columns(&cols)
    }

    /// Column `r` of every factor, as slices usable with [`contract_all_but`].
    pub fn columns(&self, r: usize) -> Vec<Vec<f64>> {
        self.factors
            .iter()
            .map(|f| f.column(r).iter().copied().collect())
            .collect()
    }

    pub fn reconstruct(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for r in 0..self.rank() {
            let lam = self.weights[r];
            if lam != 0.0 {
                out.axpy(lam, &self.rank_one(r), 1.0);
            }
        }
        out
    }
}

pub fn cp_reconstruct(v: &CpVector) -> DVector<f64> {
    v.reconstruct()
}
