//! Several components per block by deflation, shared-factor recovery and
//! alignment metrics.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::model::{BlockSet, Regime, SolverOptions};
use crate::pipeline::PreparedProblem;
use crate::solver::{multi_start_fit, FitResult, Problem, StartOutcome};
use crate::tensor::{khatri_rao, mode_matricize, CpVector, DenseTensor};

/// A stage whose best criterion falls below this is treated as exhausted.
pub const EXHAUSTED_CRITERION: f64 = 1e-10;

/// `X − y (y^T y)^{-1} y^T X` for a sample-stacked block.
pub fn deflate_block(x: &DenseTensor, y: &DVector<f64>) -> Result<DenseTensor> {
    let n = x.dims()[0];
    if y.len() != n {
        return Err(Error::Shape(format!("component of length {} for {n} samples", y.len())));
    }
    let yy = y.norm_squared();
    if yy == 0.0 {
        return Err(Error::InvalidArgument("cannot deflate by a zero component".into()));
    }
    let xm = DMatrixView::from_slice(x.data(), n, x.len() / n);
    let coef = xm.tr_mul(y) / yy;
    let out = xm - y * coef.transpose();
    DenseTensor::new(x.dims().to_vec(), out.as_slice().to_vec())
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// Fit on the deflated working blocks.
    pub fit: FitResult,
    /// Canonical vectors mapped back to the preprocessed variables.
    pub vectors: Vec<CpVector>,
    pub best_start: usize,
    pub starts: Vec<StartOutcome>,
}

#[derive(Debug, Clone)]
pub struct ComponentStack {
    /// `None` marks stages skipped after the signal was exhausted.
    pub stages: Vec<Option<Stage>>,
}

impl ComponentStack {
    pub fn extracted(&self) -> usize {
        self.stages.iter().filter(|s| s.is_some()).count()
    }

    pub fn components(&self, l: usize) -> Vec<&DVector<f64>> {
        self.stages.iter().flatten().map(|s| &s.fit.components[l]).collect()
    }

    /// Largest `|y_j^T y_k| / (‖y_j‖‖y_k‖)` over distinct stages of block `l`.
    pub fn max_cross_correlation(&self, l: usize) -> f64 {
        let ys = self.components(l);
        let mut worst: f64 = 0.0;
        for j in 0..ys.len() {
            for k in j + 1..ys.len() {
                let denom = ys[j].norm() * ys[k].norm();
                if denom > 0.0 {
                    worst = worst.max(ys[j].dot(ys[k]).abs() / denom);
                }
            }
        }
        worst
    }
}

/// Fits `k` successive stages, deflating every block by its previous
/// component before each new stage. The regularization stays fixed.
pub fn extract_components(prepared: &PreparedProblem, options: &SolverOptions, k: usize) -> Result<ComponentStack> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one stage".into()));
    }
    let base = &prepared.problem;
    let mut blocks: Vec<DenseTensor> = base.blocks().blocks().to_vec();
    let mut stages = Vec::with_capacity(k);
    let mut exhausted = false;
    for stage in 0..k {
        if exhausted {
            stages.push(None);
            continue;
        }
        let mut problem = Problem::new(BlockSet::new(blocks.clone())?, base.design().clone(), base.scheme())?;
        if prepared.regime == Regime::NonSeparable {
            problem = problem.with_metrics(prepared.metrics.clone())?;
        }
        let wrap = |e: Error| Error::Stage {
            stage: stage + 1,
            source: Box::new(e),
        };
        let fit = multi_start_fit(&problem, options).map_err(wrap)?;
        if fit.best.criterion() < EXHAUSTED_CRITERION {
            log::info!("stage {} exhausted (criterion {:e})", stage + 1, fit.best.criterion());
            exhausted = true;
            stages.push(None);
            continue;
        }
        let vectors = prepared.original_vectors(&fit.best.vectors).map_err(wrap)?;
        for (l, b) in blocks.iter_mut().enumerate() {
            *b = deflate_block(b, &fit.best.components[l]).map_err(wrap)?;
        }
        stages.push(Some(Stage {
            fit: fit.best,
            vectors,
            best_start: fit.best_start,
            starts: fit.starts,
        }));
    }
    Ok(ComponentStack { stages })
}

/// Least-squares sample-mode factor of a 3-mode sample-stacked block given
/// the factors of its two variable modes (in mode order) and the weights:
/// `A = X_(1) K Λ (Λ K^T K Λ)^{-1}` with `K` the Khatri-Rao product of
/// `last` and `middle`.
pub fn recover_shared_factors(
    x: &DenseTensor,
    middle: &DMatrix<f64>,
    last: &DMatrix<f64>,
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if x.order() != 3 {
        return Err(Error::Shape(format!("expected a 3-mode block, got order {}", x.order())));
    }
    let r = lambda.len();
    if middle.ncols() != r || last.ncols() != r {
        return Err(Error::Shape(format!(
            "factor column counts {} and {} for {r} weights",
            middle.ncols(),
            last.ncols()
        )));
    }
    if middle.nrows() != x.dims()[1] || last.nrows() != x.dims()[2] {
        return Err(Error::Shape("factor row counts do not match the block".into()));
    }
    if lambda.iter().any(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("zero weight makes the factor unidentifiable".into()));
    }
    let x1 = mode_matricize(x, 0)?;
    let k = khatri_rao(last, middle)? * DMatrix::from_diagonal(lambda);
    let normal = k.transpose() * &k;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singular("normal matrix of the recovery is singular".into()))?;
    Ok(chol.solve(&(k.transpose() * x1.transpose())).transpose())
}

/// `|a^T b| / (‖a‖ ‖b‖)`.
pub fn cosine_alignment(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((a.dot(b).abs() / denom).min(1.0))
}
