//! From raw blocks to the working problem the solver iterates on.
//!
//! Separable regime: blocks are preprocessed, `M_l` is estimated as a
//! Kronecker product and the data are whitened by mode products, so the
//! solver sees unit-norm constraints. Non-separable regime: blocks are only
//! preprocessed and the full `M_l` is handed to the solver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_full_m, estimate_separable_m, unwhiten, whiten_block, RegularizationSpec};
use crate::error::{Error, Result};
use crate::model::{preprocess, BlockSet, DesignMatrix, Regime, Scheme, SolverOptions};
use crate::solver::Problem;
use crate::tensor::CpVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// Shrunk sample covariance (Kronecker-structured in the separable regime).
    #[default]
    Estimated,
    /// `M_l = I`.
    Identity,
}

#[derive(Debug, Clone)]
pub struct PreparedProblem {
    pub problem: Problem,
    pub regime: Regime,
    /// Preprocessing scales `s_l`.
    pub scales: Vec<f64>,
    /// Per-mode `M_{l,m}^{-1/2}`; empty when no whitening was applied.
    pub inv_sqrt: Vec<Vec<DMatrix<f64>>>,
    /// The regularization matrices that define the constraints.
    pub metrics: Vec<RegularizationSpec>,
}

pub fn prepare(
    raw: &BlockSet,
    design: DesignMatrix,
    scheme: Scheme,
    options: &SolverOptions,
    regularization: Regularization,
) -> Result<PreparedProblem> {
    options.validate(raw)?;
    let (pre, scales) = preprocess(raw)?;
    let l_count = pre.num_blocks();
    match options.regime {
        Regime::Separable => {
            let mut blocks = Vec::with_capacity(l_count);
            let mut inv_sqrt = Vec::with_capacity(l_count);
            let mut metrics = Vec::with_capacity(l_count);
            for l in 0..l_count {
                let spec = match regularization {
                    Regularization::Estimated => estimate_separable_m(pre.block(l), options.tau(l))?,
                    Regularization::Identity => RegularizationSpec::Identity,
                };
                let w = whiten_block(pre.block(l), &spec).map_err(|e| stage_error(l, e))?;
                blocks.push(w.block);
                inv_sqrt.push(w.inv_sqrt);
                metrics.push(spec);
            }
            let problem = Problem::new(BlockSet::new(blocks)?, design, scheme)?;
            Ok(PreparedProblem {
                problem,
                regime: Regime::Separable,
                scales,
                inv_sqrt,
                metrics,
            })
        }
        Regime::NonSeparable => {
            let metrics = (0..l_count)
                .map(|l| match regularization {
                    Regularization::Estimated => estimate_full_m(pre.block(l), options.tau(l)),
                    Regularization::Identity => Ok(RegularizationSpec::Identity),
                })
                .collect::<Result<Vec<_>>>()?;
            let problem = Problem::new(pre, design, scheme)?.with_metrics(metrics.clone())?;
            Ok(PreparedProblem {
                problem,
                regime: Regime::NonSeparable,
                scales,
                inv_sqrt: vec![Vec::new(); l_count],
                metrics,
            })
        }
    }
}

fn stage_error(l: usize, e: Error) -> Error {
    match e {
        Error::NotSpd { eigenvalue } => Error::Singular(format!(
            "block {l}: regularization factor not positive definite (eigenvalue {eigenvalue:e}); increase τ"
        )),
        other => other,
    }
}

impl PreparedProblem {
    /// Canonical vector of block `l` in the preprocessed variables (undoes whitening).
    pub fn original_vector(&self, l: usize, cp: &CpVector) -> Result<CpVector> {
        unwhiten(cp, &self.inv_sqrt[l])
    }

    pub fn original_vectors(&self, cps: &[CpVector]) -> Result<Vec<CpVector>> {
        cps.iter().enumerate().map(|(l, cp)| self.original_vector(l, cp)).collect()
    }
}
