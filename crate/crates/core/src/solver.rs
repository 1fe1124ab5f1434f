//! Block coordinate ascent over orthogonal rank-`R` CP canonical vectors.
//!
//! Each block update maximizes the linearization of the criterion at the
//! current point: factor matrices one mode at a time, then the weights.
//! Because the criterion is convex in every block, each such step can only
//! increase it.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::covariance::RegularizationSpec;
use crate::error::{Error, Result};
use crate::linalg::{ball_hyperplane_project, orthonormalize, procrustes_max, truncated_svd};
use crate::model::{
    criterion_from_components, gradient_from_components, BlockSet, DesignMatrix, Regime, Scheme, SolverOptions,
};
use crate::tensor::{contract_all, contract_all_but, CpVector};

/// Below this norm the weight target is treated as zero.
pub const STATIONARY_THRESHOLD: f64 = 1e-14;

/// Reciprocal condition number under which `W^T M W` is treated as singular.
pub const GRAM_RCOND: f64 = 1e-14;

const MAX_WARNINGS: usize = 256;

/// Blocks, connections and scheme, plus the constraint metric `M_l` used by
/// the non-separable regime. Blocks are expected preprocessed (and whitened
/// for the separable regime).
#[derive(Debug, Clone)]
pub struct Problem {
    blocks: BlockSet,
    design: DesignMatrix,
    scheme: Scheme,
    metrics: Vec<RegularizationSpec>,
}

impl Problem {
    pub fn new(blocks: BlockSet, design: DesignMatrix, scheme: Scheme) -> Result<Self> {
        let l_count = blocks.num_blocks();
        if design.size() != l_count {
            return Err(Error::Shape(format!(
                "design matrix of size {} for {l_count} blocks",
                design.size()
            )));
        }
        if (0..l_count).any(|l| design.get(l, l) != 0.0) && !scheme.nondecreasing_on_positives() {
            return Err(Error::InvalidArgument(
                "scheme must be nondecreasing on positives when C has a nonzero diagonal".into(),
            ));
        }
        Ok(Self {
            blocks,
            design,
            scheme,
            metrics: vec![RegularizationSpec::Identity; l_count],
        })
    }

    pub fn with_metrics(mut self, metrics: Vec<RegularizationSpec>) -> Result<Self> {
        if metrics.len() != self.blocks.num_blocks() {
            return Err(Error::Shape(format!(
                "{} metrics for {} blocks",
                metrics.len(),
                self.blocks.num_blocks()
            )));
        }
        for (l, m) in metrics.iter().enumerate() {
            m.validate()?;
            let ok = match m {
                RegularizationSpec::Identity => true,
                RegularizationSpec::Full(a) => a.nrows() == self.blocks.width(l),
                RegularizationSpec::Separable(fs) => {
                    let dims = self.blocks.mode_dims(l);
                    fs.len() == dims.len() && fs.iter().zip(dims).all(|(f, &p)| f.nrows() == p)
                }
            };
            if !ok {
                return Err(Error::Shape(format!("metric for block {l} does not match its dims")));
            }
        }
        self.metrics = metrics;
        Ok(self)
    }

    pub fn blocks(&self) -> &BlockSet {
        &self.blocks
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn metric(&self, l: usize) -> &RegularizationSpec {
        &self.metrics[l]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.num_blocks()
    }

    /// Bound on `‖λ_l‖`: 1 in the separable regime, `‖M_l‖₂^{-1/2}` otherwise.
    pub fn weight_radius(&self, l: usize, regime: Regime) -> f64 {
        match regime {
            Regime::Separable => 1.0,
            Regime::NonSeparable => 1.0 / self.metrics[l].spectral_norm().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarningKind {
    /// The maximizer of the update was not unique (rank-deficient target).
    NonUnique { ratio: f64 },
    /// The update target vanished; the variables were left unchanged.
    Stationary,
    /// `W^T M W` could not be factored; the weights used the unstructured optimum.
    IllConditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverWarning {
    pub iteration: usize,
    pub block: usize,
    pub mode: Option<usize>,
    #[serde(flatten)]
    pub kind: WarningKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Mode(usize),
    Weights,
    Tandem,
}

/// State of the problem right after one elementary update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub block: usize,
    pub kind: UpdateKind,
    pub criterion: f64,
    /// Largest of `‖V^T V − I‖_F` on orthogonal modes and `|‖v_r‖ − 1|` elsewhere.
    pub orth_residual: f64,
    /// `|‖λ‖ − 1|` (separable) or `max(0, ‖λ‖ − ‖M‖₂^{-1/2})` (non-separable).
    pub weight_residual: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Canonical vectors in the variables the solver worked on.
    pub vectors: Vec<CpVector>,
    pub components: Vec<DVector<f64>>,
    /// Criterion at the start point, then after every sweep.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<SolverWarning>,
    pub suppressed_warnings: usize,
    pub seconds: f64,
    /// `Σ_l ‖w_l^{s+1} − w_l^s‖` over the last sweep.
    pub last_step: f64,
    /// Filled when `record_updates` is set.
    pub updates: Vec<UpdateRecord>,
}

impl FitResult {
    pub fn criterion(&self) -> f64 {
        *self.trace.last().expect("trace holds the start value")
    }
}

/// Current iterate with cached components.
pub struct InnerState<'a> {
    problem: &'a Problem,
    regime: Regime,
    orth: Vec<Vec<bool>>,
    radius: Vec<f64>,
    vectors: Vec<CpVector>,
    components: Vec<DVector<f64>>,
    warnings: Vec<SolverWarning>,
    suppressed: usize,
    updates: Option<Vec<UpdateRecord>>,
    iteration: usize,
}

impl<'a> InnerState<'a> {
    pub fn new(problem: &'a Problem, options: &SolverOptions, start: Vec<CpVector>) -> Result<Self> {
        let bs = problem.blocks();
        options.validate(bs)?;
        if start.len() != bs.num_blocks() {
            return Err(Error::Shape(format!(
                "{} start vectors for {} blocks",
                start.len(),
                bs.num_blocks()
            )));
        }
        for (l, cp) in start.iter().enumerate() {
            if cp.dims() != bs.mode_dims(l) {
                return Err(Error::Shape(format!(
                    "block {l}: start dims {:?}, block dims {:?}",
                    cp.dims(),
                    bs.mode_dims(l)
                )));
            }
            if cp.rank() != options.rank(l) {
                return Err(Error::Shape(format!(
                    "block {l}: start rank {}, configured rank {}",
                    cp.rank(),
                    options.rank(l)
                )));
            }
        }
        let l_count = bs.num_blocks();
        let orth = (0..l_count)
            .map(|l| options.orth_mode.mask(l, bs.mode_dims(l).len()))
            .collect();
        let radius = (0..l_count).map(|l| problem.weight_radius(l, options.regime)).collect();
        let components = start
            .iter()
            .enumerate()
            .map(|(l, cp)| bs.matrix(l) * cp.reconstruct())
            .collect();
        Ok(Self {
            problem,
            regime: options.regime,
            orth,
            radius,
            vectors: start,
            components,
            warnings: Vec::new(),
            suppressed: 0,
            updates: options.record_updates.then(Vec::new),
            iteration: 0,
        })
    }

    pub fn vectors(&self) -> &[CpVector] {
        &self.vectors
    }

    pub fn components(&self) -> &[DVector<f64>] {
        &self.components
    }

    pub fn warnings(&self) -> &[SolverWarning] {
        &self.warnings
    }

    pub fn criterion(&self) -> f64 {
        criterion_from_components(
            self.problem.design(),
            self.problem.scheme(),
            &self.components,
            self.problem.blocks().n(),
        )
    }

    /// Partial gradient at the current iterate.
    pub fn gradient(&self, l: usize) -> DVector<f64> {
        gradient_from_components(
            self.problem.blocks(),
            self.problem.design(),
            self.problem.scheme(),
            &self.components,
            l,
        )
    }

    /// Recomputes `y_l = X_l w_l`.
    pub fn refresh(&mut self, l: usize) {
        self.components[l] = self.problem.blocks().matrix(l) * self.vectors[l].reconstruct();
    }

    fn warn(&mut self, block: usize, mode: Option<usize>, kind: WarningKind) {
        if self.warnings.len() < MAX_WARNINGS {
            self.warnings.push(SolverWarning {
                iteration: self.iteration,
                block,
                mode,
                kind,
            });
        } else {
            self.suppressed += 1;
        }
    }

    /// `F` for mode `m`: column `r` is `λ_r` times the gradient contracted with
    /// the `r`-th factor columns of every other mode.
    pub fn mode_target(&self, l: usize, m: usize, grad: &DVector<f64>) -> DMatrix<f64> {
        let dims = self.problem.blocks().mode_dims(l);
        let cp = &self.vectors[l];
        let mut f = DMatrix::zeros(dims[m], cp.rank());
        for r in 0..cp.rank() {
            let lam = cp.weights[r];
            if lam == 0.0 {
                continue;
            }
            let cols = cp.columns(r);
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let v = contract_all_but(grad.as_slice(), dims, &refs, m);
            for (i, x) in v.into_iter().enumerate() {
                f[(i, r)] = lam * x;
            }
        }
        f
    }

    /// `u = W^T ∇`, one contraction per rank-one term.
    pub fn weight_target(&self, l: usize, grad: &DVector<f64>) -> DVector<f64> {
        let dims = self.problem.blocks().mode_dims(l);
        let cp = &self.vectors[l];
        DVector::from_fn(cp.rank(), |r, _| {
            let cols = cp.columns(r);
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            contract_all(grad.as_slice(), dims, &refs)
        })
    }

    pub fn apply_mode_update(&mut self, l: usize, m: usize, grad: &DVector<f64>) {
        let f = self.mode_target(l, m, grad);
        if self.orth[l][m] {
            if f.amax() == 0.0 {
                self.warn(l, Some(m), WarningKind::Stationary);
                return;
            }
            let p = procrustes_max(&f).expect("rank validated against the orthogonal mode");
            if !p.unique {
                self.warn(l, Some(m), WarningKind::NonUnique { ratio: p.conditioning });
            }
            self.vectors[l].factors[m] = p.matrix;
        } else {
            let factor = &mut self.vectors[l].factors[m];
            for r in 0..f.ncols() {
                let norm = f.column(r).norm();
                if norm > 0.0 {
                    factor.set_column(r, &(f.column(r) / norm));
                }
            }
        }
    }

    pub fn apply_weights_separable(&mut self, l: usize, grad: &DVector<f64>) {
        let u = self.weight_target(l, grad);
        let norm = u.norm();
        if norm <= STATIONARY_THRESHOLD {
            self.warn(l, None, WarningKind::Stationary);
            return;
        }
        self.vectors[l].weights = u / norm;
    }

    fn tandem_applies(&self, l: usize, tandem: bool) -> bool {
        let dims = self.problem.blocks().mode_dims(l);
        tandem && dims.len() == 2 && self.vectors[l].rank() <= dims[0].min(dims[1])
    }

    /// Joint update of both factors and the weights of a matrix block from
    /// the rank-`R` SVD of the reshaped gradient.
    pub fn apply_matrix_block(&mut self, l: usize, grad: &DVector<f64>) -> Result<()> {
        let dims = self.problem.blocks().mode_dims(l);
        if dims.len() != 2 {
            return Err(Error::InvalidArgument(format!("block {l} is not a matrix block")));
        }
        let f = DMatrix::from_column_slice(dims[0], dims[1], grad.as_slice());
        let svd = truncated_svd(&f, self.vectors[l].rank())?;
        if svd.singular[0] == 0.0 {
            self.warn(l, None, WarningKind::Stationary);
            return Ok(());
        }
        if svd.is_degenerate() {
            let ratio = svd.singular[svd.rank() - 1] / svd.singular[0];
            self.warn(l, None, WarningKind::NonUnique { ratio });
        }
        let norm = svd.singular.norm();
        let cp = &mut self.vectors[l];
        cp.weights = svd.singular / norm;
        cp.factors[0] = svd.left;
        cp.factors[1] = svd.right;
        Ok(())
    }

    /// Weight update under `‖λ‖ ≤ ‖M‖₂^{-1/2}` with the structured reference
    /// direction `G^{-1}u`, `G = W^T M W`.
    pub fn apply_weights_nonseparable(&mut self, l: usize, grad: &DVector<f64>) {
        let u = self.weight_target(l, grad);
        let norm = u.norm();
        if norm <= STATIONARY_THRESHOLD {
            self.warn(l, None, WarningKind::Stationary);
            return;
        }
        let s = self.radius[l];
        let alpha = s * s;
        let prev = &self.vectors[l].weights;
        let optimal = &u * (s / norm);
        let level = 0.5 * (u.dot(prev) + s * norm);
        let gram = self.problem.metric(l).gram(&self.vectors[l]);
        let next = match reference_direction(&gram, &u) {
            Some(reference) => {
                let candidate = &reference * (s / reference.norm());
                if u.dot(&candidate) >= level {
                    candidate
                } else {
                    ball_hyperplane_project(&reference, &u, alpha, level).unwrap_or(optimal)
                }
            }
            None => {
                self.warn(l, None, WarningKind::IllConditioned);
                optimal
            }
        };
        self.vectors[l].weights = next;
    }

    pub fn orth_residual(&self, l: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for (m, f) in self.vectors[l].factors.iter().enumerate() {
            let res = if self.orth[l][m] {
                (f.transpose() * f - DMatrix::identity(f.ncols(), f.ncols())).norm()
            } else {
                f.column_iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max)
            };
            worst = worst.max(res);
        }
        worst
    }

    pub fn weight_residual(&self, l: usize) -> f64 {
        let norm = self.vectors[l].weights.norm();
        match self.regime {
            Regime::Separable => (norm - 1.0).abs(),
            Regime::NonSeparable => (norm - self.radius[l]).max(0.0),
        }
    }

    fn record(&mut self, l: usize, kind: UpdateKind) {
        if self.updates.is_none() {
            return;
        }
        let rec = UpdateRecord {
            iteration: self.iteration,
            block: l,
            kind,
            criterion: self.criterion(),
            orth_residual: self.orth_residual(l),
            weight_residual: self.weight_residual(l),
        };
        self.updates.as_mut().expect("checked above").push(rec);
    }

    fn checked_gradient(&self, l: usize) -> Result<DVector<f64>> {
        let g = self.gradient(l);
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                block: l,
                value: *bad,
            });
        }
        Ok(g)
    }

    /// Updates every variable of block `l` once: modes in increasing order,
    /// then the weights (or the joint matrix-block update).
    pub fn sweep_block(&mut self, l: usize, tandem: bool) -> Result<()> {
        let self_linked = self.problem.design().get(l, l) != 0.0;
        let recording = self.updates.is_some();
        let mut grad = self.checked_gradient(l)?;
        if self.regime == Regime::Separable && self.tandem_applies(l, tandem) {
            self.apply_matrix_block(l, &grad)?;
            self.refresh(l);
            self.record(l, UpdateKind::Tandem);
        } else {
            for m in 0..self.vectors[l].order() {
                self.apply_mode_update(l, m, &grad);
                if self_linked || recording {
                    self.refresh(l);
                }
                if self_linked {
                    grad = self.checked_gradient(l)?;
                }
                self.record(l, UpdateKind::Mode(m));
            }
            match self.regime {
                Regime::Separable => self.apply_weights_separable(l, &grad),
                Regime::NonSeparable => self.apply_weights_nonseparable(l, &grad),
            }
            self.refresh(l);
            self.record(l, UpdateKind::Weights);
        }
        let f = self.criterion();
        if !f.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                block: l,
                value: f,
            });
        }
        Ok(())
    }
}

/// `G^{-1}u / sqrt(u^T G^{-1} u)`, or `None` when `G` is numerically singular.
fn reference_direction(gram: &DMatrix<f64>, u: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = gram.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > 0.0) || (lo / hi).powi(2) < GRAM_RCOND {
        return None;
    }
    let ginv_u = chol.solve(u);
    let q = u.dot(&ginv_u);
    if !(q > 0.0) || !q.is_finite() {
        return None;
    }
    Some(ginv_u / q.sqrt())
}

pub fn update_mode_separable(state: &mut InnerState<'_>, l: usize, m: usize) {
    let grad = state.gradient(l);
    state.apply_mode_update(l, m, &grad);
    state.refresh(l);
}

pub fn update_lambda_separable(state: &mut InnerState<'_>, l: usize) {
    let grad = state.gradient(l);
    state.apply_weights_separable(l, &grad);
    state.refresh(l);
}

pub fn update_matrix_block(state: &mut InnerState<'_>, l: usize) -> Result<()> {
    let grad = state.gradient(l);
    state.apply_matrix_block(l, &grad)?;
    state.refresh(l);
    Ok(())
}

/// Mode updates followed by the constrained weight update.
pub fn update_nonseparable(state: &mut InnerState<'_>, l: usize) {
    for m in 0..state.vectors[l].order() {
        update_mode_separable(state, l, m);
    }
    let grad = state.gradient(l);
    state.apply_weights_nonseparable(l, &grad);
    state.refresh(l);
}

/// Random start: Gaussian factors, orthonormalized on orthogonal modes and
/// column-normalized elsewhere; weights uniform on the sphere of radius `scale`.
pub fn init_random<R: Rng + ?Sized>(
    dims: &[usize],
    rank: usize,
    orth: &[bool],
    scale: f64,
    rng: &mut R,
) -> Result<CpVector> {
    if orth.len() != dims.len() {
        return Err(Error::Shape(format!("{} orthogonality flags for {} modes", orth.len(), dims.len())));
    }
    let mut factors = Vec::with_capacity(dims.len());
    for (m, &p) in dims.iter().enumerate() {
        if orth[m] && rank > p {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} exceeds orthogonal mode {m} of size {p}"
            )));
        }
        let g = DMatrix::from_fn(p, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = if orth[m] {
            orthonormalize(&g)
        } else {
            let mut g = g;
            for mut c in g.column_iter_mut() {
                let n = c.norm();
                c /= n;
            }
            g
        };
        factors.push(f);
    }
    let w = DVector::from_fn(rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = w.norm();
    CpVector::new(w * (scale / norm), factors)
}

/// Start point for every block from the stream seeded with `seed`.
pub fn random_start(problem: &Problem, options: &SolverOptions, seed: u64) -> Result<Vec<CpVector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = problem.blocks();
    (0..bs.num_blocks())
        .map(|l| {
            let dims = bs.mode_dims(l);
            let orth = options.orth_mode.mask(l, dims.len());
            let scale = problem.weight_radius(l, options.regime);
            init_random(dims, options.rank(l), &orth, scale, &mut rng)
        })
        .collect()
}

/// Runs sweeps until the criterion gains less than `eps_stop` or
/// `max_iter` sweeps are done.
pub fn bca_fit(problem: &Problem, options: &SolverOptions, start: Vec<CpVector>) -> Result<FitResult> {
    let clock = Instant::now();
    let mut state = InnerState::new(problem, options, start)?;
    let f0 = state.criterion();
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            block: 0,
            value: f0,
        });
    }
    let mut trace = vec![f0];
    let mut previous: Vec<DVector<f64>> = state.vectors.iter().map(CpVector::reconstruct).collect();
    let mut converged = false;
    let mut last_step = 0.0;
    let mut iterations = 0;
    for it in 1..=options.max_iter {
        state.iteration = it;
        for l in 0..problem.num_blocks() {
            state.sweep_block(l, options.tandem)?;
        }
        let f = state.criterion();
        let current: Vec<DVector<f64>> = state.vectors.iter().map(CpVector::reconstruct).collect();
        last_step = current.iter().zip(&previous).map(|(a, b)| (a - b).norm()).sum();
        previous = current;
        let gain = f - trace[trace.len() - 1];
        trace.push(f);
        iterations = it;
        if gain < options.eps_stop {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        vectors: state.vectors,
        components: state.components,
        trace,
        iterations,
        converged,
        warnings: state.warnings,
        suppressed_warnings: state.suppressed,
        seconds: clock.elapsed().as_secs_f64(),
        last_step,
        updates: state.updates.unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StartOutcome {
    pub seed: u64,
    /// Empty when the start aborted.
    pub trace: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MultiStartFit {
    pub best: FitResult,
    pub best_start: usize,
    pub starts: Vec<StartOutcome>,
}

/// `n_starts` fits from seeds `seed, seed+1, ...`; keeps the highest final
/// criterion (the earliest start wins ties).
pub fn multi_start_fit(problem: &Problem, options: &SolverOptions) -> Result<MultiStartFit> {
    options.validate(problem.blocks())?;
    let mut best: Option<(usize, FitResult)> = None;
    let mut starts = Vec::with_capacity(options.n_starts);
    let mut first_error = None;
    for i in 0..options.n_starts {
        let seed = options.seed.wrapping_add(i as u64);
        match random_start(problem, options, seed).and_then(|s| bca_fit(problem, options, s)) {
            Ok(fit) => {
                starts.push(StartOutcome {
                    seed,
                    trace: fit.trace.clone(),
                    error: None,
                });
                let better = best.as_ref().is_none_or(|(_, b)| fit.criterion() > b.criterion());
                if better {
                    best = Some((i, fit));
                }
            }
            Err(e) => {
                starts.push(StartOutcome {
                    seed,
                    trace: Vec::new(),
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    match best {
        Some((best_start, best)) => Ok(MultiStartFit {
            best,
            best_start,
            starts,
        }),
        None => Err(Error::AllStartsFailed(
            options.n_starts,
            Box::new(first_error.expect("at least one start ran")),
        )),
    }
}
