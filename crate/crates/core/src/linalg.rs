//! Dense kernels for the constrained updates.
//!
//! Decompositions are delegated to `nalgebra`; this module fixes the
//! conventions the solver relies on (ordering, signs, degeneracy flags).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative threshold under which the smallest retained singular value
/// makes an orthogonal Procrustes maximizer non-unique.
pub const DEGENERATE_SINGULAR_RATIO: f64 = 1e-12;

/// Relative threshold for treating the reference point as collinear with
/// the hyperplane normal in [`ball_hyperplane_project`].
pub const COLLINEAR_RATIO: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `p x R`, orthonormal columns.
    pub left: DMatrix<f64>,
    /// Nonincreasing, nonnegative.
    pub singular: DVector<f64>,
    /// `q x R`, orthonormal columns.
    pub right: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.left * DMatrix::from_diagonal(&self.singular) * self.right.transpose()
    }

    /// True when the last retained singular value is numerically zero
    /// relative to the first (or the input was zero).
    pub fn is_degenerate(&self) -> bool {
        let first = self.singular[0];
        let last = self.singular[self.rank() - 1];
        first == 0.0 || last <= DEGENERATE_SINGULAR_RATIO * first
    }
}

/// Rank-`rank` SVD with singular values sorted in decreasing order.
///
/// Sign convention: the largest-magnitude entry of each left singular vector
/// is nonnegative (lowest index wins ties); the right vector is flipped with it.
pub fn truncated_svd(a: &DMatrix<f64>, rank: usize) -> Result<TruncatedSvd> {
    let (p, q) = a.shape();
    if rank == 0 || rank > p.min(q) {
        return Err(Error::OutOfRange(format!(
            "SVD rank {rank} for a {p}x{q} matrix"
        )));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut left = DMatrix::zeros(p, rank);
    let mut right = DMatrix::zeros(q, rank);
    let mut singular = DVector::zeros(rank);
    for (r, &k) in order.iter().take(rank).enumerate() {
        let mut lcol = u.column(k).into_owned();
        let mut rcol = vt.row(k).transpose();
        let mut best = 0;
        for i in 1..p {
            if lcol[i].abs() > lcol[best].abs() {
                best = i;
            }
        }
        if lcol[best] < 0.0 {
            lcol.neg_mut();
            rcol.neg_mut();
        }
        left.set_column(r, &lcol);
        right.set_column(r, &rcol);
        singular[r] = svd.singular_values[k].max(0.0);
    }
    Ok(TruncatedSvd {
        left,
        singular,
        right,
    })
}

#[derive(Debug, Clone)]
pub struct Procrustes {
    /// Maximizer of `Tr(F^T Ω)` over column-orthonormal `Ω`.
    pub matrix: DMatrix<f64>,
    /// The optimal value, `Σ δ_r`.
    pub value: f64,
    /// False when `F` is rank deficient and the maximizer is not unique.
    pub unique: bool,
    /// `δ_R / δ_1` (zero for a zero input).
    pub conditioning: f64,
}

/// Orthogonal Procrustes maximizer `S T^T` of `Tr(F^T Ω)`.
pub fn procrustes_max(f: &DMatrix<f64>) -> Result<Procrustes> {
    let (p, r) = f.shape();
    if r == 0 || r > p {
        return Err(Error::Shape(format!(
            "Procrustes needs 1 <= R <= p, got {p}x{r}"
        )));
    }
    let svd = truncated_svd(f, r)?;
    let first = svd.singular[0];
    let conditioning = if first > 0.0 {
        svd.singular[r - 1] / first
    } else {
        0.0
    };
    Ok(Procrustes {
        matrix: &svd.left * svd.right.transpose(),
        value: svd.singular.sum(),
        unique: !svd.is_degenerate(),
        conditioning,
    })
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Symmetric eigendecomposition of the symmetrized input.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
}

/// `m^{-1/2}` for a symmetric positive-definite `m`.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(m, -0.5)
}

/// `m^{1/2}` for a symmetric positive-definite `m`.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(m, 0.5)
}

fn spd_power(m: &DMatrix<f64>, exponent: f64) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let eig = sym_eigen(m);
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        return Err(Error::NotSpd { eigenvalue: min });
    }
    let d = eig.eigenvalues.map(|x| x.powf(exponent));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&d) * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.amax()
}

/// Orthonormal basis of the column space via thin QR.
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

/// Closest point to `lam_ref` on `{‖λ‖² = α} ∩ {uᵀλ = ε}`.
///
/// When `lam_ref` is collinear with `u` the result is `√α·u/‖u‖`.
pub fn ball_hyperplane_project(
    lam_ref: &DVector<f64>,
    u: &DVector<f64>,
    alpha: f64,
    eps: f64,
) -> Result<DVector<f64>> {
    if lam_ref.len() != u.len() {
        return Err(Error::Shape(format!(
            "reference has length {}, normal has length {}",
            lam_ref.len(),
            u.len()
        )));
    }
    let utu = u.norm_squared();
    if utu == 0.0 {
        return Err(Error::InvalidArgument("hyperplane normal is zero".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("ball radius² {alpha} must be positive")));
    }
    let along = eps * eps / utu;
    if along > alpha * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "hyperplane misses the ball: ε²/uᵀu = {along:e} > α = {alpha:e}"
        )));
    }
    let perp = lam_ref - u * (u.dot(lam_ref) / utu);
    let perp_norm = perp.norm();
    if perp_norm <= COLLINEAR_RATIO * lam_ref.norm() || perp_norm == 0.0 {
        return Ok(u * (alpha.sqrt() / utu.sqrt()));
    }
    let radial = (alpha - along).max(0.0).sqrt();
    Ok(u * (eps / utu) + perp * (radial / perp_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn ortho_residual(a: &DMatrix<f64>) -> f64 {
        (a.transpose() * a - DMatrix::identity(a.ncols(), a.ncols())).norm()
    }

    #[test]
    fn svd_diagonal_case() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let svd = truncated_svd(&a, 2).unwrap();
        assert_eq!(svd.singular.as_slice(), &[3.0, 2.0]);
        let e = DMatrix::<f64>::identity(3, 2);
        assert_relative_eq!(svd.left, e, epsilon = 1e-14);
        assert_relative_eq!(svd.right, e, epsilon = 1e-14);
    }

    #[test]
    fn svd_rank_one_outer_product() {
        let u = DVector::from_vec(vec![0.0, 2.0, 0.0]);
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let svd = truncated_svd(&(&u * v.transpose()), 1).unwrap();
        assert_relative_eq!(svd.singular[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn svd_rank_out_of_range() {
        let a = DMatrix::<f64>::zeros(3, 2);
        assert!(truncated_svd(&a, 0).is_err());
        assert!(truncated_svd(&a, 3).is_err());
    }

    #[test]
    fn svd_matches_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gauss(&mut rng, 6, 4);
        let svd = truncated_svd(&a, 3).unwrap();
        assert!(ortho_residual(&svd.left) < 1e-10);
        assert!(ortho_residual(&svd.right) < 1e-10);
        // oracle: eigen-decomposition of AᵀA, rebuild A V V^T with top-3 eigenvectors
        let eig = (a.transpose() * &a).symmetric_eigen();
        let mut idx: Vec<usize> = (0..4).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let v3 = DMatrix::from_columns(&idx[..3].iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
        let oracle = &a * &v3 * v3.transpose();
        let oracle_err = (&a - oracle).norm();
        let err = (&a - svd.reconstruct()).norm();
        assert_relative_eq!(err, oracle_err, max_relative = 1e-10);
        for r in 0..3 {
            assert_relative_eq!(svd.singular[r], eig.eigenvalues[idx[r]].sqrt(), max_relative = 1e-10);
        }
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gauss(&mut rng, 5, 3);
        let svd = truncated_svd(&a, 3).unwrap();
        for r in 0..3 {
            let col = svd.left.column(r);
            let imax = col.iamax();
            assert!(col[imax] >= 0.0);
        }
        let again = truncated_svd(&(-&a), 3).unwrap();
        assert_relative_eq!(svd.left, again.left, epsilon = 1e-12);
        assert_relative_eq!(svd.right, -again.right, epsilon = 1e-12);
    }

    #[test]
    fn procrustes_fixed_on_orthonormal_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthonormalize(&gauss(&mut rng, 5, 3));
        let p = procrustes_max(&q).unwrap();
        assert_relative_eq!(p.matrix, q, epsilon = 1e-12);
        assert!(p.unique);
    }

    #[test]
    fn procrustes_scaled_orthogonal_columns() {
        let f = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let p = procrustes_max(&f).unwrap();
        let expect = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(p.matrix, expect, epsilon = 1e-14);
        assert_relative_eq!(p.value, 5.0, epsilon = 1e-14);
    }

    #[test]
    fn procrustes_beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = gauss(&mut rng, 5, 2);
        let p = procrustes_max(&f).unwrap();
        let best = (f.transpose() * &p.matrix).trace();
        assert_relative_eq!(best, p.value, max_relative = 1e-12);
        for _ in 0..10_000 {
            let omega = orthonormalize(&gauss(&mut rng, 5, 2));
            assert!((f.transpose() * omega).trace() <= best + 1e-12);
        }
    }

    #[test]
    fn procrustes_flags_rank_deficiency() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0]);
        let p = procrustes_max(&f).unwrap();
        assert!(!p.unique);
        assert!(ortho_residual(&p.matrix) < 1e-12);
        assert!(procrustes_max(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn inv_sqrt_cases() {
        assert_relative_eq!(spd_inv_sqrt(&DMatrix::identity(4, 4)).unwrap(), DMatrix::identity(4, 4), epsilon = 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0]));
        assert_relative_eq!(spd_inv_sqrt(&d).unwrap(), expect, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gauss(&mut rng, 5, 5);
        let m = a.transpose() * &a + DMatrix::identity(5, 5);
        let r = spd_inv_sqrt(&m).unwrap();
        assert!((&r * &m * &r - DMatrix::identity(5, 5)).amax() < 1e-8);
        assert_relative_eq!(r, r.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn inv_sqrt_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        match spd_inv_sqrt(&m) {
            Err(Error::NotSpd { eigenvalue }) => assert_relative_eq!(eigenvalue, -0.5),
            other => panic!("expected NotSpd, got {other:?}"),
        }
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(spd_inv_sqrt(&asym).is_err());
    }

    #[test]
    fn spectral_norm_cases() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 2.0]));
        assert_relative_eq!(spectral_norm(&d), 5.0, epsilon = 1e-14);
        assert_relative_eq!(spectral_norm(&DMatrix::identity(3, 3)), 1.0, epsilon = 1e-14);

        // power iteration oracle
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = gauss(&mut rng, 6, 6);
        let m = a.transpose() * &a + DMatrix::identity(6, 6) * 0.1;
        let mut x = DVector::from_element(6, 1.0);
        let mut est = 0.0;
        for _ in 0..100_000 {
            let y = &m * &x;
            let next = y.norm();
            x = y / next;
            if (next - est).abs() <= 1e-14 * next {
                est = next;
                break;
            }
            est = next;
        }
        assert_relative_eq!(spectral_norm(&m), est, max_relative = 1e-10);
    }

    #[test]
    fn projection_example_against_circle_sweep() {
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let lam_ref = DVector::from_vec(vec![0.0, 1.0]);
        let got = ball_hyperplane_project(&lam_ref, &u, 1.0, 0.5).unwrap();
        assert_relative_eq!(got[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(got[1], 0.75f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(got.norm_squared(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(u.dot(&got), 0.5, epsilon = 1e-10);
        let dist = (&got - &lam_ref).norm();
        // feasible set of the half-space ∩ circle, swept densely
        for k in 0..10_000 {
            let th = std::f64::consts::TAU * k as f64 / 10_000.0;
            let pt = DVector::from_vec(vec![th.cos(), th.sin()]);
            if u.dot(&pt) >= 0.5 {
                assert!(dist <= (&pt - &lam_ref).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn projection_collinear_and_tangent() {
        let u = DVector::from_vec(vec![3.0, 4.0]);
        let got = ball_hyperplane_project(&(&u * 2.0), &u, 1.0, 1.0).unwrap();
        assert_relative_eq!(got, &u / 5.0, epsilon = 1e-14);

        let alpha: f64 = 0.25;
        let eps = alpha.sqrt() * u.norm();
        let lam_ref = DVector::from_vec(vec![1.0, -1.0]);
        let got = ball_hyperplane_project(&lam_ref, &u, alpha, eps).unwrap();
        assert_relative_eq!(got, &u * (alpha.sqrt() / 5.0), epsilon = 1e-12);
    }

    #[test]
    fn projection_errors() {
        let z = DVector::zeros(2);
        let one = DVector::from_vec(vec![1.0, 0.0]);
        assert!(ball_hyperplane_project(&one, &z, 1.0, 0.0).is_err());
        assert!(ball_hyperplane_project(&one, &one, 1.0, 2.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn procrustes_matches_polar_factor(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = gauss(&mut rng, 6, 3);
                let p = procrustes_max(&f).unwrap();
                let polar = &f * spd_inv_sqrt(&(f.transpose() * &f)).unwrap();
                prop_assert!((p.matrix - polar).amax() <= 1e-8);
            }

            #[test]
            fn inv_sqrt_commutes(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = gauss(&mut rng, 4, 4);
                let m = a.transpose() * &a + DMatrix::identity(4, 4) * 0.05;
                let r = spd_inv_sqrt(&m).unwrap();
                prop_assert!((&m * &r - &r * &m).norm() <= 1e-8 * m.norm());
            }

            #[test]
            fn projection_is_feasible(seed in 0u64..2000, r in 1usize..5, gamma in 0.0f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let alpha: f64 = rng.random_range(0.1..3.0);
                let u = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let lam_ref = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut prev = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                prev *= alpha.sqrt() * rng.random_range(0.0..1.0) / prev.norm();
                let opt = &u * (alpha.sqrt() / u.norm());
                let eps = (1.0 - gamma) * u.dot(&prev) + gamma * u.dot(&opt);
                let got = ball_hyperplane_project(&lam_ref, &u, alpha, eps).unwrap();
                prop_assert!(got.norm_squared() <= alpha + 1e-10);
                prop_assert!(u.dot(&got) >= eps - 1e-10);
            }
        }
    }
}
