use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Mat, Par, Side};
use num_complex::Complex64 as c64;

use super::{EigError, Pencil};

/// All eigenpairs of the pencil through `M = L L^H` and a dense Hermitian
/// eigensolve of `L^-1 K L^-H`. Eigenvalues ascending, eigenvectors
/// M-orthonormal in the columns of the returned matrix.
pub(super) fn full_spectrum(pencil: &Pencil<'_>) -> Result<(Vec<f64>, Mat<c64>), EigError> {
    let n = pencil.dim();
    let k = pencil.stiffness.to_dense();
    let m = pencil.mass.to_dense();
    let llt = m.llt(Side::Lower).map_err(|_| EigError::MassNotDefinite)?;
    let l = llt.L();

    // C = L^-1 K L^-H, built as (L^-1 (L^-1 K)^H)^H.
    let mut left = k.clone();
    solve_lower_triangular_in_place(l, left.as_mut(), Par::Seq);
    let mut c = left.adjoint().to_owned();
    solve_lower_triangular_in_place(l, c.as_mut(), Par::Seq);
    let c = Mat::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)].conj()));

    let evd = c.self_adjoint_eigen(Side::Lower).map_err(|_| EigError::DenseFailure)?;
    let values: Vec<f64> = (0..n).map(|i| evd.S()[i].re).collect();
    let mut vectors = evd.U().to_owned();
    solve_upper_triangular_in_place(l.adjoint(), vectors.as_mut(), Par::Seq);
    Ok((values, vectors))
}
