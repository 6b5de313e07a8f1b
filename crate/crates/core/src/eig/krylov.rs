//! Shift-invert block Krylov iteration with Ritz restarts.
//!
//! The operator `(K - sigma M)^-1 M` is self-adjoint in the M inner product,
//! so Rayleigh-Ritz on an M-orthonormal basis gives real Ritz values `theta`
//! with pencil eigenvalues `sigma + 1/theta`. The largest `|theta|` belong to
//! the eigenvalues closest to the shift.

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::{Mat, Side};
use num_complex::Complex64 as c64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EigError, Pencil};

enum Factor {
    Cholesky(Llt<usize, c64>),
    Lu(Lu<usize, c64>),
}

pub(super) struct ShiftInvert<'a> {
    pencil: Pencil<'a>,
    pub shift: f64,
    factor: Factor,
}

impl<'a> ShiftInvert<'a> {
    /// Factorizes `K - shift M`. Cholesky is used when the shifted matrix is
    /// known to be definite (shift below the spectrum), LU otherwise.
    pub fn new(pencil: Pencil<'a>, shift: f64, definite: bool) -> Result<Self, EigError> {
        let shifted = pencil.stiffness.add_scaled(c64::new(-shift, 0.0), pencil.mass).to_faer();
        let factor = if definite {
            shifted
                .sp_cholesky(Side::Lower)
                .map(Factor::Cholesky)
                .map_err(|e| EigError::Factorization { shift, reason: format!("{e:?}") })?
        } else {
            shifted
                .sp_lu()
                .map(Factor::Lu)
                .map_err(|e| EigError::Factorization { shift, reason: format!("{e:?}") })?
        };
        Ok(Self { pencil, shift, factor })
    }

    /// `(K - shift M)^-1 (M x)` for every column of `x`.
    pub fn apply(&self, x: &Mat<c64>) -> Mat<c64> {
        let mut rhs = self.pencil.mass.mul_mat(x);
        match &self.factor {
            Factor::Cholesky(f) => f.solve_in_place(rhs.as_mut()),
            Factor::Lu(f) => f.solve_in_place(rhs.as_mut()),
        }
        rhs
    }
}

pub(super) struct KrylovOutcome {
    pub values: Vec<f64>,
    pub vectors: Mat<c64>,
    pub residuals: Vec<f64>,
    pub restarts: usize,
    pub converged: bool,
}

pub(super) struct KrylovParams {
    pub wanted: usize,
    pub block: usize,
    pub steps: usize,
    pub tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

fn col(m: &Mat<c64>, j: usize) -> &[c64] {
    m.col(j).try_as_col_major().unwrap().as_slice()
}

fn col_mut(m: &mut Mat<c64>, j: usize) -> &mut [c64] {
    m.col_mut(j).try_as_col_major_mut().unwrap().as_slice_mut()
}

fn dot(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn take_columns(m: &Mat<c64>, count: usize) -> Mat<c64> {
    Mat::from_fn(m.nrows(), count, |i, j| m[(i, j)])
}

/// Orthonormalizes the columns of `w` in the M inner product against the
/// first `used` columns of `basis` and against each other. Directions that
/// collapse are dropped. Returns the surviving block and its image under M.
///
/// Two passes of block projection followed by an eigendecomposition of the
/// M-Gram matrix of the block; the first projection is repeated once.
fn m_orthonormalize(
    pencil: &Pencil<'_>,
    w: Mat<c64>,
    basis: &Mat<c64>,
    mbasis: &Mat<c64>,
    used: usize,
) -> (Mat<c64>, Mat<c64>) {
    let n = w.nrows();
    let mut w = w;
    let mut mw = Mat::<c64>::zeros(n, 0);
    for pass in 0..2 {
        if used > 0 {
            let v = basis.as_ref().subcols(0, used);
            let mv = mbasis.as_ref().subcols(0, used);
            for _ in 0..2 - pass {
                let coeffs = mv.adjoint() * &w;
                w = &w - v * &coeffs;
            }
        }
        mw = pencil.mass.mul_mat(&w);
        if pass == 0 {
            // Unit columns after projection: the floor below then only
            // detects dependence inside the block.
            let norms: Vec<f64> =
                (0..w.ncols()).map(|j| dot(col(&w, j), col(&mw, j)).re.max(0.0).sqrt()).collect();
            let live: Vec<usize> = (0..w.ncols()).filter(|&j| norms[j] > 0.0).collect();
            w = Mat::from_fn(n, live.len(), |i, j| w[(i, live[j])] / norms[live[j]]);
            mw = Mat::from_fn(n, live.len(), |i, j| mw[(i, live[j])] / norms[live[j]]);
        }
        if w.ncols() == 0 {
            break;
        }
        let g = w.adjoint() * &mw;
        let k = g.ncols();
        let g = Mat::from_fn(k, k, |i, j| 0.5 * (g[(i, j)] + g[(j, i)].conj()));
        let Ok(evd) = g.self_adjoint_eigen(Side::Lower) else {
            return (Mat::zeros(n, 0), Mat::zeros(n, 0));
        };
        let keep: Vec<usize> = (0..k).rev().filter(|&i| evd.S()[i].re > 1e-14).collect();
        let t = Mat::from_fn(k, keep.len(), |i, j| evd.U()[(i, keep[j])] / evd.S()[keep[j]].re.sqrt());
        w = &w * &t;
        mw = &mw * &t;
    }
    (w, mw)
}

fn copy_into(dst: &mut Mat<c64>, offset: usize, src: &Mat<c64>) {
    for j in 0..src.ncols() {
        col_mut(dst, offset + j).copy_from_slice(col(src, j));
    }
}

pub(super) fn block_krylov(
    pencil: &Pencil<'_>,
    op: &ShiftInvert<'_>,
    params: &KrylovParams,
) -> KrylovOutcome {
    let n = pencil.dim();
    let block = params.block.min(n);
    let capacity = (block * (params.steps + 1)).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let start = Mat::from_fn(n, block, |_, _| {
        c64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let empty = Mat::<c64>::zeros(n, 0);
    let (mut x, _) = m_orthonormalize(pencil, start, &empty, &empty, 0);
    let mut ax = op.apply(&x);

    let mut outcome = KrylovOutcome {
        values: Vec::new(),
        vectors: Mat::zeros(n, 0),
        residuals: Vec::new(),
        restarts: 0,
        converged: false,
    };

    for restart in 0..params.max_restarts.max(1) {
        let mut basis = Mat::<c64>::zeros(n, capacity);
        let mut mbasis = Mat::<c64>::zeros(n, capacity);
        let mut images = Mat::<c64>::zeros(n, capacity);

        // Ritz vectors from the previous pass are already M-orthonormal.
        let mx = pencil.mass.mul_mat(&x);
        copy_into(&mut basis, 0, &x);
        copy_into(&mut mbasis, 0, &mx);
        copy_into(&mut images, 0, &ax);
        let mut used = x.ncols();
        let mut last_start = 0;
        for _ in 0..params.steps {
            if used >= capacity {
                break;
            }
            let last = Mat::from_fn(n, used - last_start, |i, j| images[(i, last_start + j)]);
            let (mut q, mut mq) = m_orthonormalize(pencil, last, &basis, &mbasis, used);
            let room = capacity - used;
            if q.ncols() > room {
                q = take_columns(&q, room);
                mq = take_columns(&mq, room);
            }
            if q.ncols() == 0 {
                break;
            }
            let aq = op.apply(&q);
            copy_into(&mut basis, used, &q);
            copy_into(&mut mbasis, used, &mq);
            copy_into(&mut images, used, &aq);
            last_start = used;
            used += q.ncols();
        }

        let v = basis.as_ref().subcols(0, used);
        let mv = mbasis.as_ref().subcols(0, used);
        let y = images.as_ref().subcols(0, used);
        let h = mv.adjoint() * y;
        let h = Mat::from_fn(used, used, |i, j| 0.5 * (h[(i, j)] + h[(j, i)].conj()));
        let evd = match h.self_adjoint_eigen(Side::Lower) {
            Ok(e) => e,
            Err(_) => break,
        };
        let mut order: Vec<usize> = (0..used).collect();
        order.sort_by(|&a, &b| evd.S()[b].re.abs().total_cmp(&evd.S()[a].re.abs()));
        let keep = block.min(used);
        let s = Mat::from_fn(used, keep, |i, j| evd.U()[(i, order[j])]);
        let thetas: Vec<f64> = order[..keep].iter().map(|&k| evd.S()[k].re).collect();
        x = v * &s;
        ax = y * &s;

        let wanted = params.wanted.min(keep);
        let mut values = Vec::with_capacity(wanted);
        let mut residuals = Vec::with_capacity(wanted);
        for j in 0..wanted {
            let lambda = op.shift + 1.0 / thetas[j];
            let xj = col(&x, j);
            let kx = pencil.stiffness.mul_vec(xj);
            let mx = pencil.mass.mul_vec(xj);
            let r: f64 = kx.iter().zip(&mx).map(|(a, b)| (a - lambda * b).norm_sqr()).sum::<f64>().sqrt();
            let mnorm: f64 = mx.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            values.push(lambda);
            residuals.push(if mnorm > 0.0 { r / mnorm } else { f64::INFINITY });
        }
        let converged = wanted == params.wanted
            && values.iter().zip(&residuals).all(|(l, r)| *r <= params.tol * l.abs().max(1.0));
        outcome = KrylovOutcome {
            values,
            vectors: take_columns(&x, wanted),
            residuals,
            restarts: restart + 1,
            converged,
        };
        if converged {
            break;
        }
    }
    outcome
}
