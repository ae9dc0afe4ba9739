//! Dense small-matrix kernels: matrix exponential, the φ1 function, ridge
//! least squares and the row-wise Kronecker product used to assemble the
//! lifted regression.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Everything here is pure.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{dim_err, KeecError, Result};

pub type Matrix = DMatrix<f64>;

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// 1-norm bounds below which the [m/m] approximant is accurate to unit roundoff.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.53939833006323e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068e0;
const THETA13: f64 = 5.371920351148152e0;

fn check_square_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(dim_err(format!(
            "{what} needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KeecError::Numeric(format!("{what}: input has non-finite entries")));
    }
    Ok(())
}

fn one_norm(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Odd/even split of a low-order Padé approximant: returns (U, V).
fn pade_low(a: &Matrix, b: &[f64]) -> (Matrix, Matrix) {
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    let a2 = a * a;
    let mut u = &ident * b[1];
    let mut v = &ident * b[0];
    let mut pow = ident.clone();
    for k in 1..b.len() / 2 {
        pow = &pow * &a2;
        u += &pow * b[2 * k + 1];
        v += &pow * b[2 * k];
    }
    (a * u, v)
}

fn pade13(a: &Matrix) -> (Matrix, Matrix) {
    let b = &PADE13;
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    (u, v)
}

/// Matrix exponential by scaling and squaring on a diagonal Padé kernel.
pub fn mat_exp(a: &Matrix) -> Result<Matrix> {
    check_square_finite(a, "mat_exp")?;
    let n = a.nrows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let norm = one_norm(a);
    let (u, v, squarings) = if norm <= THETA3 {
        let (u, v) = pade_low(a, &PADE3);
        (u, v, 0)
    } else if norm <= THETA5 {
        let (u, v) = pade_low(a, &PADE5);
        (u, v, 0)
    } else if norm <= THETA7 {
        let (u, v) = pade_low(a, &PADE7);
        (u, v, 0)
    } else if norm <= THETA9 {
        let (u, v) = pade_low(a, &PADE9);
        (u, v, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        let scaled = a * 2f64.powi(-s);
        let (u, v) = pade13(&scaled);
        (u, v, s)
    };
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| KeecError::Numeric("mat_exp: singular Padé denominator".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(KeecError::Numeric("mat_exp: result overflowed".into()));
    }
    Ok(r)
}

/// Returns `(exp(A), φ1(A)·B)` from one exponential of the block matrix
/// `[[A, B], [0, 0]]`. `B` must have as many rows as `A`.
pub fn exp_and_phi1_times(a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    check_square_finite(a, "phi1")?;
    let n = a.nrows();
    if b.nrows() != n {
        return Err(dim_err(format!("phi1: B has {} rows, A is {n}x{n}", b.nrows())));
    }
    let k = b.ncols();
    let mut aug = Matrix::zeros(n + k, n + k);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, k)).copy_from(b);
    let e = mat_exp(&aug)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, k)).into_owned(),
    ))
}

/// φ1(A) = Σ_k A^k/(k+1)!, so that A·φ1(A) + I = exp(A). Defined for
/// singular A; no inverse is ever formed.
pub fn phi1(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    check_square_finite(a, "phi1")?;
    let (_, phi) = exp_and_phi1_times(a, &Matrix::identity(n, n))?;
    Ok(phi)
}

/// Ridge solution together with the regulariser that was actually applied.
#[derive(Debug, Clone)]
pub struct RidgeSolution {
    pub solution: Matrix,
    pub eps_used: f64,
    /// True when the Gram matrix was numerically rank-deficient and the
    /// regulariser had to be raised above the requested value.
    pub eps_raised: bool,
}

const RANK_TOL: f64 = 1e-13;
const MIN_EPS: f64 = 1e-12;

fn factor_ok(chol: &Cholesky<f64, Dyn>, scale: f64) -> bool {
    let l = chol.l_dirty();
    (0..l.nrows()).all(|i| {
        let d = l[(i, i)];
        d.is_finite() && d * d > RANK_TOL * scale
    })
}

/// Solves `(XᵀX + eps·I) C = XᵀY` by Cholesky on the regularised Gram matrix.
pub fn ridge_lstsq_detailed(x: &Matrix, y: &Matrix, eps: f64) -> Result<RidgeSolution> {
    if x.nrows() != y.nrows() {
        return Err(dim_err(format!(
            "ridge_lstsq: X has {} rows, Y has {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(KeecError::Config(format!("ridge_lstsq: eps must be >= 0, got {eps}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(KeecError::Numeric("ridge_lstsq: non-finite input".into()));
    }
    let p = x.ncols();
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    let scale = (0..p).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(1.0);

    let attempt = |e: f64| -> Option<Matrix> {
        let mut g = gram.clone();
        for i in 0..p {
            g[(i, i)] += e;
        }
        let chol = Cholesky::new(g)?;
        factor_ok(&chol, scale).then(|| chol.solve(&rhs))
    };

    if let Some(sol) = attempt(eps) {
        return Ok(RidgeSolution { solution: sol, eps_used: eps, eps_raised: false });
    }
    if eps == 0.0 {
        return Err(KeecError::Rank(format!(
            "Gram matrix of the {}x{p} design is singular and eps = 0",
            x.nrows()
        )));
    }
    let mut e = eps.max(MIN_EPS * scale);
    for _ in 0..8 {
        if let Some(sol) = attempt(e) {
            return Ok(RidgeSolution { solution: sol, eps_used: e, eps_raised: true });
        }
        e *= 100.0;
    }
    Err(KeecError::Rank("ridge_lstsq: could not regularise the Gram matrix".into()))
}

pub fn ridge_lstsq(x: &Matrix, y: &Matrix, eps: f64) -> Result<Matrix> {
    ridge_lstsq_detailed(x, y, eps).map(|r| r.solution)
}

/// Row-wise Kronecker product: row i of the result is `kron(Z_i, A_i)`,
/// i.e. entry `(i, j*d + k) = Z[i,j] * A[i,k]`.
pub fn colwise_kron(z: &Matrix, a: &Matrix) -> Result<Matrix> {
    if z.nrows() != a.nrows() {
        return Err(dim_err(format!(
            "colwise_kron: {} rows vs {} rows",
            z.nrows(),
            a.nrows()
        )));
    }
    let (n, d) = (z.ncols(), a.ncols());
    Ok(Matrix::from_fn(z.nrows(), n * d, |i, c| z[(i, c / d)] * a[(i, c % d)]))
}
