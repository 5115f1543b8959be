//! Dense complex linear algebra: matrix exponential, superoperator
//! construction and small helpers.
//!
//! Density matrices are vectorized column-stacked, so that
//! `vec(A ρ B) = (Bᵀ ⊗ A) vec(ρ)`. This matches nalgebra's column-major
//! storage, and `vectorize` is a plain copy of the backing slice.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

pub fn dagger(m: &CMatrix) -> CMatrix {
    m.adjoint()
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// `ρ ↦ A ρ`
pub fn spre(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    kron(&CMatrix::identity(n, n), a)
}

/// `ρ ↦ ρ B`
pub fn spost(b: &CMatrix) -> CMatrix {
    let n = b.nrows();
    kron(&b.transpose(), &CMatrix::identity(n, n))
}

/// `ρ ↦ L ρ L†`
pub fn sandwich(l: &CMatrix) -> CMatrix {
    kron(&l.conjugate(), l)
}

/// `ρ ↦ Γ (L ρ L† − ½{L†L, ρ})`
pub fn dissipator(l: &CMatrix, rate: f64) -> CMatrix {
    let ldl = dagger(l) * l;
    (sandwich(l) - (spre(&ldl) + spost(&ldl)) * c(0.5)) * c(rate)
}

pub fn vectorize(m: &CMatrix) -> CVector {
    CVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &CVector, dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, v.as_slice())
}

/// Row vector `w` with `w · vec(ρ) = Tr ρ`.
pub fn trace_functional(dim: usize) -> CVector {
    vectorize(&CMatrix::identity(dim, dim))
}

/// `Tr ρ` read off a vectorized density matrix.
pub fn vec_trace(v: &CVector, dim: usize) -> Complex64 {
    (0..dim).map(|i| v[i + dim * i]).sum()
}

/// Maximum absolute column sum.
pub fn one_norm(m: &CMatrix) -> f64 {
    m.column_iter().map(|col| col.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest deviation from Hermiticity, `max |M − M†|`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = hermitize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Eigen-decomposition of a Hermitian matrix: ascending eigenvalues and the
/// matching orthonormal eigenvectors as columns.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = hermitize(m).symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    (values, vectors)
}

/// Spectral norm of a Hermitian matrix.
pub fn hermitian_norm(m: &CMatrix) -> f64 {
    hermitian_eigenvalues(m).into_iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

// Padé coefficients and switch points from Higham (2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] =
    [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
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
#[allow(clippy::excessive_precision)]
const THETA: [(usize, f64); 4] =
    [(3, 1.495585217958292e-2), (5, 2.539398330063230e-1), (7, 9.504178996162932e-1), (9, 2.097847961257068)];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 3, 5, 7, 9 or 13 chosen from the 1-norm.
///
/// Panics if `a` is not square.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    let ident = CMatrix::identity(n, n);
    if norm == 0.0 {
        return ident;
    }

    for &(m, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let (u, v) = pade_low(a, coeffs);
            return pade_solve(&u, &v);
        }
    }

    let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
    let scaled = a * c(0.5f64.powi(s));
    let (u, v) = pade13(&scaled);
    let mut r = pade_solve(&u, &v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade_low(a: &CMatrix, b: &[f64]) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    let a2 = a * a;
    let mut power = CMatrix::identity(n, n);
    let mut u_inner = CMatrix::zeros(n, n);
    let mut v = CMatrix::zeros(n, n);
    for k in 0..b.len() / 2 {
        v += &power * c(b[2 * k]);
        u_inner += &power * c(b[2 * k + 1]);
        power = &power * &a2;
    }
    (a * u_inner, v)
}

fn pade13(a: &CMatrix) -> (CMatrix, CMatrix) {
    let b = &PADE13;
    let n = a.nrows();
    let ident = CMatrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_hi = &a6 * (&a6 * c(b[13]) + &a4 * c(b[11]) + &a2 * c(b[9]));
    let u_inner = u_hi + &a6 * c(b[7]) + &a4 * c(b[5]) + &a2 * c(b[3]) + &ident * c(b[1]);
    let u = a * u_inner;
    let v_hi = &a6 * (&a6 * c(b[12]) + &a4 * c(b[10]) + &a2 * c(b[8]));
    let v = v_hi + &a6 * c(b[6]) + &a4 * c(b[4]) + &a2 * c(b[2]) + &ident * c(b[0]);
    (u, v)
}

fn pade_solve(u: &CMatrix, v: &CMatrix) -> CMatrix {
    let numer = v + u;
    let denom = v - u;
    denom.lu().solve(&numer).expect("Padé denominator is nonsingular for norms inside the approximation region")
}

/// Returns `(e^{A h}, ∫₀^h e^{A s} ds)` from one exponential of the block
/// matrix `[[A h, h I], [0, 0]]`.
pub fn expm_with_integral(a: &CMatrix, h: f64) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    let mut block = CMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(a * c(h)));
    block.view_mut((0, n), (n, n)).copy_from(&(CMatrix::identity(n, n) * c(h)));
    let e = expm(&block);
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, n)).into_owned())
}
