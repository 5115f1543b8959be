//! Deterministic open-system dynamics on the 12-state charge basis.
//!
//! Generators are assembled as dense 144×144 superoperators acting on
//! column-stacked density matrices. Evolution uses the scaling-and-squaring
//! exponential; an adaptive Runge–Kutta integrator is kept as an independent
//! cross-check.

use nalgebra::Matrix4;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::{
    build_effective_hamiltonian, build_full_hamiltonian, build_jump_operators, number_op, ChargeState, Dot, JumpKind,
    OperatorMatrix, DIM, SINGLET_C,
};
use crate::linalg::{
    c, dissipator, expm, hermitian_eigenvalues, hermiticity_defect, hermitize, max_abs, sandwich, spost, spre,
    unvectorize, vec_trace, vectorize, CMatrix, CVector, I,
};
use crate::model::{HamiltonianKind, SystemParams};

/// Dimension of the vectorized density matrix.
pub const SUPER_DIM: usize = DIM * DIM;

/// Relative singular-value cutoff used to count stationary states.
const NULLSPACE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != DIM || m.ncols() != DIM {
            return Err(Error::InvalidParameter(format!(
                "density matrix must be {DIM}x{DIM}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(m))
    }

    /// `|s><s|`
    pub fn pure(s: ChargeState) -> Self {
        let mut m = CMatrix::zeros(DIM, DIM);
        m[(s.index(), s.index())] = c(1.0);
        Self(m)
    }

    pub fn from_vector(v: &CVector) -> Self {
        Self(unvectorize(v, DIM))
    }

    pub fn to_vector(&self) -> CVector {
        vectorize(&self.0)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn normalized(&self) -> Self {
        Self(&self.0 * c(1.0 / self.trace()))
    }

    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_eigenvalues(&self.0)[0]
    }

    /// `Tr(O ρ)`, real part.
    pub fn expectation(&self, op: &OperatorMatrix) -> f64 {
        (op * &self.0).trace().re
    }

    pub fn population(&self, s: ChargeState) -> f64 {
        self.0[(s.index(), s.index())].re
    }

    pub fn occupations(&self) -> [f64; 3] {
        [Dot::A, Dot::B, Dot::C].map(|d| self.expectation(&number_op(d)))
    }

    /// Trace distance `½ ‖ρ − σ‖₁`.
    pub fn trace_distance(&self, other: &Self) -> f64 {
        let diff = hermitize(&(&self.0 - &other.0));
        0.5 * hermitian_eigenvalues(&diff).iter().map(|x| x.abs()).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuperoperatorKind {
    Full,
    /// Full generator with the A and B emission sandwiches removed.
    NoJumpAB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    pub matrix: CMatrix,
    pub kind: SuperoperatorKind,
}

impl Superoperator {
    pub fn apply(&self, rho: &DensityMatrix) -> DensityMatrix {
        DensityMatrix::from_vector(&(&self.matrix * rho.to_vector()))
    }

    pub fn apply_vec(&self, v: &CVector) -> CVector {
        &self.matrix * v
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm()
    }
}

fn commutator_generator(h: &OperatorMatrix) -> CMatrix {
    (spre(h) - spost(h)) * (-I)
}

/// `L ρ = −i[H, ρ] + Σ_k Γ_k (L_k ρ L_k† − ½{L_k†L_k, ρ})`.
pub fn liouvillian(p: &SystemParams, choice: HamiltonianKind) -> Superoperator {
    let h = match choice {
        HamiltonianKind::Full => build_full_hamiltonian(p),
        HamiltonianKind::Effective => build_effective_hamiltonian(p),
    };
    let mut matrix = commutator_generator(&h);
    for jump in build_jump_operators(p) {
        matrix += dissipator(&jump.op, jump.rate);
    }
    Superoperator { matrix, kind: SuperoperatorKind::Full }
}

/// Liouvillian built from the Hamiltonian selected in `p`.
pub fn generator(p: &SystemParams) -> Superoperator {
    liouvillian(p, p.hamiltonian)
}

/// Emission super-operators `J_A ρ = Γ_A c_a ρ c_a†` and `J_B`.
pub fn emission_superoperators(p: &SystemParams) -> (CMatrix, CMatrix) {
    let mut j_a = CMatrix::zeros(SUPER_DIM, SUPER_DIM);
    let mut j_b = CMatrix::zeros(SUPER_DIM, SUPER_DIM);
    for jump in build_jump_operators(p) {
        match jump.kind {
            JumpKind::DrainA => j_a = sandwich(&jump.op) * c(jump.rate),
            JumpKind::DrainB => j_b = sandwich(&jump.op) * c(jump.rate),
            _ => {}
        }
    }
    (j_a, j_b)
}

/// Generator of event-free evolution with respect to the monitored leads A
/// and B. Its trace gives the probability of no emission in `[0, t]`.
pub fn exclusive_liouvillian(p: &SystemParams) -> Superoperator {
    let full = generator(p);
    let (j_a, j_b) = emission_superoperators(p);
    Superoperator { matrix: full.matrix - j_a - j_b, kind: SuperoperatorKind::NoJumpAB }
}

fn check_finite_matrix(m: &CMatrix, what: &'static str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `exp(L t) ρ₀`.
pub fn evolve(rho0: &DensityMatrix, l: &Superoperator, t: f64) -> Result<DensityMatrix> {
    if !t.is_finite() {
        return Err(Error::NonFinite("time"));
    }
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("evolution time {t} is negative")));
    }
    check_finite_matrix(rho0.matrix(), "initial state")?;
    check_finite_matrix(&l.matrix, "generator")?;
    if t == 0.0 {
        return Ok(rho0.clone());
    }
    let propagator = expm(&(&l.matrix * c(t)));
    Ok(DensityMatrix::from_vector(&(propagator * rho0.to_vector())))
}

fn rk4_step(l: &CMatrix, v: &CVector, h: f64) -> CVector {
    let hc = c(h);
    let k1 = l * v;
    let k2 = l * (v + &k1 * (hc * 0.5));
    let k3 = l * (v + &k2 * (hc * 0.5));
    let k4 = l * (v + &k3 * hc);
    v + (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * (hc / 6.0)
}

fn rk4_integrate(l: &CMatrix, v0: &CVector, t: f64, steps: usize) -> CVector {
    let h = t / steps as f64;
    (0..steps).fold(v0.clone(), |v, _| rk4_step(l, &v, h))
}

/// Classical RK4 with step halving until two successive refinements differ
/// by less than `tol` in max-norm. Slow; used to cross-check [`evolve`].
pub fn evolve_rk(rho0: &DensityMatrix, l: &Superoperator, t: f64, tol: f64) -> Result<DensityMatrix> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidParameter(format!("evolution time {t} is invalid")));
    }
    let v0 = rho0.to_vector();
    let scale = l.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let mut steps = ((t * scale * SUPER_DIM as f64).ceil() as usize).clamp(1, 1 << 12);
    let mut prev = rk4_integrate(&l.matrix, &v0, t, steps);
    for _ in 0..20 {
        steps *= 2;
        let next = rk4_integrate(&l.matrix, &v0, t, steps);
        let err = (&next - &prev).iter().map(|z| z.norm()).fold(0.0, f64::max);
        prev = next;
        if err < tol {
            return Ok(DensityMatrix::from_vector(&prev));
        }
    }
    Err(Error::Consistency(format!("RK4 did not reach tolerance {tol}")))
}

/// Number of singular values of `L` below the nullspace cutoff, and the
/// right singular vector of the smallest one.
fn nullspace(l: &Superoperator) -> (usize, CVector) {
    let svd = l.matrix.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors were requested");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = NULLSPACE_TOLERANCE * sigma_max.max(1e-300);
    let dimension = sigma.iter().filter(|&&s| s <= cutoff).count();
    let k_min = (0..sigma.len()).min_by(|&a, &b| sigma[a].total_cmp(&sigma[b])).expect("non-empty spectrum");
    let vector = v_t.row(k_min).adjoint();
    (dimension, vector)
}

/// Unique stationary state of a full Liouvillian.
pub fn steady_state(l: &Superoperator) -> Result<DensityMatrix> {
    if l.kind != SuperoperatorKind::Full {
        return Err(Error::InvalidParameter("steady state requires the full (trace-preserving) generator".into()));
    }
    let (dimension, vector) = nullspace(l);
    if dimension != 1 {
        return Err(Error::DegenerateSteadyState { dimension });
    }
    let tr = vec_trace(&vector, DIM);
    if tr.norm() < 1e-300 {
        return Err(Error::Consistency("stationary vector is traceless".into()));
    }
    let rho = hermitize(&unvectorize(&(vector / tr), DIM));
    Ok(DensityMatrix(&rho * c(1.0 / rho.trace().re)))
}

/// Steady state of the device, checking that it carries current.
pub fn steady_state_of(p: &SystemParams) -> Result<DensityMatrix> {
    p.validate()?;
    if p.g == 0.0 || p.coupling_b() == 0.0 {
        return Err(Error::NoTransport("coherent coupling is zero".into()));
    }
    if p.gamma_c == 0.0 {
        return Err(Error::NoTransport("gamma_c = 0: the source lead is closed".into()));
    }
    if p.gamma_a == 0.0 || p.gamma_b == 0.0 {
        return Err(Error::NoTransport("a drain rate is zero".into()));
    }
    steady_state(&generator(p))
}

/// Particle currents of a state: into dot C from the source, and out
/// through each drain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Currents {
    pub input: f64,
    pub output_a: f64,
    pub output_b: f64,
}

impl Currents {
    pub fn output(&self) -> f64 {
        self.output_a + self.output_b
    }
}

pub fn currents(p: &SystemParams, rho: &DensityMatrix) -> Currents {
    let can_fill: f64 = ChargeState::all().filter(|s| s.n_c < 2).map(|s| rho.population(s)).sum();
    let [n_a, n_b, _] = rho.occupations();
    Currents { input: p.gamma_c * can_fill, output_a: p.gamma_a * n_a, output_b: p.gamma_b * n_b }
}

/// One row of the suppression map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressionRow {
    pub delta: f64,
    pub g: f64,
    pub p011_avg: f64,
}

/// Two-electron sector Hamiltonian in the order `|002>, |101>, |110>, |011>`,
/// with the resonant triple at zero and `|011>` at `−delta`.
pub fn two_electron_hamiltonian(delta: f64, g_a: f64, g_b: f64) -> Matrix4<f64> {
    let s = std::f64::consts::SQRT_2;
    #[rustfmt::skip]
    let h = Matrix4::new(
        0.0, s * g_a, 0.0, s * g_b,
        s * g_a, 0.0, g_b, 0.0,
        0.0, g_b, 0.0, g_a,
        s * g_b, 0.0, g_a, -delta,
    );
    h
}

const IDX_002: usize = 0;
const IDX_011: usize = 3;

/// Infinite-time average of the `|011>` population starting from `|002>`:
/// `Σ_k |<011|Π_k|002>|²` over the eigenprojectors `Π_k` of `h`.
pub fn time_averaged_population(h: &Matrix4<f64>) -> f64 {
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let scale = h.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;

    let mut total = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && eig.eigenvalues[order[end]] - eig.eigenvalues[order[start]] <= tol {
            end += 1;
        }
        let amplitude: f64 =
            order[start..end].iter().map(|&k| eig.eigenvectors[(IDX_011, k)] * eig.eigenvectors[(IDX_002, k)]).sum();
        total += amplitude * amplitude;
        start = end;
    }
    total
}

/// `(1/T) ∫₀^T |<011| e^{−iHt} |002>|² dt` by composite Simpson on an exact
/// step propagator.
pub fn time_averaged_population_numeric(h: &Matrix4<f64>, horizon: f64) -> f64 {
    let h_c = CMatrix::from_fn(4, 4, |i, j| c(h[(i, j)]));
    let omega = (0..4).map(|i| (0..4).map(|j| h[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut steps = ((horizon * omega * 8.0).ceil() as usize).max(64);
    steps += steps % 2;
    let dt = horizon / steps as f64;
    let step = expm(&(&h_c * (-I * dt)));
    let mut psi = CVector::zeros(4);
    psi[IDX_002] = c(1.0);
    let mut sum = 0.0;
    for k in 0..=steps {
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * psi[IDX_011].norm_sqr();
        psi = &step * psi;
    }
    sum * dt / 3.0 / horizon
}

/// Time-averaged `|011>` population over a `(delta, g)` grid. The C↔B
/// coupling keeps the ratio `coupling_b / coupling_a` of `base`.
pub fn suppression_scan(base: &SystemParams, delta_grid: &[f64], g_grid: &[f64]) -> Vec<SuppressionRow> {
    let ratio = if base.g != 0.0 { base.coupling_b() / base.g } else { 1.0 };
    let points: Vec<(f64, f64)> = g_grid.iter().flat_map(|&g| delta_grid.iter().map(move |&d| (d, g))).collect();
    points
        .par_iter()
        .map(|&(delta, g)| SuppressionRow {
            delta,
            g,
            p011_avg: time_averaged_population(&two_electron_hamiltonian(delta, g, g * ratio)),
        })
        .collect()
}

/// `Tr ρ` of a vectorized density matrix, real part.
pub fn trace_of(v: &CVector) -> f64 {
    vec_trace(v, DIM).re
}

/// Initial state for a transport cycle: the singlet on dot C.
pub fn singlet() -> DensityMatrix {
    DensityMatrix::pure(SINGLET_C)
}

/// Largest real part in the spectrum of `l`.
pub fn spectral_abscissa(l: &Superoperator) -> f64 {
    l.matrix
        .clone()
        .schur()
        .eigenvalues()
        .map(|ev| ev.iter().map(|z: &Complex64| z.re).fold(f64::NEG_INFINITY, f64::max))
        .unwrap_or(f64::NAN)
}

/// Maximum entry of `|L ρ|`, used as a stationarity residual.
pub fn residual(l: &Superoperator, rho: &DensityMatrix) -> f64 {
    max_abs(&unvectorize(&(&l.matrix * rho.to_vector()), DIM))
}
