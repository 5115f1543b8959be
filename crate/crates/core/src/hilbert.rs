//! Twelve-state charge basis `|n_A n_B n_C>` and the operators acting on it.
//!
//! Dots A and B hold at most one electron, dot C at most two. Spin is
//! reduced out; the singlet matrix element survives as the √2 factor on the
//! `1 ↔ 2` ladder step of dot C. With a single orbital per dot the fermionic
//! signs never enter a computed quantity and are not tracked.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{c, dagger, CMatrix};
use crate::model::{HamiltonianKind, SystemParams};

pub const DIM: usize = 12;

/// Operators on the charge basis are dense 12×12 complex matrices.
pub type OperatorMatrix = CMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChargeState {
    pub n_a: u8,
    pub n_b: u8,
    pub n_c: u8,
}

impl ChargeState {
    pub const fn new(n_a: u8, n_b: u8, n_c: u8) -> Self {
        Self { n_a, n_b, n_c }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < DIM).then(|| Self::new((index / 6) as u8, ((index / 3) % 2) as u8, (index % 3) as u8))
    }

    pub fn index(self) -> usize {
        basis_index(self).expect("ChargeState built with out-of-range occupation")
    }

    pub fn total_charge(self) -> u8 {
        self.n_a + self.n_b + self.n_c
    }

    pub fn all() -> impl Iterator<Item = ChargeState> {
        (0..DIM).filter_map(Self::from_index)
    }
}

impl fmt::Display for ChargeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|{}{}{}>", self.n_a, self.n_b, self.n_c)
    }
}

/// Named states of the two-electron sector.
pub const SINGLET_C: ChargeState = ChargeState::new(0, 0, 2);
pub const STATE_101: ChargeState = ChargeState::new(1, 0, 1);
pub const STATE_110: ChargeState = ChargeState::new(1, 1, 0);
pub const STATE_011: ChargeState = ChargeState::new(0, 1, 1);
pub const VACUUM: ChargeState = ChargeState::new(0, 0, 0);

pub fn basis_index(s: ChargeState) -> Result<usize> {
    if s.n_a > 1 || s.n_b > 1 || s.n_c > 2 {
        return Err(Error::OccupationOutOfRange { n_a: s.n_a, n_b: s.n_b, n_c: s.n_c });
    }
    Ok(6 * s.n_a as usize + 3 * s.n_b as usize + s.n_c as usize)
}

/// Lowering operators on the three dots.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweringOps {
    /// `|0><1|` on dot A.
    pub c_a: OperatorMatrix,
    /// `|0><1|` on dot B.
    pub c_b: OperatorMatrix,
    /// `|0><1|` on dot C.
    pub c_c: OperatorMatrix,
    /// `|1><2|` on dot C.
    pub c_2c: OperatorMatrix,
}

fn ladder(step: impl Fn(ChargeState) -> Option<ChargeState>) -> OperatorMatrix {
    let mut m = OperatorMatrix::zeros(DIM, DIM);
    for s in ChargeState::all() {
        if let Some(t) = step(s) {
            m[(t.index(), s.index())] = c(1.0);
        }
    }
    m
}

pub fn lowering_ops() -> LoweringOps {
    LoweringOps {
        c_a: ladder(|s| (s.n_a == 1).then_some(ChargeState { n_a: 0, ..s })),
        c_b: ladder(|s| (s.n_b == 1).then_some(ChargeState { n_b: 0, ..s })),
        c_c: ladder(|s| (s.n_c == 1).then_some(ChargeState { n_c: 0, ..s })),
        c_2c: ladder(|s| (s.n_c == 2).then_some(ChargeState { n_c: 1, ..s })),
    }
}

fn diagonal(f: impl Fn(ChargeState) -> f64) -> OperatorMatrix {
    let mut m = OperatorMatrix::zeros(DIM, DIM);
    for s in ChargeState::all() {
        m[(s.index(), s.index())] = c(f(s));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dot {
    A,
    B,
    C,
}

pub fn number_op(dot: Dot) -> OperatorMatrix {
    diagonal(|s| match dot {
        Dot::A => s.n_a,
        Dot::B => s.n_b,
        Dot::C => s.n_c,
    } as f64)
}

pub fn total_charge_op() -> OperatorMatrix {
    diagonal(|s| s.total_charge() as f64)
}

/// Projector onto the basis state `s`.
pub fn projector(s: ChargeState) -> OperatorMatrix {
    diagonal(|t| if t == s { 1.0 } else { 0.0 })
}

/// Diagonal energy of a basis state: on-site terms, C charging energy and
/// C–A, C–B repulsion (A–B repulsion is zero).
pub fn charge_energy(p: &SystemParams, s: ChargeState) -> f64 {
    let (na, nb, nc) = (s.n_a as f64, s.n_b as f64, s.n_c as f64);
    p.eps_a * na + p.eps_b * nb + p.eps_c * nc + if s.n_c == 2 { p.u } else { 0.0 } + p.v * nc * (na + nb)
}

/// Charge-sector Hamiltonian with hopping on every C↔A and C↔B channel.
pub fn build_full_hamiltonian(p: &SystemParams) -> OperatorMatrix {
    let ops = lowering_ops();
    let sqrt2 = std::f64::consts::SQRT_2;
    let hop_a = (dagger(&ops.c_a) * &ops.c_c + dagger(&ops.c_a) * &ops.c_2c * c(sqrt2)) * c(p.coupling_a());
    let hop_b = (dagger(&ops.c_b) * &ops.c_c + dagger(&ops.c_b) * &ops.c_2c * c(sqrt2)) * c(p.coupling_b());
    let hop = hop_a + hop_b;
    diagonal(|s| charge_energy(p, s)) + &hop + dagger(&hop)
}

/// Resonant-frame Hamiltonian coupling `|002> ↔ |101>` (√2 g) and
/// `|101> ↔ |110>` (g_b); zero diagonal, `|011>` uncoupled.
pub fn build_effective_hamiltonian(p: &SystemParams) -> OperatorMatrix {
    let ops = lowering_ops();
    let ident = OperatorMatrix::identity(DIM, DIM);
    let n_a = number_op(Dot::A);
    let n_b = number_op(Dot::B);
    let sqrt2 = std::f64::consts::SQRT_2;
    let to_c_from_a = dagger(&ops.c_2c) * &ops.c_a * (ident - n_b) * c(sqrt2 * p.coupling_a());
    let to_c_from_b = dagger(&ops.c_c) * &ops.c_b * n_a * c(p.coupling_b());
    let h = to_c_from_a + to_c_from_b;
    &h + dagger(&h)
}

pub fn build_hamiltonian(p: &SystemParams) -> OperatorMatrix {
    match p.hamiltonian {
        HamiltonianKind::Full => build_full_hamiltonian(p),
        HamiltonianKind::Effective => build_effective_hamiltonian(p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JumpKind {
    /// Electron leaves dot A into lead A.
    DrainA,
    /// Electron leaves dot B into lead B.
    DrainB,
    /// Lead C fills an empty dot C.
    FillC,
    /// Lead C adds the second electron to dot C.
    FillC2,
    Dephase(Dot),
}

impl JumpKind {
    pub fn is_drain(self) -> bool {
        matches!(self, Self::DrainA | Self::DrainB)
    }

    pub fn is_fill(self) -> bool {
        matches!(self, Self::FillC | Self::FillC2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpOperator {
    pub kind: JumpKind,
    pub op: OperatorMatrix,
    pub rate: f64,
}

/// Drain, source and dephasing jump operators; channels with zero rate are
/// omitted.
pub fn build_jump_operators(p: &SystemParams) -> Vec<JumpOperator> {
    let ops = lowering_ops();
    let candidates = [
        (JumpKind::DrainA, ops.c_a, p.gamma_a),
        (JumpKind::DrainB, ops.c_b, p.gamma_b),
        (JumpKind::FillC, dagger(&ops.c_c), p.gamma_c),
        (JumpKind::FillC2, dagger(&ops.c_2c), p.gamma_c),
        (JumpKind::Dephase(Dot::A), number_op(Dot::A), p.gamma_phi),
        (JumpKind::Dephase(Dot::B), number_op(Dot::B), p.gamma_phi),
        (JumpKind::Dephase(Dot::C), number_op(Dot::C), p.gamma_phi),
    ];
    candidates
        .into_iter()
        .filter(|(_, _, rate)| *rate > 0.0)
        .map(|(kind, op, rate)| JumpOperator { kind, op, rate })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hermiticity_defect, max_abs};
    use crate::model::make_operating_point;
    use approx::assert_relative_eq;

    fn op_point(u: f64, v: f64, g: f64) -> SystemParams {
        make_operating_point(u, v, g, 0.0, 1.0, 10.0, 0.04).unwrap().params
    }

    fn basis(s: ChargeState) -> nalgebra::DVector<num_complex::Complex64> {
        let mut v = nalgebra::DVector::zeros(DIM);
        v[s.index()] = c(1.0);
        v
    }

    fn elem(m: &OperatorMatrix, bra: ChargeState, ket: ChargeState) -> f64 {
        let z = m[(bra.index(), ket.index())];
        assert!(z.im.abs() < 1e-15);
        z.re
    }

    #[test]
    fn basis_index_examples() {
        assert_eq!(basis_index(ChargeState::new(0, 0, 0)).unwrap(), 0);
        assert_eq!(basis_index(ChargeState::new(0, 0, 2)).unwrap(), 2);
        assert_eq!(basis_index(ChargeState::new(1, 1, 2)).unwrap(), 11);
        assert!(basis_index(ChargeState::new(2, 0, 0)).is_err());
        assert!(basis_index(ChargeState::new(0, 0, 3)).is_err());
    }

    #[test]
    fn basis_index_is_bijective() {
        let indices: Vec<usize> = ChargeState::all().map(|s| s.index()).collect();
        assert_eq!(indices, (0..DIM).collect::<Vec<_>>());
        for i in 0..DIM {
            assert_eq!(ChargeState::from_index(i).unwrap().index(), i);
        }
        assert!(ChargeState::from_index(DIM).is_none());
    }

    #[test]
    fn lowering_examples() {
        let ops = lowering_ops();
        let out = &ops.c_a * basis(ChargeState::new(1, 0, 1));
        assert_eq!(out, basis(ChargeState::new(0, 0, 1)));
        let out = &ops.c_2c * basis(SINGLET_C);
        assert_eq!(out, basis(ChargeState::new(0, 0, 1)));
        let out = &ops.c_2c * basis(ChargeState::new(0, 0, 1));
        assert!(out.iter().all(|z| *z == c(0.0)));

        // Each ladder projector counts one rung: the sum marks an occupied C,
        // and weighting the upper rung twice recovers n_c.
        let occupied = dagger(&ops.c_c) * &ops.c_c + dagger(&ops.c_2c) * &ops.c_2c;
        for s in ChargeState::all() {
            assert_eq!(occupied[(s.index(), s.index())], c(s.n_c.min(1) as f64));
        }
        let count = dagger(&ops.c_c) * &ops.c_c + dagger(&ops.c_2c) * &ops.c_2c * c(2.0);
        assert_eq!(count, number_op(Dot::C));
    }

    #[test]
    fn lowering_nonzero_counts() {
        let ops = lowering_ops();
        let nnz = |m: &OperatorMatrix| m.iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nnz(&ops.c_a), 6);
        assert_eq!(nnz(&ops.c_b), 6);
        assert_eq!(nnz(&ops.c_c), 4);
        assert_eq!(nnz(&ops.c_2c), 4);
    }

    #[test]
    fn ladder_algebra() {
        let ops = lowering_ops();
        let zero = OperatorMatrix::zeros(DIM, DIM);
        assert_eq!(&ops.c_a * &ops.c_b - &ops.c_b * &ops.c_a, zero);
        assert_eq!(&ops.c_a * &ops.c_a, zero);
        assert_eq!(&ops.c_b * &ops.c_b, zero);
        assert_eq!(&ops.c_c * &ops.c_c, zero);
        assert_eq!(&ops.c_2c * &ops.c_2c, zero);
        assert_ne!(&ops.c_c * &ops.c_2c, zero);
    }

    #[test]
    fn full_hamiltonian_energies_at_operating_point() {
        let p = op_point(400.0, 100.0, 10.0);
        let h = build_full_hamiltonian(&p);
        assert_eq!(elem(&h, SINGLET_C, SINGLET_C), 400.0);
        assert_eq!(elem(&h, STATE_101, STATE_101), 400.0);
        assert_eq!(elem(&h, STATE_110, STATE_110), 400.0);
        assert_eq!(elem(&h, STATE_011, STATE_011), 200.0);
        assert_relative_eq!(elem(&h, SINGLET_C, STATE_101), 10.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert!(hermiticity_defect(&h) < 1e-12);
    }

    #[test]
    fn lone_electron_is_off_resonant() {
        let p = op_point(400.0, 100.0, 10.0);
        let e_c = charge_energy(&p, ChargeState::new(0, 0, 1));
        let e_a = charge_energy(&p, ChargeState::new(1, 0, 0));
        let e_b = charge_energy(&p, ChargeState::new(0, 1, 0));
        assert!((e_a - e_c).abs() >= 10.0 * p.g);
        assert!((e_b - e_c).abs() >= 10.0 * p.g);
    }

    #[test]
    fn zero_coupling_gives_diagonal_hamiltonians() {
        let p = op_point(400.0, 100.0, 0.0);
        let h = build_full_hamiltonian(&p);
        for i in 0..DIM {
            for j in 0..DIM {
                if i != j {
                    assert_eq!(h[(i, j)], c(0.0));
                }
            }
        }
        assert_eq!(max_abs(&build_effective_hamiltonian(&p)), 0.0);
    }

    #[test]
    fn two_electron_sector_is_the_four_chain() {
        let p = op_point(400.0, 100.0, 10.0);
        let h = build_full_hamiltonian(&p);
        let order = [SINGLET_C, STATE_101, STATE_110, STATE_011];
        let s = 10.0 * 2f64.sqrt();
        let g = 10.0;
        let expected = [[400.0, s, 0.0, s], [s, 400.0, g, 0.0], [0.0, g, 400.0, g], [s, 0.0, g, 200.0]];
        for (r, &bra) in order.iter().enumerate() {
            for (k, &ket) in order.iter().enumerate() {
                assert_relative_eq!(elem(&h, bra, ket), expected[r][k], epsilon = 1e-12);
            }
        }
        // No leakage out of the sector.
        for s in ChargeState::all().filter(|s| s.total_charge() != 2) {
            for &t in &order {
                assert_eq!(h[(s.index(), t.index())], c(0.0));
            }
        }
    }

    #[test]
    fn effective_hamiltonian_couplings() {
        let p = op_point(400.0, 100.0, 10.0);
        let h = build_effective_hamiltonian(&p);
        assert_relative_eq!(elem(&h, SINGLET_C, STATE_101), 10.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(elem(&h, STATE_101, STATE_110), 10.0, epsilon = 1e-12);
        for s in ChargeState::all() {
            assert_eq!(h[(STATE_011.index(), s.index())], c(0.0));
            assert_eq!(h[(s.index(), s.index())], c(0.0));
        }
        let triple = [SINGLET_C, STATE_101, STATE_110];
        let h2 = &h * &h;
        let tr: f64 = triple.iter().map(|s| h2[(s.index(), s.index())].re).sum();
        assert_relative_eq!(tr, 6.0 * 100.0, epsilon = 1e-10);
        // Only the triple is coupled.
        let nnz = h.iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nnz, 4);
    }

    #[test]
    fn full_and_effective_agree_on_the_triple() {
        let p = op_point(400.0, 100.0, 10.0);
        let full = build_full_hamiltonian(&p);
        let eff = build_effective_hamiltonian(&p);
        for (a, b) in [(SINGLET_C, STATE_101), (STATE_101, STATE_110), (SINGLET_C, STATE_110)] {
            assert_relative_eq!(elem(&full, a, b), elem(&eff, a, b), epsilon = 1e-12);
        }
    }

    #[test]
    fn hamiltonians_conserve_charge() {
        let n = total_charge_op();
        for p in [op_point(400.0, 100.0, 10.0), op_point(731.0, 190.0, -3.5).with_coupling_b(2.0)] {
            for h in [build_full_hamiltonian(&p), build_effective_hamiltonian(&p)] {
                assert!(max_abs(&(&h * &n - &n * &h)) < 1e-12);
                assert!(hermiticity_defect(&h) < 1e-12);
            }
        }
    }

    #[test]
    fn jump_operator_sets() {
        let p = op_point(400.0, 100.0, 10.0);
        let jumps = build_jump_operators(&p);
        let rates: Vec<f64> = jumps.iter().map(|j| j.rate).collect();
        assert_eq!(rates, vec![1.0, 10.0, 0.04, 0.04]);

        let mut q = p;
        q.gamma_c = 0.0;
        assert!(build_jump_operators(&q).iter().all(|j| !j.kind.is_fill()));

        let jumps = build_jump_operators(&p.with_dephasing(0.5));
        assert_eq!(jumps.len(), 7);
        assert_eq!(jumps.iter().filter(|j| matches!(j.kind, JumpKind::Dephase(_))).count(), 3);
    }
}
