//! Device parameters, the resonance/suppression algebra and operating-point
//! construction.
//!
//! All quantities use ħ = 1: energies and rates share one unit, times are
//! measured in its inverse.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Margin below which the `|011>` route is not considered suppressed.
pub const DEFAULT_MARGIN_THRESHOLD: f64 = 10.0;

/// Relative tolerance for the resonance conditions.
pub const RESONANCE_TOLERANCE: f64 = 1e-12;

/// Which coherent model drives the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HamiltonianKind {
    /// Charge-sector Hamiltonian with on-site energies, Coulomb terms and
    /// all four hopping channels.
    Full,
    /// Resonant-frame Hamiltonian restricted to the `|002>`, `|101>`,
    /// `|110>` chain.
    #[default]
    Effective,
}

impl FromStr for HamiltonianKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "effective" | "eff" => Ok(Self::Effective),
            other => Err(Error::InvalidParameter(format!("unknown hamiltonian '{other}' (expected full|effective)"))),
        }
    }
}

impl fmt::Display for HamiltonianKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Effective => "effective",
        })
    }
}

/// Parameters of the three-dot device and its leads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub eps_a: f64,
    pub eps_b: f64,
    pub eps_c: f64,
    /// Charging energy of the doubly occupied dot C.
    pub u: f64,
    /// Repulsion between dot C and either of A, B.
    pub v: f64,
    /// Coherent tunneling amplitude between C and A.
    pub g: f64,
    /// Coherent tunneling amplitude between C and B; equal to `g` when unset.
    pub g_b: Option<f64>,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gamma_c: f64,
    /// Pure charge dephasing rate on every dot.
    pub gamma_phi: f64,
    pub hamiltonian: HamiltonianKind,
}

impl Default for SystemParams {
    /// The clean-regime operating point at u = 400, v = 100, g = 10 with
    /// gamma_a as the unit.
    fn default() -> Self {
        make_operating_point(400.0, 100.0, 10.0, 0.0, 1.0, 10.0, 0.04)
            .expect("default operating point is finite")
            .params
    }
}

impl SystemParams {
    pub fn coupling_a(&self) -> f64 {
        self.g
    }

    pub fn coupling_b(&self) -> f64 {
        self.g_b.unwrap_or(self.g)
    }

    pub fn with_hamiltonian(mut self, kind: HamiltonianKind) -> Self {
        self.hamiltonian = kind;
        self
    }

    pub fn with_dephasing(mut self, gamma_phi: f64) -> Self {
        self.gamma_phi = gamma_phi;
        self
    }

    pub fn with_coupling_b(mut self, g_b: f64) -> Self {
        self.g_b = Some(g_b);
        self
    }

    /// Checks finiteness and sign constraints.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("eps_a", self.eps_a),
            ("eps_b", self.eps_b),
            ("eps_c", self.eps_c),
            ("u", self.u),
            ("v", self.v),
            ("g", self.g),
            ("g_b", self.coupling_b()),
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
            ("gamma_c", self.gamma_c),
            ("gamma_phi", self.gamma_phi),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {value} is not finite")));
            }
        }
        for (name, value) in [
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
            ("gamma_c", self.gamma_c),
            ("gamma_phi", self.gamma_phi),
        ] {
            if value < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} = {value} is negative")));
            }
        }
        Ok(())
    }

    /// Largest violation of the two resonance conditions, relative to the
    /// energy scale of the parameters.
    pub fn resonance_residual(&self) -> f64 {
        let (d_ca, d_cb) = resonance_detunings(self.u, self.v);
        let scale = [self.eps_a, self.eps_b, self.eps_c, self.u, self.v].iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        let r1 = ((self.eps_c - self.eps_a) - d_ca).abs();
        let r2 = ((self.eps_c - self.eps_b) - d_cb).abs();
        r1.max(r2) / scale
    }

    pub fn is_on_resonance(&self) -> bool {
        self.resonance_residual() <= RESONANCE_TOLERANCE
    }

    /// Largest incoherent rate.
    pub fn max_rate(&self) -> f64 {
        self.gamma_a.max(self.gamma_b).max(self.gamma_c).max(self.gamma_phi)
    }
}

/// Detunings of `|011>` from the resonant triple, in units of `|g|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressionMargins {
    pub m1: f64,
    pub m2: f64,
}

impl SuppressionMargins {
    pub fn min(&self) -> f64 {
        self.m1.min(self.m2)
    }

    pub fn is_suppressed(&self, threshold: f64) -> bool {
        self.min() >= threshold
    }
}

/// Result of [`make_operating_point`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub params: SystemParams,
    /// `(u - 2v) / |g|`; infinite when `g = 0`.
    pub coulomb_margin: f64,
    /// False when `u - 2v < 10 |g|`, i.e. the `|011>` route is not
    /// reliably suppressed.
    pub well_separated: bool,
}

/// Required values of `(eps_c - eps_a, eps_c - eps_b)` that put `|002>`,
/// `|101>` and `|110>` on resonance.
pub fn resonance_detunings(u: f64, v: f64) -> (f64, f64) {
    (v - u, -v)
}

/// Builds parameters that satisfy the resonance conditions exactly, with
/// `eps_c` as a free global offset. Weak Coulomb separation is reported
/// through [`OperatingPoint::well_separated`] and logged, not rejected.
pub fn make_operating_point(
    u: f64,
    v: f64,
    g: f64,
    eps_c: f64,
    gamma_a: f64,
    gamma_b: f64,
    gamma_c: f64,
) -> Result<OperatingPoint> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::InvalidParameter(format!("u = {u}, v = {v} must be finite")));
    }
    let (d_ca, d_cb) = resonance_detunings(u, v);
    let params = SystemParams {
        eps_a: eps_c - d_ca,
        eps_b: eps_c - d_cb,
        eps_c,
        u,
        v,
        g,
        g_b: None,
        gamma_a,
        gamma_b,
        gamma_c,
        gamma_phi: 0.0,
        hamiltonian: HamiltonianKind::default(),
    };
    params.validate()?;
    let separation = u - 2.0 * v;
    let coulomb_margin = if g == 0.0 { f64::INFINITY } else { separation / g.abs() };
    let well_separated = separation >= DEFAULT_MARGIN_THRESHOLD * g.abs();
    if !well_separated {
        log::warn!("u - 2v = {separation} is below {DEFAULT_MARGIN_THRESHOLD}|g|; the |011> route is not suppressed");
    }
    Ok(OperatingPoint { params, coulomb_margin, well_separated })
}

/// Clean regime: fast B drain, `Γ_B = 10 Γ_A`, `Γ_C = Γ_A / 25`, `g = 10 Γ_A`.
pub fn clean_regime() -> SystemParams {
    SystemParams::default()
}

/// Dirty regime: symmetric drains `Γ_A = Γ_B`, `Γ_C = Γ_B / 25`, `g = 10 Γ_A`.
pub fn dirty_regime() -> SystemParams {
    make_operating_point(400.0, 100.0, 10.0, 0.0, 1.0, 1.0, 0.04).expect("dirty operating point is finite").params
}

/// Detunings of the suppressed state relative to `|g|`.
pub fn suppression_margins(p: &SystemParams) -> Result<SuppressionMargins> {
    if p.g == 0.0 {
        return Err(Error::ZeroCoupling);
    }
    let g = p.g.abs();
    Ok(SuppressionMargins {
        m1: ((p.eps_c - p.eps_b) + (p.u - p.v)).abs() / g,
        m2: ((p.eps_c - p.eps_a) + p.v).abs() / g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn point(u: f64, v: f64, g: f64, eps_c: f64) -> OperatingPoint {
        make_operating_point(u, v, g, eps_c, 1.0, 10.0, 0.04).unwrap()
    }

    #[test]
    fn detunings_examples() {
        assert_eq!(resonance_detunings(400.0, 100.0), (-300.0, -100.0));
        assert_eq!(resonance_detunings(0.0, 0.0), (0.0, -0.0));
        assert_eq!(resonance_detunings(200.0, 100.0), (-100.0, -100.0));
    }

    #[test]
    fn operating_point_examples() {
        let op = point(400.0, 100.0, 10.0, 0.0);
        assert_eq!(op.params.eps_a, 300.0);
        assert_eq!(op.params.eps_b, 100.0);
        assert_eq!(op.params.eps_a - op.params.eps_b, 200.0);
        assert!(op.well_separated);
        assert!(op.params.is_on_resonance());

        let op = point(200.0, 100.0, 10.0, 0.0);
        assert_eq!(op.params.eps_a, 100.0);
        assert_eq!(op.params.eps_b, 100.0);
        assert!(!op.well_separated);

        let op = point(400.0, 100.0, 10.0, 50.0);
        assert_eq!(op.params.eps_a, 350.0);
        assert_eq!(op.params.eps_b, 150.0);
    }

    #[test]
    fn operating_point_rejects_non_finite() {
        assert!(make_operating_point(f64::NAN, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(make_operating_point(1.0, f64::INFINITY, 1.0, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn margins_examples() {
        let m = suppression_margins(&point(400.0, 100.0, 10.0, 0.0).params).unwrap();
        assert_eq!((m.m1, m.m2), (20.0, 20.0));
        assert!(m.is_suppressed(DEFAULT_MARGIN_THRESHOLD));

        let m = suppression_margins(&point(200.0, 100.0, 10.0, 0.0).params).unwrap();
        assert_eq!((m.m1, m.m2), (0.0, 0.0));
        assert!(!m.is_suppressed(DEFAULT_MARGIN_THRESHOLD));

        let m = suppression_margins(&point(400.0, 100.0, 1.0, 0.0).params).unwrap();
        assert_eq!((m.m1, m.m2), (200.0, 200.0));
    }

    #[test]
    fn margins_require_coupling() {
        let p = point(400.0, 100.0, 0.0, 0.0).params;
        assert!(matches!(suppression_margins(&p), Err(Error::ZeroCoupling)));
    }

    #[test]
    fn negative_rate_rejected() {
        let p = SystemParams { gamma_c: -1.0, ..SystemParams::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn hamiltonian_kind_parses() {
        assert_eq!("full".parse::<HamiltonianKind>().unwrap(), HamiltonianKind::Full);
        assert_eq!(" Effective ".parse::<HamiltonianKind>().unwrap(), HamiltonianKind::Effective);
        assert!("other".parse::<HamiltonianKind>().is_err());
    }

    proptest! {
        #[test]
        fn margins_equal_coulomb_separation(
            u in -1e3f64..1e3,
            v in -1e3f64..1e3,
            g in prop_oneof![-50f64..-0.1, 0.1f64..50.0],
            eps_c in -1e3f64..1e3,
        ) {
            let op = make_operating_point(u, v, g, eps_c, 1.0, 1.0, 1.0).unwrap();
            let m = suppression_margins(&op.params).unwrap();
            let expected = (u - 2.0 * v).abs() / g.abs();
            let tol = 1e-12 * (u.abs() + v.abs() + eps_c.abs() + 1.0) / g.abs();
            prop_assert!((m.m1 - expected).abs() <= tol);
            prop_assert!((m.m2 - expected).abs() <= tol);
            prop_assert!(op.params.is_on_resonance());
        }

        #[test]
        fn detunings_are_linear(
            u1 in -1e3f64..1e3, v1 in -1e3f64..1e3,
            u2 in -1e3f64..1e3, v2 in -1e3f64..1e3,
            a in -5f64..5.0,
        ) {
            let (x1, y1) = resonance_detunings(u1, v1);
            let (x2, y2) = resonance_detunings(u2, v2);
            let (x, y) = resonance_detunings(u1 + a * u2, v1 + a * v2);
            assert_relative_eq!(x, x1 + a * x2, epsilon = 1e-9);
            assert_relative_eq!(y, y1 + a * y2, epsilon = 1e-9);
        }
    }
}
