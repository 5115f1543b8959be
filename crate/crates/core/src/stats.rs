//! Post-selection statistics of the emitted electron pairs.
//!
//! Analytic side: exclusive two-time correlators, the good-pair rate
//! `R(τ)`, the probability `P(τ)` that a post-selected pair is the
//! entangled one and the fidelity `F = (1 + 3P)/4`. Interim evolution uses
//! the exclusive generator `L_nj`, so lead C may refill between two
//! emissions but no other A/B event may intervene.
//!
//! Empirical side: consume-once pairing of event streams and the matching
//! rate estimator.
//!
//! `R(τ)` is the rate of consecutive opposite-lead emissions separated by at
//! most `τ`,
//!
//! ```text
//! R(τ) = Σ_{i≠j} ∫₀^τ Tr[J_j e^{L_nj Δ} J_i ρ_SS] dΔ = Σ_{i≠j} I_i I_j ∫₀^τ C_ij,
//! ```
//!
//! in pairs per unit time, which is what the empirical estimator measures.

use std::fmt;

use nalgebra::{DVectorView, RowDVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::hilbert::{number_op, Dot, OperatorMatrix, DIM};
use crate::linalg::{expm_with_integral, sandwich, spre, trace_functional, CMatrix, CVector};
use crate::master::{emission_superoperators, exclusive_liouvillian, generator, steady_state};
use crate::model::SystemParams;
use crate::trajectory::{EventRecord, EventStream, Lead};

/// Relative tolerance under which two grid steps share a cached propagator.
const STEP_MATCH: f64 = 1e-10;

/// Fraction of the kernel peak that marks the end of the fast rate rise.
pub const FAST_RISE_FRACTION: f64 = 0.1;

/// Fidelity of a Bell-state mixture whose entangled weight is `p_good`.
pub fn fidelity(p_good: f64) -> f64 {
    (1.0 + 3.0 * p_good) / 4.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSeries {
    pub delta_grid: Vec<f64>,
    /// `C_{A,B}`: A first, then B.
    pub c_ab: Vec<f64>,
    pub c_ba: Vec<f64>,
}

impl CorrelationSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,c_ab,c_ba\n");
        for k in 0..self.delta_grid.len() {
            out.push_str(&format!("{},{},{}\n", self.delta_grid[k], self.c_ab[k], self.c_ba[k]));
        }
        out
    }
}

/// Rate and post-selection curves on a τ grid. Components that were not
/// computed are left empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateCurve {
    pub tau_grid: Vec<f64>,
    pub r: Vec<f64>,
    pub r_err: Vec<f64>,
    pub p_good: Vec<f64>,
    pub f: Vec<f64>,
}

impl RateCurve {
    pub fn to_csv(&self) -> String {
        let cell = |v: &[f64], k: usize| v.get(k).map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("tau,rate,rate_err,p_good,fidelity\n");
        for (k, tau) in self.tau_grid.iter().enumerate() {
            out.push_str(&format!(
                "{tau},{},{},{},{}\n",
                cell(&self.r, k),
                cell(&self.r_err, k),
                cell(&self.p_good, k),
                cell(&self.f, k)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub t_first: f64,
    pub t_second: f64,
    pub first_lead: Lead,
    pub second_lead: Lead,
}

impl PairRecord {
    pub fn gap(&self) -> f64 {
        self.t_second - self.t_first
    }
}

// ---------------------------------------------------------------------------
// Analytic kernels

fn check_grid(grid: &[f64], what: &str) -> Result<()> {
    if grid.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter(format!("{what} must be finite and non-negative")));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter(format!("{what} must be ascending")));
    }
    Ok(())
}

/// Calls `visit(k, Y, Z)` with `Y = e^{L Δ_k} X` and `Z = ∫₀^{Δ_k} e^{L s} X ds`
/// for each point of an ascending grid.
fn propagate(l: &CMatrix, x: &CMatrix, grid: &[f64], mut visit: impl FnMut(usize, &CMatrix, &CMatrix)) {
    let mut cache: Vec<(f64, CMatrix, CMatrix)> = Vec::new();
    let mut y = x.clone();
    let mut z = CMatrix::zeros(x.nrows(), x.ncols());
    let mut t = 0.0;
    for (k, &target) in grid.iter().enumerate() {
        let h = target - t;
        if h > 0.0 {
            let slot = match cache.iter().position(|(hc, _, _)| (h - hc).abs() <= STEP_MATCH * hc) {
                Some(slot) => slot,
                None => {
                    let (e, phi) = expm_with_integral(l, h);
                    cache.push((h, e, phi));
                    cache.len() - 1
                }
            };
            let (_, e, phi) = &cache[slot];
            z += phi * &y;
            y = e * &y;
            t = target;
        }
        visit(k, &y, &z);
    }
}

/// Row functional `X ↦ Tr[M X]` for a superoperator `M`.
fn trace_after(m: &CMatrix) -> RowDVector<Complex64> {
    trace_functional(DIM).transpose() * m
}

fn real_dot(row: &RowDVector<Complex64>, col: DVectorView<'_, Complex64>) -> f64 {
    row.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<Complex64>().re
}

/// Shared ingredients for the analytic quantities of one parameter set.
struct Analysis {
    l_nj: CMatrix,
    j_a: CMatrix,
    j_b: CMatrix,
    rho_ss: CVector,
    current_a: f64,
    current_b: f64,
}

impl Analysis {
    fn new(p: &SystemParams) -> Result<Self> {
        p.validate()?;
        let rho = steady_state(&generator(p))?;
        let (j_a, j_b) = emission_superoperators(p);
        let rho_ss = rho.to_vector();
        let current_a = real_dot(&trace_after(&j_a), rho_ss.column(0));
        let current_b = real_dot(&trace_after(&j_b), rho_ss.column(0));
        let floor = 1e-12 * p.max_rate();
        if !(current_a > floor) {
            return Err(Error::ZeroCurrent("A"));
        }
        if !(current_b > floor) {
            return Err(Error::ZeroCurrent("B"));
        }
        Ok(Self { l_nj: exclusive_liouvillian(p).matrix, j_a, j_b, rho_ss, current_a, current_b })
    }

    /// Emission-triggered states `[J_A ρ_SS, J_B ρ_SS]`.
    fn triggered(&self) -> CMatrix {
        CMatrix::from_columns(&[&self.j_a * &self.rho_ss, &self.j_b * &self.rho_ss])
    }

    /// Columns seeding the post-selection kernels, in the order
    /// `[n_B J_A Σ₀ n_B, n_A J_B Σ₀ n_A, J_A Σ₀, J_B Σ₀]`, together with the
    /// matching functionals for `p` (first two) and `q` (last two).
    fn pair_seeds(&self) -> Result<(CMatrix, [RowDVector<Complex64>; 4])> {
        let id = OperatorMatrix::identity(DIM, DIM);
        let n_a = number_op(Dot::A);
        let n_b = number_op(Dot::B);
        let empty = (&id - &n_a) * (&id - &n_b);
        let rho0 = sandwich(&empty) * &self.rho_ss;
        let minus_l = -&self.l_nj;
        let sigma0 = minus_l.lu().solve(&rho0).ok_or(Error::Singular("exclusive generator"))?;
        let after_a = &self.j_a * &sigma0;
        let after_b = &self.j_b * &sigma0;
        let seeds = CMatrix::from_columns(&[sandwich(&n_b) * &after_a, sandwich(&n_a) * &after_b, after_a, after_b]);
        let functionals = [
            trace_after(&(spre(&(&id - &n_a)) * &self.j_b)),
            trace_after(&(spre(&(&id - &n_b)) * &self.j_a)),
            trace_after(&self.j_b),
            trace_after(&self.j_a),
        ];
        Ok((seeds, functionals))
    }
}

/// Exclusive correlators `C_ij(Δ) = Tr[J_j e^{L_nj Δ} J_i ρ_SS] / (I_i I_j)`.
pub fn correlation(p: &SystemParams, delta_grid: &[f64]) -> Result<CorrelationSeries> {
    check_grid(delta_grid, "delta grid")?;
    let a = Analysis::new(p)?;
    let (w_a, w_b) = (trace_after(&a.j_a), trace_after(&a.j_b));
    let norm = a.current_a * a.current_b;
    let mut c_ab = vec![0.0; delta_grid.len()];
    let mut c_ba = vec![0.0; delta_grid.len()];
    propagate(&a.l_nj, &a.triggered(), delta_grid, |k, y, _| {
        c_ab[k] = real_dot(&w_b, y.column(0)) / norm;
        c_ba[k] = real_dot(&w_a, y.column(1)) / norm;
    });
    Ok(CorrelationSeries { delta_grid: delta_grid.to_vec(), c_ab, c_ba })
}

/// `dR/dτ` at each grid point: the rate density of opposite-lead
/// consecutive emissions separated by `Δ`.
pub fn rate_kernel(p: &SystemParams, delta_grid: &[f64]) -> Result<Vec<f64>> {
    let c = correlation(p, delta_grid)?;
    let a = Analysis::new(p)?;
    let norm = a.current_a * a.current_b;
    Ok(c.c_ab.iter().zip(&c.c_ba).map(|(x, y)| norm * (x + y)).collect())
}

/// Good-pair rate `R(τ)`, integrated exactly on the grid.
pub fn effective_rate(p: &SystemParams, tau_grid: &[f64]) -> Result<RateCurve> {
    check_grid(tau_grid, "tau grid")?;
    let a = Analysis::new(p)?;
    let (w_a, w_b) = (trace_after(&a.j_a), trace_after(&a.j_b));
    let mut r = vec![0.0; tau_grid.len()];
    propagate(&a.l_nj, &a.triggered(), tau_grid, |k, _, z| {
        r[k] = real_dot(&w_b, z.column(0)) + real_dot(&w_a, z.column(1));
    });
    Ok(RateCurve { tau_grid: tau_grid.to_vec(), r_err: vec![0.0; r.len()], r, ..Default::default() })
}

/// Pointwise post-selection kernels `(p(Δ), q(Δ))`.
pub fn pair_kernels(p: &SystemParams, delta_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_grid(delta_grid, "delta grid")?;
    let a = Analysis::new(p)?;
    let (seeds, w) = a.pair_seeds()?;
    let mut out = vec![(0.0, 0.0); delta_grid.len()];
    propagate(&a.l_nj, &seeds, delta_grid, |k, y, _| {
        let num = real_dot(&w[0], y.column(0)) + real_dot(&w[1], y.column(1));
        let den = real_dot(&w[2], y.column(2)) + real_dot(&w[3], y.column(3));
        out[k] = (num, den);
    });
    Ok(out)
}

/// `R(τ)`, `P(τ)` and `F(τ)` on a grid of positive cut-offs.
pub fn good_pair_probability(p: &SystemParams, tau_grid: &[f64]) -> Result<RateCurve> {
    check_grid(tau_grid, "tau grid")?;
    if p.gamma_a <= 0.0 || p.gamma_b <= 0.0 || p.gamma_c <= 0.0 {
        return Err(Error::NoTransport("every lead rate must be positive".into()));
    }
    if p.g == 0.0 || p.coupling_b() == 0.0 {
        return Err(Error::ZeroCoupling);
    }
    let a = Analysis::new(p)?;
    let (mut seeds, w) = a.pair_seeds()?;
    seeds = CMatrix::from_columns(&[
        seeds.column(0).into_owned(),
        seeds.column(1).into_owned(),
        seeds.column(2).into_owned(),
        seeds.column(3).into_owned(),
        a.triggered().column(0).into_owned(),
        a.triggered().column(1).into_owned(),
    ]);
    let (w_a, w_b) = (trace_after(&a.j_a), trace_after(&a.j_b));
    let n = tau_grid.len();
    let (mut num, mut den, mut r) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    propagate(&a.l_nj, &seeds, tau_grid, |k, _, z| {
        num[k] = real_dot(&w[0], z.column(0)) + real_dot(&w[1], z.column(1));
        den[k] = real_dot(&w[2], z.column(2)) + real_dot(&w[3], z.column(3));
        r[k] = real_dot(&w_b, z.column(4)) + real_dot(&w_a, z.column(5));
    });
    let mut p_good = Vec::with_capacity(n);
    for k in 0..n {
        if !(den[k] > 0.0) || !den[k].is_finite() {
            return Err(Error::ZeroDenominator(tau_grid[k]));
        }
        let prob = num[k] / den[k];
        if !(-1e-9..=1.0 + 1e-9).contains(&prob) {
            return Err(Error::Consistency(format!("P({}) = {prob} outside [0, 1]", tau_grid[k])));
        }
        p_good.push(prob.clamp(0.0, 1.0));
    }
    Ok(RateCurve {
        tau_grid: tau_grid.to_vec(),
        r_err: vec![0.0; n],
        r,
        f: p_good.iter().map(|&x| fidelity(x)).collect(),
        p_good,
    })
}

/// End of the fast initial rise of `R(τ)`: the first `τ` after the peak of
/// `dR/dτ` where it falls below [`FAST_RISE_FRACTION`] of that peak,
/// located by linear interpolation on a fine grid.
pub fn fast_rise_end(p: &SystemParams) -> Result<f64> {
    let a = Analysis::new(p)?;
    let (w_a, w_b) = (trace_after(&a.j_a), trace_after(&a.j_b));
    let scale = p.max_rate().max(p.g.abs()).max(p.coupling_b().abs());
    let h = 0.02 / scale;
    let min_rate = [p.gamma_a, p.gamma_b, p.gamma_c].into_iter().fold(f64::INFINITY, f64::min);
    let horizon = 1e3 / min_rate;
    let (e, _) = expm_with_integral(&a.l_nj, h);
    let mut y = a.triggered();
    let kernel = |y: &CMatrix| real_dot(&w_b, y.column(0)) + real_dot(&w_a, y.column(1));
    let mut peak = kernel(&y);
    let mut prev = peak;
    let mut t = 0.0;
    while t < horizon {
        y = &e * &y;
        t += h;
        let k = kernel(&y);
        let threshold = FAST_RISE_FRACTION * peak;
        if k < threshold && peak > 0.0 {
            return Ok(t - h * (threshold - k) / (prev - k));
        }
        peak = peak.max(k);
        prev = k;
    }
    Err(Error::Consistency(format!("rate kernel never decayed within {horizon}")))
}

// ---------------------------------------------------------------------------
// Band check of the headline clean/dirty comparison

/// Acceptance windows for the clean/dirty comparison.
pub const RATIO_BAND: (f64, f64) = (0.77, 0.87);
pub const F_DIRTY_BAND: (f64, f64) = (0.88, 0.92);
pub const F_CLEAN_BAND: (f64, f64) = (0.92, 0.96);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRow {
    pub tau: f64,
    pub ratio: f64,
    pub f_clean: f64,
    pub f_dirty: f64,
    /// Largest distance outside a band, in units of that band's half-width;
    /// zero when all three quantities are inside.
    pub violation: f64,
}

fn band_distance(x: f64, (lo, hi): (f64, f64)) -> f64 {
    let half = 0.5 * (hi - lo);
    ((lo - x).max(x - hi)).max(0.0) / half
}

impl BandRow {
    fn new(tau: f64, ratio: f64, f_clean: f64, f_dirty: f64) -> Self {
        let violation = band_distance(ratio, RATIO_BAND)
            .max(band_distance(f_clean, F_CLEAN_BAND))
            .max(band_distance(f_dirty, F_DIRTY_BAND));
        Self { tau, ratio, f_clean, f_dirty, violation }
    }

    pub fn inside(&self) -> bool {
        self.violation == 0.0
    }
}

impl fmt::Display for BandRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tau={:.4} ratio={:.4} F_clean={:.4} F_dirty={:.4} violation={:.3}",
            self.tau, self.ratio, self.f_clean, self.f_dirty, self.violation
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandReport {
    pub tau_star_clean: f64,
    pub tau_star_dirty: f64,
    /// Lower edge of the scanned band; the later of the two rise ends.
    pub tau_star: f64,
    pub rows: Vec<BandRow>,
}

impl BandReport {
    pub fn passes(&self) -> bool {
        self.rows.iter().any(BandRow::inside)
    }

    pub fn best(&self) -> BandRow {
        *self.rows.iter().min_by(|a, b| a.violation.total_cmp(&b.violation)).expect("band has rows")
    }
}

impl fmt::Display for BandReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tau*_clean={:.4} tau*_dirty={:.4} band=[{:.4}, {:.4}] best: {}",
            self.tau_star_clean,
            self.tau_star_dirty,
            self.tau_star,
            2.0 * self.tau_star,
            self.best()
        )
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Scans `τ ∈ [τ*, 2τ*]` for a point where the rate ratio and both
/// fidelities sit inside their windows.
pub fn band_check(clean: &SystemParams, dirty: &SystemParams, points: usize) -> Result<BandReport> {
    let tau_star_clean = fast_rise_end(clean)?;
    let tau_star_dirty = fast_rise_end(dirty)?;
    let tau_star = tau_star_clean.max(tau_star_dirty);
    let grid = linspace(tau_star, 2.0 * tau_star, points.max(2));
    let c = good_pair_probability(clean, &grid)?;
    let d = good_pair_probability(dirty, &grid)?;
    let rows = (0..grid.len()).map(|k| BandRow::new(grid[k], d.r[k] / c.r[k], c.f[k], d.f[k])).collect();
    Ok(BandReport { tau_star_clean, tau_star_dirty, tau_star, rows })
}

/// Band checks under perturbations of the model choices the headline
/// numbers depend on.
pub fn band_sensitivity(clean: &SystemParams, dirty: &SystemParams) -> Vec<(String, Result<BandReport>)> {
    use crate::model::{make_operating_point, HamiltonianKind};
    let mut out = Vec::new();
    let mut push = |label: String, f: &dyn Fn(&SystemParams) -> SystemParams| {
        out.push((label, band_check(&f(clean), &f(dirty), 41)));
    };
    for phi in [0.1, 0.3, 1.0] {
        push(format!("dephasing gamma_phi={phi}"), &|p| p.with_dephasing(phi));
    }
    push("coupling_b=0.8g".into(), &|p| p.with_coupling_b(0.8 * p.g));
    for (u, v) in [(2200.0, 1000.0), (4200.0, 2000.0)] {
        push(format!("full hamiltonian u={u} v={v}"), &|p| {
            let mut q = make_operating_point(u, v, p.g, p.eps_c, p.gamma_a, p.gamma_b, p.gamma_c)
                .map(|op| op.params)
                .unwrap_or(*p);
            q.hamiltonian = HamiltonianKind::Full;
            q
        });
    }
    for factor in [0.5, 2.0] {
        push(format!("gamma_c x{factor}"), &|p| SystemParams { gamma_c: p.gamma_c * factor, ..*p });
    }
    out
}

// ---------------------------------------------------------------------------
// Empirical estimators

fn check_sorted(events: &[EventRecord]) -> Result<()> {
    match events.windows(2).position(|w| w[1].time < w[0].time) {
        Some(k) => Err(Error::UnsortedStream(k + 1)),
        None => Ok(()),
    }
}

/// Consume-once pairing: consecutive events on different leads within `τ`
/// form a pair and are both removed; anything else advances by one event.
/// Returns the pairs and the pair rate per unit of stream duration.
pub fn empirical_pairs(stream: &EventStream, tau: f64) -> Result<(Vec<PairRecord>, f64)> {
    check_sorted(&stream.events)?;
    let ev = &stream.events;
    let mut pairs = Vec::new();
    let mut k = 0;
    while k + 1 < ev.len() {
        let (a, b) = (ev[k], ev[k + 1]);
        if a.lead != b.lead && b.time - a.time <= tau {
            pairs.push(PairRecord { t_first: a.time, t_second: b.time, first_lead: a.lead, second_lead: b.lead });
            k += 2;
        } else {
            k += 1;
        }
    }
    let rate = if stream.duration > 0.0 { pairs.len() as f64 / stream.duration } else { 0.0 };
    Ok((pairs, rate))
}

/// Pair structure of one stream at a fixed window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventStructure {
    pub events: usize,
    pub pairs: usize,
    pub b_first: usize,
    /// Mean spacing between the first events of successive pairs.
    pub mean_pair_spacing: Option<f64>,
}

impl EventStructure {
    pub fn lone(&self) -> usize {
        self.events - 2 * self.pairs
    }

    pub fn lone_fraction(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.lone() as f64 / self.events as f64
        }
    }

    pub fn b_first_fraction(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.b_first as f64 / self.pairs as f64
        }
    }
}

pub fn event_structure(stream: &EventStream, tau: f64) -> Result<EventStructure> {
    let (pairs, _) = empirical_pairs(stream, tau)?;
    let mean_pair_spacing =
        (pairs.len() >= 2).then(|| (pairs[pairs.len() - 1].t_first - pairs[0].t_first) / (pairs.len() - 1) as f64);
    Ok(EventStructure {
        events: stream.events.len(),
        pairs: pairs.len(),
        b_first: pairs.iter().filter(|p| p.first_lead == Lead::B).count(),
        mean_pair_spacing,
    })
}

/// Number of consecutive opposite-lead event pairs separated by at most
/// `τ`, counted with overlap: `B A B` within the window counts twice. This is
/// the quantity whose rate `R(τ)` predicts.
pub fn adjacent_pairs(stream: &EventStream, tau: f64) -> Result<usize> {
    check_sorted(&stream.events)?;
    Ok(stream.events.windows(2).filter(|w| w[0].lead != w[1].lead && w[1].time - w[0].time <= tau).count())
}

/// Empirical estimate of `R(τ)` over all streams. Errors treat pair
/// arrivals as a binomial count over many short time slots, i.e.
/// `√N / T`.
pub fn empirical_rate_curve(streams: &[EventStream], tau_grid: &[f64]) -> Result<RateCurve> {
    if streams.is_empty() {
        return Err(Error::InvalidParameter("at least one stream is required".into()));
    }
    check_grid(tau_grid, "tau grid")?;
    let duration: f64 = streams.iter().map(|s| s.duration).sum();
    if !(duration > 0.0) {
        return Err(Error::InvalidParameter("streams have zero total duration".into()));
    }
    let mut r = Vec::with_capacity(tau_grid.len());
    let mut r_err = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let mut count = 0usize;
        for s in streams {
            count += adjacent_pairs(s, tau)?;
        }
        r.push(count as f64 / duration);
        r_err.push((count as f64).sqrt() / duration);
    }
    Ok(RateCurve { tau_grid: tau_grid.to_vec(), r, r_err, ..Default::default() })
}
