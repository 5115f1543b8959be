//! Quantum-jump unraveling of the lead dynamics.
//!
//! Two engines produce streams of emission events into leads A and B:
//!
//! * [`Method::Euler`] steps a conditioned density matrix on a fixed grid.
//!   Each step draws one uniform number per drain and emits when it falls
//!   below `Tr{J_i ρ} dt`; otherwise the state follows the event-free
//!   evolution, in which the source lead acts continuously.
//! * [`Method::WaitingTime`] promotes every dissipator (drains, source fills,
//!   dephasing) to a jump on a pure state and samples exact waiting times
//!   from the decaying norm under the non-Hermitian effective Hamiltonian.
//!
//! Both are exactly reproducible from `(params, config)`: trajectory `k` of
//! an ensemble draws from ChaCha stream `k` of the configured seed.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::{
    build_hamiltonian, build_jump_operators, ChargeState, JumpKind, OperatorMatrix, DIM, SINGLET_C, VACUUM,
};
use crate::linalg::{c, dagger, expm, hermitian_eigen, hermitian_norm, CMatrix, CVector, I};
use crate::master::{exclusive_liouvillian, steady_state_of, DensityMatrix, SUPER_DIM};
use crate::model::SystemParams;

/// Upper bound on `dt · max(Γ, ‖H‖)` in Euler mode.
pub const EULER_STEP_LIMIT: f64 = 0.05;

/// Number of dyadic refinements used to locate a jump time.
const BISECTION_LEVELS: usize = 44;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lead {
    A,
    B,
}

impl Lead {
    pub fn other(self) -> Self {
        match self {
            Self::A => Self::B,
            Self::B => Self::A,
        }
    }
}

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

impl FromStr for Lead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(Error::InvalidParameter(format!("unknown lead '{other}'"))),
        }
    }
}

/// One electron leaving the device into an output lead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub lead: Lead,
}

impl EventRecord {
    pub fn new(time: f64, lead: Lead) -> Self {
        Self { time, lead }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    pub events: Vec<EventRecord>,
    /// Times at which lead C added an electron; only filled when requested
    /// and only in waiting-time mode, where fills are discrete jumps.
    pub fills: Vec<f64>,
    /// Simulated time span.
    pub duration: f64,
}

impl EventStream {
    pub fn new(events: Vec<EventRecord>, duration: f64) -> Self {
        Self { events, fills: Vec::new(), duration }
    }

    pub fn count(&self, lead: Lead) -> usize {
        self.events.iter().filter(|e| e.lead == lead).count()
    }

    /// `time,lead` rows, or `time,lead,kind` with fills merged in when
    /// `with_fills` is set.
    pub fn to_csv(&self, with_fills: bool) -> String {
        let mut out = String::new();
        if !with_fills {
            out.push_str("time,lead\n");
            for e in &self.events {
                out.push_str(&format!("{},{}\n", e.time, e.lead));
            }
            return out;
        }
        out.push_str("time,lead,kind\n");
        let mut rows: Vec<(f64, String)> = self
            .events
            .iter()
            .map(|e| (e.time, format!("{},{},emit\n", e.time, e.lead)))
            .chain(self.fills.iter().map(|&t| (t, format!("{t},C,fill\n"))))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, row) in rows {
            out.push_str(&row);
        }
        out
    }

    /// Parses `time,lead` (an optional `kind` column is honored).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        let mut fills = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("time")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |message: &str| Error::Config { line: n + 1, message: message.to_string() };
            if fields.len() < 2 {
                return Err(bad("expected time,lead"));
            }
            let time: f64 = fields[0].trim().parse().map_err(|_| bad("bad time"))?;
            match fields.get(2).map(|k| k.trim()) {
                Some("fill") => fills.push(time),
                _ => events.push(EventRecord::new(time, fields[1].parse().map_err(|_| bad("bad lead"))?)),
            }
        }
        let duration = events.last().map(|e| e.time).into_iter().chain(fills.last().copied()).fold(0.0, f64::max);
        Ok(Self { events, fills, duration })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Euler,
    #[default]
    WaitingTime,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "euler" => Ok(Self::Euler),
            "waiting_time" => Ok(Self::WaitingTime),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}' (expected euler|waiting_time)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::WaitingTime => "waiting_time",
        })
    }
}

/// State the device starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialState {
    /// Uncharged cluster.
    #[default]
    Empty,
    /// Two electrons in the singlet on dot C.
    Singlet,
    /// The stationary state of the master equation.
    Steady,
}

impl InitialState {
    pub fn density_matrix(self, p: &SystemParams) -> Result<DensityMatrix> {
        match self {
            Self::Empty => Ok(DensityMatrix::pure(VACUUM)),
            Self::Singlet => Ok(DensityMatrix::pure(SINGLET_C)),
            Self::Steady => steady_state_of(p),
        }
    }
}

impl FromStr for InitialState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "empty" | "vacuum" => Ok(Self::Empty),
            "singlet" => Ok(Self::Singlet),
            "steady" => Ok(Self::Steady),
            other => {
                Err(Error::InvalidParameter(format!("unknown initial state '{other}' (expected empty|singlet|steady)")))
            }
        }
    }
}

impl fmt::Display for InitialState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Empty => "empty",
            Self::Singlet => "singlet",
            Self::Steady => "steady",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryConfig {
    pub t_max: f64,
    /// Euler step; defaults to `0.002 / Γ_B`.
    pub dt: Option<f64>,
    pub seed: u64,
    pub method: Method,
    pub record_c_events: bool,
    pub initial: InitialState,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            t_max: 2000.0,
            dt: None,
            seed: 0,
            method: Method::default(),
            record_c_events: false,
            initial: InitialState::default(),
        }
    }
}

impl TrajectoryConfig {
    pub fn step(&self, p: &SystemParams) -> f64 {
        self.dt.unwrap_or_else(|| {
            let scale = if p.gamma_b > 0.0 { p.gamma_b } else { p.max_rate().max(1.0) };
            0.002 / scale
        })
    }

    pub fn validate(&self, p: &SystemParams) -> Result<()> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("t_max = {} must be positive", self.t_max)));
        }
        if self.method == Method::Euler {
            let dt = self.step(p);
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
            }
            let scale = p.max_rate().max(hermitian_norm(&build_hamiltonian(p)));
            let product = dt * scale;
            if product > EULER_STEP_LIMIT {
                return Err(Error::StepGuard { scale, product, limit: EULER_STEP_LIMIT });
            }
        }
        Ok(())
    }
}

/// Everything one trajectory produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryOutput {
    pub stream: EventStream,
    /// Conditioned `[<n_A>, <n_B>, <n_C>]` at each requested sample time.
    pub samples: Vec<[f64; 3]>,
}

/// RNG for trajectory `index` of an ensemble seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Precomputed propagators for one parameter set; cheap to share across
/// trajectories.
#[derive(Debug, Clone)]
pub enum TrajectoryEngine {
    Euler(EulerEngine),
    WaitingTime(WaitingTimeEngine),
}

impl TrajectoryEngine {
    pub fn new(p: &SystemParams, cfg: &TrajectoryConfig) -> Result<Self> {
        p.validate()?;
        cfg.validate(p)?;
        let rho0 = cfg.initial.density_matrix(p)?;
        Ok(match cfg.method {
            Method::Euler => Self::Euler(EulerEngine::new(p, cfg, &rho0)),
            Method::WaitingTime => Self::WaitingTime(WaitingTimeEngine::new(p, cfg, &rho0)),
        })
    }

    /// Precomputes what sampling at `times` needs; optional but avoids
    /// per-trajectory work when many trajectories share a grid.
    pub fn prepare_samples(&mut self, times: &[f64]) {
        if let Self::Euler(e) = self {
            e.prepare_samples(times);
        }
    }

    /// Runs trajectory `index`, recording occupations at `sample_times`
    /// (ascending, within `[0, t_max]`).
    pub fn run(&self, index: u64, sample_times: &[f64]) -> TrajectoryOutput {
        match self {
            Self::Euler(e) => e.run(index, sample_times),
            Self::WaitingTime(w) => w.run(index, sample_times),
        }
    }
}

/// Simulates one trajectory (stream 0 of `cfg.seed`).
pub fn run_trajectory(p: &SystemParams, cfg: &TrajectoryConfig) -> Result<EventStream> {
    Ok(TrajectoryEngine::new(p, cfg)?.run(0, &[]).stream)
}

fn occupations_of_populations(pops: &[f64; DIM]) -> [f64; 3] {
    let mut n = [0.0; 3];
    for s in ChargeState::all() {
        let w = pops[s.index()];
        n[0] += w * s.n_a as f64;
        n[1] += w * s.n_b as f64;
        n[2] += w * s.n_c as f64;
    }
    n
}

// ---------------------------------------------------------------------------
// Euler engine

fn restrict(support: &[usize], full: &CMatrix) -> Vec<Complex64> {
    let mut m = Vec::with_capacity(support.len() * support.len());
    for &row in support {
        for &col in support {
            m.push(full[(row, col)]);
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct EulerEngine {
    /// Step, shrunk so that a whole number of steps spans `t_max`.
    dt: f64,
    steps: u64,
    t_max: f64,
    seed: u64,
    gamma_a: f64,
    gamma_b: f64,
    /// Vectorized indices kept in the reachable subspace.
    support: Vec<usize>,
    /// Event-free propagators over `dt`, `dt/2` and `dt/3`, restricted to
    /// `support`, row-major.
    step: [Vec<Complex64>; 3],
    /// `(position, basis index)` of diagonal entries inside `support`.
    diagonal: Vec<(usize, usize)>,
    /// `(source, target)` positions of the `c ρ c†` maps.
    jump_a: Vec<(usize, usize)>,
    jump_b: Vec<(usize, usize)>,
    rho0: Vec<Complex64>,
    /// Event-free generator, kept for sample times that fall inside a step.
    lnj: CMatrix,
    /// Propagators over the in-step remainders of prepared sample times.
    fractions: Vec<(f64, Vec<Complex64>)>,
}

fn sandwich_map(op: &OperatorMatrix) -> Vec<(usize, usize)> {
    // For a 0/1 ladder operator: (i, j) -> (op(i), op(j)).
    let target = |k: usize| (0..DIM).find(|&r| op[(r, k)].norm() > 0.0);
    let mut out = Vec::new();
    for j in 0..DIM {
        for i in 0..DIM {
            if let (Some(ti), Some(tj)) = (target(i), target(j)) {
                out.push((i + DIM * j, ti + DIM * tj));
            }
        }
    }
    out
}

impl EulerEngine {
    fn new(p: &SystemParams, cfg: &TrajectoryConfig, rho0: &DensityMatrix) -> Self {
        let requested = cfg.step(p);
        let steps = ((cfg.t_max / requested) * (1.0 - 1e-12)).ceil().max(1.0) as u64;
        let dt = cfg.t_max / steps as f64;
        let lnj = exclusive_liouvillian(p);
        let ops = crate::hilbert::lowering_ops();
        let full_a = sandwich_map(&ops.c_a);
        let full_b = sandwich_map(&ops.c_b);

        // Closure of the initial support under event-free evolution and jumps.
        let v0 = rho0.to_vector();
        let mut reachable = [false; SUPER_DIM];
        let mut queue: Vec<usize> = (0..SUPER_DIM).filter(|&k| v0[k].norm() > 0.0).collect();
        for &k in &queue {
            reachable[k] = true;
        }
        while let Some(col) = queue.pop() {
            let jumps = full_a.iter().chain(&full_b).filter(|(s, _)| *s == col).map(|(_, t)| *t);
            let flows = (0..SUPER_DIM).filter(|&row| lnj.matrix[(row, col)].norm() > 0.0);
            for row in flows.chain(jumps).collect::<Vec<_>>() {
                if !reachable[row] {
                    reachable[row] = true;
                    queue.push(row);
                }
            }
        }
        let support: Vec<usize> = (0..SUPER_DIM).filter(|&k| reachable[k]).collect();
        let mut position = vec![usize::MAX; SUPER_DIM];
        for (pos, &k) in support.iter().enumerate() {
            position[k] = pos;
        }

        let restricted = |h: f64| restrict(&support, &expm(&(&lnj.matrix * c(h))));
        let step = [restricted(dt), restricted(dt / 2.0), restricted(dt / 3.0)];
        let restrict = |map: &[(usize, usize)]| -> Vec<(usize, usize)> {
            map.iter().filter(|(s, _)| reachable[*s]).map(|&(s, t)| (position[s], position[t])).collect()
        };
        let diagonal = (0..DIM).filter(|&i| reachable[i + DIM * i]).map(|i| (position[i + DIM * i], i)).collect();
        Self {
            dt,
            steps,
            t_max: cfg.t_max,
            seed: cfg.seed,
            gamma_a: p.gamma_a,
            gamma_b: p.gamma_b,
            jump_a: restrict(&full_a),
            jump_b: restrict(&full_b),
            rho0: support.iter().map(|&k| v0[k]).collect(),
            support,
            step,
            diagonal,
            lnj: lnj.matrix,
            fractions: Vec::new(),
        }
    }

    /// Splits a sample time into a step index and the remainder inside it.
    fn locate(&self, t: f64) -> (u64, f64) {
        let k = ((t / self.dt) * (1.0 + 1e-12)).floor().max(0.0) as u64;
        let k = k.min(self.steps);
        let frac = (t - k as f64 * self.dt).max(0.0);
        if frac <= 1e-9 * self.dt {
            (k, 0.0)
        } else {
            (k, frac)
        }
    }

    fn fraction_propagator(&self, frac: f64) -> std::borrow::Cow<'_, [Complex64]> {
        match self.fractions.iter().find(|(f, _)| (f - frac).abs() <= 1e-12 * self.dt) {
            Some((_, m)) => std::borrow::Cow::Borrowed(m),
            None => std::borrow::Cow::Owned(restrict(&self.support, &expm(&(&self.lnj * c(frac))))),
        }
    }

    fn prepare_samples(&mut self, times: &[f64]) {
        for &t in times {
            let (_, frac) = self.locate(t);
            if frac > 0.0 && !self.fractions.iter().any(|(f, _)| (f - frac).abs() <= 1e-12 * self.dt) {
                let m = restrict(&self.support, &expm(&(&self.lnj * c(frac))));
                self.fractions.push((frac, m));
            }
        }
    }

    /// Dimension of the subspace the engine evolves in.
    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    fn populations(&self, v: &[Complex64]) -> [f64; DIM] {
        let mut pops = [0.0; DIM];
        for &(pos, i) in &self.diagonal {
            pops[i] = v[pos].re;
        }
        pops
    }

    fn trace(&self, v: &[Complex64]) -> f64 {
        self.diagonal.iter().map(|&(pos, _)| v[pos].re).sum()
    }

    fn apply_jump(&self, v: &[Complex64], map: &[(usize, usize)]) -> Vec<Complex64> {
        let mut out = vec![c(0.0); v.len()];
        for &(s, t) in map {
            out[t] += v[s];
        }
        out
    }

    fn normalize(v: &mut [Complex64], tr: f64) {
        debug_assert!(tr > 0.0 && tr <= 1.0 + 1e-9, "conditioned trace {tr} out of range");
        let inv = 1.0 / tr;
        for z in v.iter_mut() {
            *z *= inv;
        }
    }

    fn run(&self, index: u64, sample_times: &[f64]) -> TrajectoryOutput {
        let mut rng = trajectory_rng(self.seed, index);
        let n = self.support.len();
        let mut v = self.rho0.clone();
        let mut next = vec![c(0.0); n];
        let schedule: Vec<(u64, f64)> = sample_times.iter().map(|&t| self.locate(t)).collect();
        let mut samples = Vec::with_capacity(sample_times.len());
        let mut next_sample = 0;
        let mut events = Vec::new();

        for k in 0..=self.steps {
            while next_sample < schedule.len() && schedule[next_sample].0 == k {
                let frac = schedule[next_sample].1;
                if frac == 0.0 {
                    samples.push(occupations_of_populations(&self.populations(&v)));
                } else {
                    let mut u = v.clone();
                    let mut scratch = vec![c(0.0); n];
                    self.evolve(&self.fraction_propagator(frac), &mut u, &mut scratch);
                    samples.push(occupations_of_populations(&self.populations(&u)));
                }
                next_sample += 1;
            }
            if k == self.steps {
                break;
            }
            let pops = occupations_of_populations(&self.populations(&v));
            let p_a = self.gamma_a * pops[0] * self.dt;
            let p_b = self.gamma_b * pops[1] * self.dt;
            let r_a: f64 = rng.random();
            let r_b: f64 = rng.random();
            let fire_a = r_a < p_a;
            let fire_b = r_b < p_b;

            if fire_a || fire_b {
                // Jumps sit at evenly spaced points inside the step, with
                // event-free evolution around them.
                let mut fired = Vec::with_capacity(2);
                if fire_a {
                    fired.push((r_a / p_a, Lead::A));
                }
                if fire_b {
                    fired.push((r_b / p_b, Lead::B));
                }
                fired.sort_by(|x, y| x.0.total_cmp(&y.0));
                let m = fired.len();
                let part = &self.step[m];
                let t_start = k as f64 * self.dt;
                self.evolve(part, &mut v, &mut next);
                for (j, &(_, lead)) in fired.iter().enumerate() {
                    let map = match lead {
                        Lead::A => &self.jump_a,
                        Lead::B => &self.jump_b,
                    };
                    v = self.apply_jump(&v, map);
                    let tr = self.trace(&v);
                    Self::normalize(&mut v, tr);
                    self.evolve(part, &mut v, &mut next);
                    events.push(EventRecord::new(t_start + self.dt * (j + 1) as f64 / (m + 1) as f64, lead));
                }
            } else {
                self.evolve(&self.step[0], &mut v, &mut next);
            }
        }
        TrajectoryOutput { stream: EventStream::new(events, self.t_max), samples }
    }

    /// Applies a restricted propagator and renormalizes.
    fn evolve(&self, prop: &[Complex64], v: &mut Vec<Complex64>, scratch: &mut Vec<Complex64>) {
        let n = v.len();
        for (row, out) in scratch.iter_mut().enumerate() {
            let coeffs = &prop[row * n..(row + 1) * n];
            *out = coeffs.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        std::mem::swap(v, scratch);
        let tr = self.trace(v);
        Self::normalize(v, tr);
    }

    /// Conditioned density matrix for a restricted vector.
    pub fn expand(&self, v: &[Complex64]) -> DensityMatrix {
        let mut full = CVector::zeros(SUPER_DIM);
        for (pos, &k) in self.support.iter().enumerate() {
            full[k] = v[pos];
        }
        DensityMatrix::from_vector(&full)
    }
}

// ---------------------------------------------------------------------------
// Waiting-time engine

#[derive(Debug, Clone)]
struct Channel {
    kind: JumpKind,
    op: OperatorMatrix,
    rate: f64,
}

#[derive(Debug, Clone)]
pub struct WaitingTimeEngine {
    t_max: f64,
    seed: u64,
    record_fills: bool,
    /// `exp(−i H_eff h₀ / 2^k)` for `k = 0..=BISECTION_LEVELS`.
    propagators: Vec<CMatrix>,
    /// Step lengths matching `propagators`.
    steps: Vec<f64>,
    channels: Vec<Channel>,
    /// Pure-state decomposition of the initial density matrix.
    initial: Vec<(f64, CVector)>,
}

enum Advance {
    Reached,
    Jumped(f64),
}

impl WaitingTimeEngine {
    fn new(p: &SystemParams, cfg: &TrajectoryConfig, rho0: &DensityMatrix) -> Self {
        let channels: Vec<Channel> =
            build_jump_operators(p).into_iter().map(|j| Channel { kind: j.kind, op: j.op, rate: j.rate }).collect();
        let mut h_eff = build_hamiltonian(p);
        for ch in &channels {
            h_eff -= dagger(&ch.op) * &ch.op * Complex64::new(0.0, 0.5 * ch.rate);
        }
        let total_rate: f64 = channels.iter().map(|ch| ch.rate).sum();
        let h0 = if total_rate > 0.0 { 1.0 / total_rate } else { cfg.t_max.min(1.0) };
        let steps: Vec<f64> = (0..=BISECTION_LEVELS).map(|k| h0 * 0.5f64.powi(k as i32)).collect();
        let propagators = steps.iter().map(|&h| expm(&(&h_eff * (-I * h)))).collect();

        let (weights, vectors) = hermitian_eigen(rho0.matrix());
        let initial = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 1e-14)
            .map(|(k, &w)| (w, vectors.column(k).into_owned()))
            .collect();

        Self {
            t_max: cfg.t_max,
            seed: cfg.seed,
            record_fills: cfg.record_c_events,
            propagators,
            steps,
            channels,
            initial,
        }
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> CVector {
        let total: f64 = self.initial.iter().map(|(w, _)| w).sum();
        let mut r: f64 = rng.random::<f64>() * total;
        for (w, psi) in &self.initial {
            if r < *w {
                return psi.clone();
            }
            r -= w;
        }
        self.initial.last().expect("initial state has support").1.clone()
    }

    /// Evolves `psi` for `duration` unless its squared norm falls to
    /// `threshold` first, in which case the crossing time is returned.
    fn advance(&self, psi: &mut CVector, duration: f64, threshold: f64) -> Advance {
        let mut elapsed = 0.0;
        let mut trial = CVector::zeros(DIM);
        while duration - elapsed >= self.steps[0] {
            self.propagators[0].mul_to(psi, &mut trial);
            if trial.norm_squared() <= threshold {
                return Advance::Jumped(self.refine(psi, elapsed, threshold, 1));
            }
            std::mem::swap(psi, &mut trial);
            elapsed += self.steps[0];
        }
        for level in 1..=BISECTION_LEVELS {
            if duration - elapsed >= self.steps[level] {
                self.propagators[level].mul_to(psi, &mut trial);
                if trial.norm_squared() <= threshold {
                    return Advance::Jumped(self.refine(psi, elapsed, threshold, level + 1));
                }
                std::mem::swap(psi, &mut trial);
                elapsed += self.steps[level];
            }
        }
        Advance::Reached
    }

    fn refine(&self, psi: &mut CVector, mut elapsed: f64, threshold: f64, from: usize) -> f64 {
        let mut trial = CVector::zeros(DIM);
        for level in from..=BISECTION_LEVELS {
            self.propagators[level].mul_to(psi, &mut trial);
            if trial.norm_squared() > threshold {
                std::mem::swap(psi, &mut trial);
                elapsed += self.steps[level];
            }
        }
        elapsed + self.steps[BISECTION_LEVELS]
    }

    fn occupations(psi: &CVector) -> [f64; 3] {
        let mut pops = [0.0; DIM];
        let norm = psi.norm_squared();
        for (i, p) in pops.iter_mut().enumerate() {
            *p = psi[i].norm_sqr() / norm;
        }
        occupations_of_populations(&pops)
    }

    fn run(&self, index: u64, sample_times: &[f64]) -> TrajectoryOutput {
        let mut rng = trajectory_rng(self.seed, index);
        let mut psi = self.sample_initial(&mut rng);
        let mut threshold: f64 = rng.random();
        let mut t = 0.0;
        let mut events = Vec::new();
        let mut fills = Vec::new();
        let mut samples = Vec::with_capacity(sample_times.len());
        let stops = sample_times.iter().map(|&s| (s.min(self.t_max), true)).chain(std::iter::once((self.t_max, false)));

        for (stop, is_sample) in stops {
            while t < stop {
                match self.advance(&mut psi, stop - t, threshold) {
                    Advance::Reached => t = stop,
                    Advance::Jumped(dt) => {
                        t = (t + dt).min(stop);
                        let kind = self.jump(&mut psi, &mut rng);
                        threshold = rng.random();
                        match kind {
                            JumpKind::DrainA => events.push(EventRecord::new(t, Lead::A)),
                            JumpKind::DrainB => events.push(EventRecord::new(t, Lead::B)),
                            k if k.is_fill() && self.record_fills => fills.push(t),
                            _ => {}
                        }
                    }
                }
            }
            if is_sample {
                samples.push(Self::occupations(&psi));
            }
        }
        let mut stream = EventStream::new(events, self.t_max);
        stream.fills = fills;
        TrajectoryOutput { stream, samples }
    }

    fn jump(&self, psi: &mut CVector, rng: &mut ChaCha8Rng) -> JumpKind {
        let candidates: Vec<(JumpKind, CVector, f64)> = self
            .channels
            .iter()
            .map(|ch| {
                let out = &ch.op * &*psi;
                let w = ch.rate * out.norm_squared();
                (ch.kind, out, w)
            })
            .collect();
        let total: f64 = candidates.iter().map(|x| x.2).sum();
        let mut r = rng.random::<f64>() * total;
        let last = candidates.iter().rposition(|x| x.2 > 0.0).unwrap_or(0);
        for (k, (kind, out, w)) in candidates.into_iter().enumerate() {
            if r < w || k == last {
                let norm = out.norm();
                *psi = out / c(norm);
                return kind;
            }
            r -= w;
        }
        unreachable!("jump weights are non-empty")
    }
}

// ---------------------------------------------------------------------------
// Ensembles

/// Ensemble-averaged occupations with standard errors, plus the mean number
/// of A and B emissions per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTable {
    pub t_grid: Vec<f64>,
    pub mean: Vec<[f64; 3]>,
    pub stderr: Vec<[f64; 3]>,
    pub emissions_mean: [f64; 2],
    pub emissions_stderr: [f64; 2],
    pub n_traj: usize,
}

impl EnsembleTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,n_a,n_a_err,n_b,n_b_err,n_c,n_c_err\n");
        for (k, t) in self.t_grid.iter().enumerate() {
            let (m, e) = (self.mean[k], self.stderr[k]);
            out.push_str(&format!("{t},{},{},{},{},{},{}\n", m[0], e[0], m[1], e[1], m[2], e[2]));
        }
        out
    }
}

fn mean_and_stderr(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Averages `n_traj` independent trajectories; trajectory `k` uses RNG
/// stream `k`, so the table does not depend on thread scheduling.
pub fn ensemble_populations(
    p: &SystemParams,
    cfg: &TrajectoryConfig,
    n_traj: usize,
    t_grid: &[f64],
) -> Result<EnsembleTable> {
    if n_traj == 0 {
        return Err(Error::InvalidParameter("n_traj must be at least 1".into()));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) || t_grid.iter().any(|&t| t < 0.0 || t > cfg.t_max) {
        return Err(Error::InvalidParameter("t_grid must be ascending within [0, t_max]".into()));
    }
    let mut engine = TrajectoryEngine::new(p, cfg)?;
    engine.prepare_samples(t_grid);
    let runs: Vec<(Vec<[f64; 3]>, [usize; 2])> = (0..n_traj as u64)
        .into_par_iter()
        .map(|k| {
            let out = engine.run(k, t_grid);
            (out.samples, [out.stream.count(Lead::A), out.stream.count(Lead::B)])
        })
        .collect();

    let mut mean = Vec::with_capacity(t_grid.len());
    let mut stderr = Vec::with_capacity(t_grid.len());
    for g in 0..t_grid.len() {
        let mut m = [0.0; 3];
        let mut e = [0.0; 3];
        for d in 0..3 {
            (m[d], e[d]) = mean_and_stderr(runs.iter().map(|r| r.0[g][d]), n_traj);
        }
        mean.push(m);
        stderr.push(e);
    }
    let (ma, ea) = mean_and_stderr(runs.iter().map(|r| r.1[0] as f64), n_traj);
    let (mb, eb) = mean_and_stderr(runs.iter().map(|r| r.1[1] as f64), n_traj);
    Ok(EnsembleTable {
        t_grid: t_grid.to_vec(),
        mean,
        stderr,
        emissions_mean: [ma, mb],
        emissions_stderr: [ea, eb],
        n_traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_operating_point;

    fn clean() -> SystemParams {
        make_operating_point(400.0, 100.0, 10.0, 0.0, 1.0, 10.0, 0.04).unwrap().params
    }

    fn cfg(method: Method, t_max: f64) -> TrajectoryConfig {
        TrajectoryConfig { t_max, method, seed: 7, ..Default::default() }
    }

    #[test]
    fn zero_coupling_never_emits() {
        let mut p = clean();
        p.g = 0.0;
        for method in [Method::WaitingTime, Method::Euler] {
            let s = run_trajectory(&p, &cfg(method, 200.0)).unwrap();
            assert!(s.events.is_empty(), "{method}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for method in [Method::WaitingTime, Method::Euler] {
            let a = run_trajectory(&clean(), &cfg(method, 150.0)).unwrap();
            let b = run_trajectory(&clean(), &cfg(method, 150.0)).unwrap();
            assert!(!a.events.is_empty());
            assert_eq!(a.to_csv(false), b.to_csv(false));
        }
    }

    #[test]
    fn different_streams_differ() {
        let engine = TrajectoryEngine::new(&clean(), &cfg(Method::WaitingTime, 500.0)).unwrap();
        assert_ne!(engine.run(0, &[]).stream, engine.run(1, &[]).stream);
    }

    #[test]
    fn event_times_strictly_increase() {
        for method in [Method::WaitingTime, Method::Euler] {
            let s = run_trajectory(&clean(), &cfg(method, 400.0)).unwrap();
            assert!(s.events.windows(2).all(|w| w[1].time > w[0].time));
            assert!(s.events.iter().all(|e| e.time > 0.0 && e.time <= 400.0));
        }
    }

    #[test]
    fn step_guard_rejects_large_dt() {
        let mut c = cfg(Method::Euler, 10.0);
        c.dt = Some(0.01);
        assert!(matches!(c.validate(&clean()), Err(Error::StepGuard { .. })));
        c.dt = Some(0.002);
        assert!(c.validate(&clean()).is_ok());
        // The guard only applies in Euler mode.
        c.method = Method::WaitingTime;
        c.dt = Some(1.0);
        assert!(c.validate(&clean()).is_ok());
    }

    #[test]
    fn default_step_scales_with_drain_b() {
        let c = TrajectoryConfig::default();
        assert!((c.step(&clean()) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn invalid_horizon_rejected() {
        assert!(cfg(Method::WaitingTime, 0.0).validate(&clean()).is_err());
        assert!(cfg(Method::WaitingTime, f64::NAN).validate(&clean()).is_err());
    }

    #[test]
    fn fills_are_logged_on_request() {
        let mut c = cfg(Method::WaitingTime, 300.0);
        c.record_c_events = true;
        let s = run_trajectory(&clean(), &c).unwrap();
        assert!(s.fills.len() >= s.events.len());
        let csv = s.to_csv(true);
        assert!(csv.starts_with("time,lead,kind\n"));
        assert!(csv.contains(",C,fill"));
        let back = EventStream::from_csv(&csv).unwrap();
        assert_eq!(back.events, s.events);
        assert_eq!(back.fills, s.fills);
    }

    #[test]
    fn single_trajectory_occupations_are_jumpy() {
        let mut c = cfg(Method::WaitingTime, 200.0);
        c.initial = InitialState::Singlet;
        let grid: Vec<f64> = (0..=200).map(|k| k as f64).collect();
        let table = ensemble_populations(&clean(), &c, 1, &grid).unwrap();
        assert_eq!(table.n_traj, 1);
        assert!(table.stderr.iter().all(|e| *e == [0.0; 3]));
        // Between fills the state sits in charge eigenstates: n_c is integral.
        let integral = table.mean.iter().filter(|m| (m[2] - m[2].round()).abs() < 1e-6).count();
        assert!(integral > 100);
    }

    #[test]
    fn euler_support_is_charge_block_diagonal() {
        let mut c = cfg(Method::Euler, 1.0);
        c.dt = Some(0.002);
        c.initial = InitialState::Singlet;
        match TrajectoryEngine::new(&clean(), &c).unwrap() {
            TrajectoryEngine::Euler(e) => assert!(e.support_len() <= 36),
            _ => unreachable!(),
        }
    }

    #[test]
    fn ensemble_rejects_bad_input() {
        let c = cfg(Method::WaitingTime, 10.0);
        assert!(ensemble_populations(&clean(), &c, 0, &[1.0]).is_err());
        assert!(ensemble_populations(&clean(), &c, 2, &[2.0, 1.0]).is_err());
        assert!(ensemble_populations(&clean(), &c, 2, &[11.0]).is_err());
    }

    #[test]
    fn small_ensembles_track_the_master_equation() {
        use crate::master::{evolve, generator};
        let p = clean();
        let grid = [0.25, 0.5, 1.0];
        let rho0 = DensityMatrix::pure(SINGLET_C);
        let exact: Vec<[f64; 3]> =
            grid.iter().map(|&t| evolve(&rho0, &generator(&p), t).unwrap().occupations()).collect();
        for method in [Method::WaitingTime, Method::Euler] {
            let c = TrajectoryConfig {
                t_max: 1.0,
                dt: Some(0.002),
                seed: 3,
                method,
                record_c_events: false,
                initial: InitialState::Singlet,
            };
            let table = ensemble_populations(&p, &c, 2000, &grid).unwrap();
            for (g, want) in exact.iter().enumerate() {
                for d in 0..3 {
                    let err = table.stderr[g][d].max(1e-3);
                    let z = (table.mean[g][d] - want[d]).abs() / err;
                    assert!(
                        z < 4.0,
                        "{method} t={} dot {d}: {} vs {} ({z:.1} sigma)",
                        grid[g],
                        table.mean[g][d],
                        want[d]
                    );
                }
            }
        }
    }
}
