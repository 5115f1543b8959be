use std::io::Write;
use std::path::{Path, PathBuf};

use tridot::hilbert::{ChargeState, SINGLET_C};
use tridot::linalg::hermitian_norm;
use tridot::master::{
    currents, evolve, generator, residual, steady_state, suppression_scan, DensityMatrix, SuppressionRow,
};
use tridot::stats::{
    band_check, band_sensitivity, correlation, empirical_rate_curve, fast_rise_end, good_pair_probability, RateCurve,
};
use tridot::trajectory::{
    ensemble_populations, run_trajectory, EnsembleTable, EventStream, InitialState, Method, TrajectoryConfig,
    TrajectoryEngine,
};
use tridot::{hilbert, Error, SystemParams};

use crate::config::{DeltaUnits, RunConfig};

/// ħ in μeV·ns.
pub const HBAR_UEV_NS: f64 = 0.6582119569;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Units {
    /// Times in units of 1/Γ_A.
    Natural,
    /// Energies in μeV, times shown in ns.
    #[value(name = "ueV", alias = "uev")]
    MicroEv,
}

impl Units {
    fn time(self, t: f64) -> f64 {
        match self {
            Self::Natural => t,
            Self::MicroEv => t * HBAR_UEV_NS,
        }
    }

    fn rate(self, r: f64) -> f64 {
        match self {
            Self::Natural => r,
            Self::MicroEv => r / HBAR_UEV_NS,
        }
    }

    fn time_label(self) -> &'static str {
        match self {
            Self::Natural => "1/gamma_a",
            Self::MicroEv => "ns",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Invariant(_) => 1,
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidParameter(_)
            | Error::OccupationOutOfRange { .. }
            | Error::Config { .. }
            | Error::StepGuard { .. }
            | Error::UnsortedStream(_)
            | Error::NoTransport(_)
            | Error::ZeroCoupling
            | Error::ZeroCurrent(_) => Self::Config(msg),
            Error::DegenerateSteadyState { .. }
            | Error::NonFinite(_)
            | Error::ZeroDenominator(_)
            | Error::Consistency(_)
            | Error::Singular(_) => Self::Numerical(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub units: Units,
    pub n_traj: Option<usize>,
}

impl Context {
    fn output_path(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.output.clone())
    }

    fn n_traj(&self, cfg: &RunConfig) -> usize {
        self.n_traj.unwrap_or(cfg.n_traj)
    }

    /// Seed precedence: flag, then config file, then fresh entropy (printed
    /// so the run can be replayed).
    fn seed(&self, cfg: &RunConfig) -> u64 {
        if let Some(seed) = self.seed {
            return seed;
        }
        if cfg.seed_given {
            return cfg.trajectory.seed;
        }
        let seed: u64 = rand::random();
        eprintln!("seed = {seed}");
        seed
    }
}

/// Writes the whole file at once through a temporary sibling, or prints to
/// stdout when no path is given.
pub fn write_output(path: Option<&Path>, contents: &str) -> CliResult<()> {
    let Some(path) = path else {
        print!("{contents}");
        return Ok(());
    };
    let io_err = |e: std::io::Error| CliError::Config(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents.as_bytes()).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn scan_csv(rows: &[SuppressionRow]) -> String {
    let mut out = String::from("delta,g,p011_avg\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.delta, r.g, r.p011_avg));
    }
    out
}

pub fn scan_suppression(cfg: &RunConfig, ctx: &Context) -> CliResult<()> {
    let mut rows = Vec::with_capacity(cfg.delta_grid.len() * cfg.g_grid.len());
    for &g in &cfg.g_grid {
        let scale = match cfg.delta_units {
            DeltaUnits::Absolute => 1.0,
            DeltaUnits::Coupling => g,
        };
        let deltas: Vec<f64> = cfg.delta_grid.iter().map(|d| d * scale).collect();
        rows.extend(suppression_scan(&cfg.params, &deltas, &[g]));
    }
    if rows.iter().any(|r| !r.p011_avg.is_finite()) {
        return Err(CliError::Numerical("non-finite population in suppression scan".into()));
    }
    write_output(ctx.output_path(cfg).as_deref(), &scan_csv(&rows))?;
    if let Some(top) = rows.iter().max_by(|a, b| a.p011_avg.total_cmp(&b.p011_avg)) {
        eprintln!("{} rows; largest <P011> = {:.6} at delta = {}, g = {}", rows.len(), top.p011_avg, top.delta, top.g);
    }
    Ok(())
}

fn scaled_stream(stream: &EventStream, units: Units) -> EventStream {
    let mut s = stream.clone();
    for e in &mut s.events {
        e.time = units.time(e.time);
    }
    for t in &mut s.fills {
        *t = units.time(*t);
    }
    s.duration = units.time(s.duration);
    s
}

fn scaled_table(table: &EnsembleTable, units: Units) -> EnsembleTable {
    let mut t = table.clone();
    for x in &mut t.t_grid {
        *x = units.time(*x);
    }
    t
}

fn scaled_curve(curve: &RateCurve, units: Units) -> RateCurve {
    let mut c = curve.clone();
    for x in &mut c.tau_grid {
        *x = units.time(*x);
    }
    for x in c.r.iter_mut().chain(c.r_err.iter_mut()) {
        *x = units.rate(*x);
    }
    c
}

pub fn trajectory(cfg: &RunConfig, ctx: &Context) -> CliResult<()> {
    let tcfg = TrajectoryConfig { seed: ctx.seed(cfg), ..cfg.trajectory };
    let n_traj = ctx.n_traj(cfg);
    let out = ctx.output_path(cfg);
    if n_traj > 1 {
        let table = ensemble_populations(&cfg.params, &tcfg, n_traj, &cfg.sample_times())?;
        write_output(out.as_deref(), &scaled_table(&table, ctx.units).to_csv())?;
        eprintln!(
            "{n_traj} trajectories; mean emissions per trajectory A = {:.4} ± {:.4}, B = {:.4} ± {:.4}",
            table.emissions_mean[0], table.emissions_stderr[0], table.emissions_mean[1], table.emissions_stderr[1]
        );
        return Ok(());
    }
    let stream = run_trajectory(&cfg.params, &tcfg)?;
    let with_fills = tcfg.record_c_events && tcfg.method == Method::WaitingTime;
    write_output(out.as_deref(), &scaled_stream(&stream, ctx.units).to_csv(with_fills))?;
    eprintln!(
        "{}: {} A and {} B events over t = {} {}",
        cfg.label,
        stream.count(tridot::trajectory::Lead::A),
        stream.count(tridot::trajectory::Lead::B),
        ctx.units.time(tcfg.t_max),
        ctx.units.time_label()
    );
    Ok(())
}

pub fn rates(cfgs: &[RunConfig], ctx: &Context) -> CliResult<()> {
    let dir = ctx.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    for cfg in cfgs {
        let p = &cfg.params;
        let curve = good_pair_probability(p, &cfg.tau_grid)?;
        write_output(Some(&dir.join(format!("{}_rates.csv", cfg.label))), &scaled_curve(&curve, ctx.units).to_csv())?;
        let corr = correlation(p, &cfg.tau_grid)?;
        let mut corr_scaled = corr.clone();
        for x in &mut corr_scaled.delta_grid {
            *x = ctx.units.time(*x);
        }
        write_output(Some(&dir.join(format!("{}_correlation.csv", cfg.label))), &corr_scaled.to_csv())?;

        let tau_star = fast_rise_end(p)?;
        let at_star = good_pair_probability(p, &[tau_star])?;
        println!(
            "{}: tau* = {:.4} {}, R(tau*) = {:.6}, P(tau*) = {:.4}, F(tau*) = {:.4}",
            cfg.label,
            ctx.units.time(tau_star),
            ctx.units.time_label(),
            ctx.units.rate(at_star.r[0]),
            at_star.p_good[0],
            at_star.f[0]
        );

        let n_traj = ctx.n_traj(cfg);
        if n_traj > 0 {
            let tcfg = TrajectoryConfig {
                seed: ctx.seed(cfg),
                method: Method::WaitingTime,
                initial: InitialState::Steady,
                ..cfg.trajectory
            };
            let engine = TrajectoryEngine::new(p, &tcfg)?;
            let streams: Vec<EventStream> = (0..n_traj as u64).map(|k| engine.run(k, &[]).stream).collect();
            let emp = empirical_rate_curve(&streams, &cfg.tau_grid)?;
            write_output(
                Some(&dir.join(format!("{}_empirical.csv", cfg.label))),
                &scaled_curve(&emp, ctx.units).to_csv(),
            )?;
            let worst = (0..emp.r.len())
                .filter(|&k| emp.r_err[k] > 0.0)
                .map(|k| (emp.r[k] - curve.r[k]).abs() / emp.r_err[k])
                .fold(0.0, f64::max);
            println!("{}: empirical overlay from {n_traj} trajectories, max |z| = {worst:.2}", cfg.label);
        }
    }
    if let [clean, dirty] = cfgs {
        let report = band_check(&clean.params, &dirty.params, 41)?;
        println!(
            "band check ({} vs {}): {} -> {}",
            clean.label,
            dirty.label,
            report,
            if report.passes() { "inside" } else { "outside" }
        );
        if !report.passes() {
            for (label, r) in band_sensitivity(&clean.params, &dirty.params) {
                match r {
                    Ok(r) => println!("  sensitivity [{label}]: best {}", r.best()),
                    Err(e) => println!("  sensitivity [{label}]: {e}"),
                }
            }
        }
    }
    Ok(())
}

pub fn steady(cfg: &RunConfig, ctx: &Context) -> CliResult<()> {
    let p = &cfg.params;
    let l = generator(p);
    let rho = steady_state(&l)?;
    let mut csv = String::from("state,population\n");
    for s in ChargeState::all() {
        csv.push_str(&format!("{s},{}\n", rho.population(s)));
    }
    write_output(ctx.output_path(cfg).as_deref(), &csv)?;
    let [n_a, n_b, n_c] = rho.occupations();
    let cur = currents(p, &rho);
    eprintln!("{}: <n_A> = {n_a:.6}, <n_B> = {n_b:.6}, <n_C> = {n_c:.6}", cfg.label);
    eprintln!(
        "{}: currents in = {:.6}, out A = {:.6}, out B = {:.6} per {}; residual = {:.2e}",
        cfg.label,
        ctx.units.rate(cur.input),
        ctx.units.rate(cur.output_a),
        ctx.units.rate(cur.output_b),
        ctx.units.time_label(),
        residual(&l, &rho)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// validate

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, ok: bool, label: &str, name: &str, detail: impl std::fmt::Display) {
        if !ok {
            self.failures += 1;
        }
        println!("{} [{label}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    fn skip(&self, label: &str, name: &str, why: &str) {
        println!("SKIP [{label}] {name}: {why}");
    }
}

fn check_evolution(p: &SystemParams) -> CliResult<(f64, f64)> {
    let l = generator(p);
    let rho0 = DensityMatrix::pure(SINGLET_C);
    let mut worst_trace: f64 = 0.0;
    let mut worst_eig: f64 = f64::INFINITY;
    for t in [0.5, 5.0, 50.0] {
        let rho = evolve(&rho0, &l, t)?;
        worst_trace = worst_trace.max((rho.trace() - 1.0).abs());
        worst_eig = worst_eig.min(rho.min_eigenvalue());
    }
    Ok((worst_trace, worst_eig))
}

fn check_unraveling(p: &SystemParams, seed: u64, n_traj: usize, report: &mut Report, label: &str) -> CliResult<()> {
    let grid = [0.25, 0.5, 1.0];
    let scale = p.max_rate().max(hermitian_norm(&hilbert::build_hamiltonian(p)));
    let base = TrajectoryConfig {
        t_max: 1.0,
        dt: Some(0.02 / scale),
        seed,
        method: Method::WaitingTime,
        record_c_events: false,
        initial: InitialState::Singlet,
    };
    let wt = ensemble_populations(p, &base, n_traj, &grid)?;
    let eu = ensemble_populations(p, &TrajectoryConfig { method: Method::Euler, ..base }, n_traj, &grid)?;
    let rho0 = DensityMatrix::pure(SINGLET_C);
    let l = generator(p);
    let mut worst = [0.0f64; 3];
    for (k, &t) in grid.iter().enumerate() {
        let exact = evolve(&rho0, &l, t)?.occupations();
        for d in 0..3 {
            let z = |m: f64, e: f64| (m - exact[d]).abs() / e.max(1e-12);
            worst[0] = worst[0].max(z(wt.mean[k][d], wt.stderr[k][d]));
            worst[1] = worst[1].max(z(eu.mean[k][d], eu.stderr[k][d]));
            let pooled = wt.stderr[k][d].hypot(eu.stderr[k][d]).max(1e-12);
            worst[2] = worst[2].max((wt.mean[k][d] - eu.mean[k][d]).abs() / pooled);
        }
    }
    let ok = worst.iter().all(|&z| z < 3.0);
    report.line(
        ok,
        label,
        "unraveling consistency",
        format!(
            "n_traj = {n_traj}, max |z|: waiting-time vs master {:.2}, euler vs master {:.2}, euler vs waiting-time {:.2}",
            worst[0], worst[1], worst[2]
        ),
    );
    Ok(())
}

pub fn validate(cfgs: &[RunConfig], ctx: &Context) -> CliResult<()> {
    let mut report = Report { failures: 0 };
    for cfg in cfgs {
        let p = &cfg.params;
        let label = cfg.label.as_str();
        report.line(true, label, "parameters", format!("on resonance = {}", p.is_on_resonance()));

        let euler = TrajectoryConfig { method: Method::Euler, ..cfg.trajectory };
        match euler.validate(p) {
            Ok(()) => report.line(true, label, "step guard", format!("dt = {}", euler.step(p))),
            Err(e) => report.line(false, label, "step guard", e),
        }

        let (trace_err, min_eig) = check_evolution(p)?;
        report.line(trace_err < 1e-10, label, "trace preservation", format!("max |Tr rho - 1| = {trace_err:.2e}"));
        report.line(min_eig >= -1e-8, label, "positivity", format!("min eigenvalue = {min_eig:.2e}"));

        let l = generator(p);
        let rho = match steady_state(&l) {
            Ok(rho) => rho,
            Err(Error::DegenerateSteadyState { dimension }) => {
                report.line(false, label, "steady state", format!("nullspace dimension {dimension}"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let res = residual(&l, &rho);
        report.line(res <= 1e-10 * l.norm(), label, "steady-state residual", format!("{res:.2e}"));
        let cur = currents(p, &rho);
        if p.g == 0.0 || p.coupling_b() == 0.0 || cur.input == 0.0 {
            report.line(
                true,
                label,
                "steady state",
                format!(
                    "no transport: unique stationary state with P(|002>) = {:.6}; transport checks skipped",
                    rho.population(SINGLET_C)
                ),
            );
            report.skip(label, "current conservation", "no current");
            report.skip(label, "unraveling consistency", "no current");
            continue;
        }
        let rel = (cur.input - cur.output()).abs() / cur.input;
        report.line(rel < 1e-9, label, "current conservation", format!("relative mismatch {rel:.2e}"));

        let seed = ctx.seed.unwrap_or(cfg.trajectory.seed);
        let n_traj = ctx.n_traj.unwrap_or(if cfg.n_traj > 0 { cfg.n_traj } else { 2000 });
        check_unraveling(p, seed, n_traj, &mut report, label)?;

        let det = TrajectoryConfig { seed, t_max: cfg.trajectory.t_max.min(500.0), ..cfg.trajectory };
        if det.validate(p).is_ok() {
            let a = run_trajectory(p, &det)?;
            let b = run_trajectory(p, &det)?;
            report.line(
                a.to_csv(true) == b.to_csv(true),
                label,
                "seed determinism",
                format!("{} events", a.events.len()),
            );
        }
    }
    if report.failures > 0 {
        return Err(CliError::Invariant(format!("{} check(s) failed", report.failures)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::from(Error::ZeroCoupling).exit_code(), 2);
        assert_eq!(CliError::from(Error::StepGuard { scale: 1.0, product: 1.0, limit: 0.05 }).exit_code(), 2);
        assert_eq!(CliError::from(Error::DegenerateSteadyState { dimension: 2 }).exit_code(), 3);
        assert_eq!(CliError::from(Error::ZeroDenominator(0.0)).exit_code(), 3);
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 1);
    }

    #[test]
    fn microvolt_units_convert_times_to_ns() {
        assert!((Units::MicroEv.time(1.0) - HBAR_UEV_NS).abs() < 1e-15);
        assert!((Units::MicroEv.rate(Units::MicroEv.time(1.0).recip()) - 1.0 / HBAR_UEV_NS.powi(2)).abs() < 1e-12);
        assert_eq!(Units::Natural.time(2.5), 2.5);
    }
}
