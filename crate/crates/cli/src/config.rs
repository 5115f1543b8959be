//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. Grids are either
//! `lo:hi:n` (n evenly spaced points, both ends included) or a comma list.
//! Unset level energies are placed on resonance from `u`, `v` and `eps_c`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tridot::model::{clean_regime, resonance_detunings, HamiltonianKind};
use tridot::trajectory::{InitialState, Method, TrajectoryConfig};
use tridot::{Error, Result, SystemParams};

/// How `delta_grid` entries are read by the suppression scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaUnits {
    Absolute,
    /// Multiples of the coupling of each scanned `g`.
    Coupling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub label: String,
    pub params: SystemParams,
    pub trajectory: TrajectoryConfig,
    /// Whether the seed came from the file rather than the default.
    pub seed_given: bool,
    pub delta_grid: Vec<f64>,
    pub delta_units: DeltaUnits,
    pub g_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub t_grid: Option<Vec<f64>>,
    pub n_traj: usize,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "run".into(),
            params: clean_regime(),
            trajectory: TrajectoryConfig::default(),
            seed_given: false,
            delta_grid: linspace(0.0, 40.0, 81),
            delta_units: DeltaUnits::Coupling,
            g_grid: vec![1.0, 5.0, 10.0, 20.0],
            tau_grid: linspace(0.1, 60.0, 600),
            t_grid: None,
            n_traj: 0,
            output: None,
        }
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

const KEYS: &[&str] = &[
    "label",
    "hamiltonian",
    "u",
    "v",
    "g",
    "g_b",
    "eps_a",
    "eps_b",
    "eps_c",
    "gamma_a",
    "gamma_b",
    "gamma_c",
    "gamma_phi",
    "t_max",
    "dt",
    "seed",
    "method",
    "record_c_events",
    "initial",
    "delta_grid",
    "delta_units",
    "g_grid",
    "tau_grid",
    "t_grid",
    "n_traj",
    "output",
];

struct Entries {
    values: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: n + 1, message };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim().to_ascii_lowercase();
            if !KEYS.contains(&key.as_str()) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if values.insert(key.clone(), (n + 1, value.trim().to_string())).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { values })
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.values.get(key)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config { line: *line, message: format!("cannot parse `{v}` for `{key}`") }),
        }
    }

    fn parsed<T>(&self, key: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => {
                f(v).map(Some).map_err(|e| Error::Config { line: *line, message: format!("`{key}`: {e}") })
            }
        }
    }
}

/// Parses `lo:hi:n` or `a, b, c` into a strictly increasing grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::InvalidParameter(format!("grid `{text}`: {m}"));
    let grid = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad("expected lo:hi:n"));
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad("bad lower bound"))?;
        let hi: f64 = parts[1].parse().map_err(|_| bad("bad upper bound"))?;
        let n: usize = parts[2].parse().map_err(|_| bad("bad point count"))?;
        linspace(lo, hi, n)
    } else {
        text.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(bad("empty"));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite entry"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("not strictly increasing"));
    }
    Ok(grid)
}

fn parse_bool(text: &str) -> Result<bool> {
    match text.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::InvalidParameter(format!("`{other}` is not a boolean"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, default_label: &str) -> Result<Self> {
        let e = Entries::parse(text)?;
        let mut cfg = RunConfig { label: default_label.to_string(), ..Default::default() };
        if let Some(label) = e.get::<String>("label")? {
            cfg.label = label;
        }

        let p = &mut cfg.params;
        let num = |key: &str, slot: &mut f64| -> Result<()> {
            if let Some(x) = e.get::<f64>(key)? {
                *slot = x;
            }
            Ok(())
        };
        num("u", &mut p.u)?;
        num("v", &mut p.v)?;
        num("g", &mut p.g)?;
        num("eps_c", &mut p.eps_c)?;
        num("gamma_a", &mut p.gamma_a)?;
        num("gamma_b", &mut p.gamma_b)?;
        num("gamma_c", &mut p.gamma_c)?;
        num("gamma_phi", &mut p.gamma_phi)?;
        let (d_ca, d_cb) = resonance_detunings(p.u, p.v);
        p.eps_a = e.get("eps_a")?.unwrap_or(p.eps_c - d_ca);
        p.eps_b = e.get("eps_b")?.unwrap_or(p.eps_c - d_cb);
        p.g_b = e.get("g_b")?;
        if let Some(kind) = e.parsed("hamiltonian", |v| v.parse::<HamiltonianKind>())? {
            p.hamiltonian = kind;
        }
        if let Err(err) = p.validate() {
            return Err(Error::Config { line: 0, message: err.to_string() });
        }

        let t = &mut cfg.trajectory;
        if let Some(x) = e.get("t_max")? {
            t.t_max = x;
        }
        t.dt = e.get("dt")?;
        if let Some(seed) = e.get("seed")? {
            t.seed = seed;
            cfg.seed_given = true;
        }
        if let Some(m) = e.parsed("method", |v| v.parse::<Method>())? {
            t.method = m;
        }
        if let Some(b) = e.parsed("record_c_events", parse_bool)? {
            t.record_c_events = b;
        }
        if let Some(s) = e.parsed("initial", |v| v.parse::<InitialState>())? {
            t.initial = s;
        }

        if let Some(g) = e.parsed("delta_grid", parse_grid)? {
            cfg.delta_grid = g;
        }
        if let Some(u) = e.parsed("delta_units", |v| match v {
            "absolute" => Ok(DeltaUnits::Absolute),
            "g" => Ok(DeltaUnits::Coupling),
            other => Err(Error::InvalidParameter(format!("`{other}` (expected absolute|g)"))),
        })? {
            cfg.delta_units = u;
        }
        if let Some(g) = e.parsed("g_grid", parse_grid)? {
            cfg.g_grid = g;
        }
        if let Some(g) = e.parsed("tau_grid", parse_grid)? {
            cfg.tau_grid = g;
        }
        cfg.t_grid = e.parsed("t_grid", parse_grid)?;
        if let Some(n) = e.get("n_traj")? {
            cfg.n_traj = n;
        }
        cfg.output = e.get::<String>("output")?.map(PathBuf::from);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| Error::Config { line: 0, message: format!("cannot read {}: {err}", path.display()) })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        Self::parse(&text, stem)
    }

    /// Sample times for ensembles: the configured grid or 101 points
    /// spanning `[0, t_max]`.
    pub fn sample_times(&self) -> Vec<f64> {
        self.t_grid.clone().unwrap_or_else(|| linspace(0.0, self.trajectory.t_max, 101))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_clean_regime() {
        let cfg = RunConfig::parse("", "x").unwrap();
        assert_eq!(cfg.label, "x");
        assert_eq!(cfg.params, clean_regime());
        assert!(!cfg.seed_given);
    }

    #[test]
    fn resonance_levels_follow_u_and_v() {
        let cfg = RunConfig::parse("u = 2200\nv = 1000  # strong\n", "x").unwrap();
        assert!(cfg.params.is_on_resonance());
        assert_eq!(cfg.params.eps_b, 1000.0);
        assert_eq!(cfg.params.eps_a, 1200.0);
    }

    #[test]
    fn all_sections_parse() {
        let text = "label = demo\nhamiltonian = full\ngamma_b = 1\nseed = 9\nmethod = euler\ndt = 0.001\n\
                    record_c_events = yes\ninitial = singlet\ndelta_grid = 0, 10, 20\ndelta_units = absolute\n\
                    g_grid = 1:4:4\ntau_grid = 1:2:3\nt_grid = 0:1:11\nn_traj = 5\noutput = out.csv\n";
        let cfg = RunConfig::parse(text, "x").unwrap();
        assert_eq!(cfg.label, "demo");
        assert_eq!(cfg.params.hamiltonian, HamiltonianKind::Full);
        assert_eq!(cfg.trajectory.seed, 9);
        assert!(cfg.seed_given);
        assert_eq!(cfg.trajectory.method, Method::Euler);
        assert_eq!(cfg.trajectory.dt, Some(0.001));
        assert!(cfg.trajectory.record_c_events);
        assert_eq!(cfg.trajectory.initial, InitialState::Singlet);
        assert_eq!(cfg.delta_grid, vec![0.0, 10.0, 20.0]);
        assert_eq!(cfg.delta_units, DeltaUnits::Absolute);
        assert_eq!(cfg.g_grid, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cfg.tau_grid, vec![1.0, 1.5, 2.0]);
        assert_eq!(cfg.sample_times().len(), 11);
        assert_eq!(cfg.n_traj, 5);
        assert_eq!(cfg.output, Some(PathBuf::from("out.csv")));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("g = 1\nbogus = 2\n", "x").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        let err = RunConfig::parse("\n\ng = ten\n", "x").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }));
        let err = RunConfig::parse("tau_grid = 3, 2\n", "x").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        assert!(RunConfig::parse("g = 1\ng = 2\n", "x").is_err());
        assert!(RunConfig::parse("no equals sign\n", "x").is_err());
        assert!(RunConfig::parse("gamma_a = -1\n", "x").is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("1, 5,10").unwrap(), vec![1.0, 5.0, 10.0]);
        assert!(parse_grid("1:2").is_err());
        assert!(parse_grid("1, 1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }
}
