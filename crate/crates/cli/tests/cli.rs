use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tridot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tridot")).args(args).output().expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT_DIRTY: &str = "label = dirty\ngamma_a = 1\ngamma_b = 1\ngamma_c = 0.04\nt_max = 200\n";

#[test]
fn scan_has_full_grid_and_expected_shape() {
    let out = tridot(&["scan-suppression"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("delta,g,p011_avg"));
    let rows: Vec<[f64; 3]> = lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    assert_eq!(rows.len(), 81 * 4);
    for g in [1.0, 5.0, 10.0, 20.0] {
        let series: Vec<&[f64; 3]> = rows.iter().filter(|r| r[1] == g).collect();
        assert_eq!(series.len(), 81);
        let at = |d: f64| series.iter().find(|r| (r[0] - d * g).abs() < 1e-9).unwrap()[2];
        assert!(at(0.0) > 0.1, "g = {g}");
        assert!(at(20.0) < 0.02, "g = {g}");
        let top = series.iter().max_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
        assert!(top[0] <= 3.0 * g, "g = {g}: peak at {}", top[0]);
        assert!(series.iter().all(|r| (0.0..=1.0).contains(&r[2])));
    }
}

#[test]
fn trajectory_is_reproducible_with_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.cfg", SHORT_DIRTY);
    let cfg = cfg.to_str().unwrap();
    let a = tridot(&["trajectory", "--config", cfg, "--seed", "42"]);
    let b = tridot(&["trajectory", "--config", cfg, "--seed", "42"]);
    let c = tridot(&["trajectory", "--config", cfg, "--seed", "43"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert!(stdout(&a).starts_with("time,lead"));
    assert!(!stderr(&a).contains("seed ="));
}

#[test]
fn missing_seed_is_drawn_and_printed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.cfg", SHORT_DIRTY);
    let out = tridot(&["trajectory", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let err = stderr(&out);
    let seed: u64 = err.lines().find_map(|l| l.strip_prefix("seed = ")).expect("seed printed").trim().parse().unwrap();
    let replay = tridot(&["trajectory", "--config", cfg.to_str().unwrap(), "--seed", &seed.to_string()]);
    assert_eq!(out.stdout, replay.stdout);
}

#[test]
fn output_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.cfg", SHORT_DIRTY);
    let file = dir.path().join("events.csv");
    let a = tridot(&["trajectory", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    let b = tridot(&["trajectory", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", file.to_str().unwrap()]);
    assert!(b.status.success());
    assert!(b.stdout.is_empty());
    assert_eq!(std::fs::read(&file).unwrap(), a.stdout);
}

#[test]
fn ensemble_table_has_error_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.cfg", "gamma_b = 1\nt_max = 2\nt_grid = 0:2:5\n");
    let out = tridot(&["trajectory", "--config", cfg.to_str().unwrap(), "--seed", "1", "--n-traj", "50"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("time,n_a,n_a_err,n_b,n_b_err,n_c,n_c_err"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn validate_passes_on_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let out = tridot(&[
        "validate",
        "--config",
        root.join("clean.cfg").to_str().unwrap(),
        "--config",
        root.join("dirty.cfg").to_str().unwrap(),
        "--seed",
        "3",
        "--n-traj",
        "1000",
    ]);
    let text = stdout(&out);
    assert!(out.status.success(), "{text}{}", stderr(&out));
    assert!(!text.contains("FAIL"));
    assert!(text.contains("PASS [clean] unraveling consistency"));
    assert!(text.contains("PASS [dirty] current conservation"));
}

#[test]
fn validate_flags_oversized_euler_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "big.cfg", "method = euler\ndt = 0.5\n");
    let out = tridot(&["validate", "--config", cfg.to_str().unwrap(), "--seed", "1", "--n-traj", "200"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL [big] step guard"));
}

#[test]
fn validate_reports_no_transport_at_zero_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "off.cfg", "g = 0\n");
    let out = tridot(&["validate", "--config", cfg.to_str().unwrap(), "--seed", "1"]);
    let text = stdout(&out);
    assert!(out.status.success(), "{text}{}", stderr(&out));
    assert!(text.contains("no transport"));
    assert!(text.contains("SKIP [off] current conservation"));
    assert!(!text.contains("degenera"));
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [
        ("unknown.cfg", "colour = blue\n"),
        ("dup.cfg", "g = 1\ng = 2\n"),
        ("neg.cfg", "gamma_a = -1\n"),
        ("grid.cfg", "tau_grid = 3, 2, 1\n"),
        ("num.cfg", "u = lots\n"),
    ] {
        let cfg = write_cfg(dir.path(), name, body);
        let out = tridot(&["steady", "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}: {}", stderr(&out));
    }
    let out = tridot(&["steady", "--config", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rates_without_transport_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "off.cfg", "g = 0\n");
    let out = tridot(&["rates", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn steady_populations_sum_to_one() {
    let out = tridot(&["steady"]);
    assert!(out.status.success());
    let total: f64 = stdout(&out).lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn rates_writes_curves_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "d.cfg", "label = dirty\ngamma_b = 1\nt_max = 400\ntau_grid = 0.5, 1, 2, 4\n");
    let out = tridot(&[
        "rates",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "9",
        "--n-traj",
        "4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rates = std::fs::read_to_string(dir.path().join("dirty_rates.csv")).unwrap();
    assert!(rates.starts_with("tau,rate,rate_err,p_good,fidelity"));
    assert_eq!(rates.lines().count(), 5);
    for line in rates.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        let p: f64 = v[3].parse().unwrap();
        let f: f64 = v[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!((f - (1.0 + 3.0 * p) / 4.0).abs() < 1e-9);
    }
    assert!(dir.path().join("dirty_correlation.csv").exists());
    assert!(dir.path().join("dirty_empirical.csv").exists());
    assert!(stdout(&out).contains("tau* ="));
}

#[test]
fn single_config_commands_reject_two() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_cfg(dir.path(), "a.cfg", "");
    let b = write_cfg(dir.path(), "b.cfg", "");
    let out = tridot(&["steady", "--config", a.to_str().unwrap(), "--config", b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
