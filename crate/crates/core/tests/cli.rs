//! End-to-end runs of the command-line front end on small grids.

use std::fs;
use std::path::Path;

use clap::Parser;
use popdmp::cli::{load_config, run, Cli, RunConfig};
use popdmp::Error;

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "output_dir = {:?}\n\n[model]\nbuiltin = \"particle-steering\"\n\n[solver]\ngrid_k = 6\n\n[sim]\nn_traj = 400\n{extra}",
        dir.join("out")
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn invoke(args: &[&str]) -> (i32, String) {
    let mut stdout = Vec::new();
    let code = run(Cli::try_parse_from(args).unwrap(), &mut stdout).unwrap();
    (code, String::from_utf8(stdout).unwrap())
}

#[test]
fn example_prints_a_loadable_config() {
    let (code, text) = invoke(&["popdmp", "example"]);
    assert_eq!(code, 0);
    assert!(text.contains("builtin = \"particle-steering\""));
    assert!(text.contains("discount = 1.0"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("example.toml");
    fs::write(&path, &text).unwrap();
    assert_eq!(load_config(&path).unwrap(), RunConfig::particle_steering_example());
}

#[test]
fn missing_discount_is_defaulted_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_config(&small_config(dir.path(), "")).unwrap();
    assert_eq!(cfg.model.discount, Some(1.0));
    assert_eq!(cfg.build_model().unwrap().discount(), 1.0);
}

#[test]
fn bad_kernel_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(
        &path,
        r#"
[model.inline]
states = [-1.0, 1.0]
action_bounds = [-1.0, 1.0]
hazard = 1.0
cost = { xs = [0.0], ys = [1.0] }
kernel = { xs = [-1.0, 1.0], rows = [[0.9, 0.0], [0.0, 1.0]] }
noise = { offsets = [0.0], weights = [1.0] }
"#,
    )
    .unwrap();
    let err = load_config(&path).unwrap_err();
    assert!(matches!(&err, Error::ConfigValidation(m) if m.contains("kernel.rows[0]")), "{err}");
}

#[test]
fn solve_writes_csvs_and_a_stable_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let (code, listing) = invoke(&["popdmp", "solve", "--config", cfg]);
    assert_eq!(code, 0);
    assert_eq!(listing.lines().count(), 4);
    let out = dir.path().join("out");
    let value = fs::read_to_string(out.join("value.csv")).unwrap();
    assert!(value.starts_with("rho1,rho2,rho3,value,argmin\n"));
    assert_eq!(value.lines().count(), 1 + 28);
    assert!(fs::read_to_string(out.join("report.csv")).unwrap().starts_with("iteration,residual\n1,"));
    assert!(fs::read_to_string(out.join("policy.csv")).unwrap().starts_with("index,control\n0,0:0\n1,0:1\n"));

    let first = fs::read(out.join("resolved.toml")).unwrap();
    invoke(&["popdmp", "solve", "--config", cfg]);
    assert_eq!(fs::read(out.join("resolved.toml")).unwrap(), first);
}

#[test]
fn solve_exits_with_two_when_iterations_run_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("grid_k = 6", "grid_k = 6\nmax_iter = 2");
    fs::write(&cfg, text).unwrap();
    let (code, _) = invoke(&["popdmp", "solve", "--config", cfg.to_str().unwrap(), "--tol", "1e-6"]);
    assert_eq!(code, 2);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let other = dir.path().join("elsewhere");
    let (code, _) = invoke(&[
        "popdmp", "solve", "--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap(), "--grid-k", "3",
        "--sigma", "0.2", "--workers", "1",
    ]);
    assert_eq!(code, 0);
    let value = fs::read_to_string(other.join("value.csv")).unwrap();
    assert_eq!(value.lines().count(), 1 + 10);
    let resolved = fs::read_to_string(other.join("resolved.toml")).unwrap();
    assert!(resolved.contains("sigma = 0.2") && resolved.contains("grid_k = 3"));
}

#[test]
fn filter_command_follows_the_events() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        "\n[filter]\nx0 = -1.0\n\n[[filter.events]]\ncontrol = \"0:1\"\ns = 0.5\nx = 1.0\n",
    );
    let (code, _) = invoke(&["popdmp", "filter", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(dir.path().join("out/filter.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "n,rho1,rho2,rho3");
    assert_eq!(rows[1], "0,0.5,0.5,0");
    assert_eq!(rows.len(), 3);
}

#[test]
fn simulate_and_crosscheck_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "seed = 5\n");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(invoke(&["popdmp", "simulate", "--config", cfg]).0, 0);
    let eval = fs::read_to_string(dir.path().join("out/evaluation.csv")).unwrap();
    assert!(eval.starts_with("x0,mean,stderr,n\n-2,"));
    assert!(fs::read_to_string(dir.path().join("out/trajectory_0.csv")).unwrap().starts_with("n,T_n,Y_n,X_n,segment_cost\n"));

    let (code, _) = invoke(&["popdmp", "crosscheck", "--config", cfg]);
    let z = fs::read_to_string(dir.path().join("out/zscores.csv")).unwrap();
    assert!(z.starts_with("x0,mc_mean,mc_stderr,mdp_value,value_interp,z,raw_z\n"));
    assert_eq!(z.lines().count(), 4);
    assert_eq!(code, 0, "{z}");
}

#[test]
fn sweep_reports_each_bandwidth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("grid_k = 6", "grid_k = 4\nsweep_sigmas = [0.4, 0.2]");
    fs::write(&cfg, text).unwrap();
    assert_eq!(invoke(&["popdmp", "sweep", "--config", cfg.to_str().unwrap()]).0, 0);
    let csv = fs::read_to_string(dir.path().join("out/sigma_sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sigma,gap,agreement,iterations");
    assert!(rows[1].starts_with("0.4,") && rows[2].starts_with("0.2,"));
}
