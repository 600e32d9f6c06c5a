//! Exit-code and file-output contract of the command-line binary.

use std::path::Path;
use std::process::Command;

fn run(config: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_chi2peaks"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn base_config(outdir: &Path) -> String {
    format!(
        "n = 4\nnubar = 2.0\nseed = 3\nlmax = 4\noutdir = {outdir:?}\n\n\
         [spectrum]\nkind = \"exponential\"\nscale = 8.0\n\n\
         [grid]\nr_max = 0.4\npoints = 8\n"
    )
}

#[test]
fn moments_succeeds_and_prints_spectral_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config(&dir.path().join("out")));
    let out = run(&config, &["moments"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("sigma0_sq"));
    assert!(text.contains("sigma1_sq"));
}

#[test]
fn profile_and_diagnostics_write_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let config = write_config(dir.path(), &base_config(&outdir));
    assert_eq!(run(&config, &["profile"]).status.code(), Some(0));
    assert_eq!(run(&config, &["diagnostics"]).status.code(), Some(0));
    assert_eq!(run(&config, &["modes", "--lbig", "3"]).status.code(), Some(0));
    for name in ["profile.csv", "profile_scalars.json", "sigma_recovery.csv", "modes.csv"] {
        assert!(outdir.join(name).exists(), "{name} missing");
    }
    let csv = std::fs::read_to_string(outdir.join("profile.csv")).unwrap();
    assert!(csv.starts_with("r,mean,var,env_lo,env_hi,rhoC,rhoD,sigma_as2,As\n"));
}

#[test]
fn malformed_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();

    let bad_toml = write_config(dir.path(), "n = [not toml");
    assert_eq!(run(&bad_toml, &["moments"]).status.code(), Some(2));

    let missing_amplitude = write_config(
        dir.path(),
        &base_config(&dir.path().join("out")).replace("nubar = 2.0\n", ""),
    );
    assert_eq!(run(&missing_amplitude, &["moments"]).status.code(), Some(2));

    let zero_nu = write_config(
        dir.path(),
        &base_config(&dir.path().join("out")).replace("nubar = 2.0", "nu = 0.0"),
    );
    assert_eq!(run(&zero_nu, &["moments"]).status.code(), Some(2));

    let csv_path = dir.path().join("spectrum.csv");
    std::fs::write(&csv_path, "k,p\n1.0,0.5\n0.5,0.2\n").unwrap();
    let bad_csv = write_config(
        dir.path(),
        &format!(
            "n = 4\nnubar = 2.0\noutdir = {:?}\n\n[spectrum]\nkind = \"csv\"\npath = {:?}\n\n\
             [grid]\nr_max = 0.4\npoints = 8\n",
            dir.path().join("out"),
            csv_path
        ),
    );
    assert_eq!(run(&bad_csv, &["moments"]).status.code(), Some(2));
}

#[test]
fn sample_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &base_config(&dir.path().join("out")).replace("seed = 3\n", ""),
    );
    let out = run(&config, &["sample"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("seed"));
}

#[test]
fn flag_overrides_replace_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("override_out");
    let config = write_config(dir.path(), &base_config(&dir.path().join("out")));
    let out = run(
        &config,
        &["--outdir", outdir.to_str().unwrap(), "--nubar", "3.0", "profile"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(outdir.join("profile.csv").exists());
}
