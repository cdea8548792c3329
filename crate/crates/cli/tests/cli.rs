//! Command-line behaviour: exit codes, artefacts and manifests.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use u3s::config::Config;
use u3s::harness::Manifest;
use u3s::io::sha256_hex;

const TINY: [&str; 16] = [
    "--set",
    "image.side=24",
    "--set",
    "geometry.num_elements_sparse=5",
    "--set",
    "geometry.num_elements_dense=16",
    "--set",
    "acquisition.num_slices=7",
    "--set",
    "network.width=16",
    "--set",
    "network.depth=3",
    "--set",
    "training.embed_iterations=3",
    "--set",
    "training.iterations=2",
];

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("u3s-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn u3spat<S: AsRef<OsStr>>(args: &[S], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_u3spat"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("U3S_OUT")
        .output()
        .expect("binary runs")
}

fn run_ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S], out: &Path) -> String {
    let o = u3spat(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tiny(cmd: &[&str]) -> Vec<String> {
    cmd.iter().chain(&TINY).map(|s| s.to_string()).collect()
}

#[test]
fn schedule_table_steps_by_the_interlacing_angle() {
    let out = scratch("schedule");
    let table = run_ok(&["schedule", "--set", "geometry.num_elements_sparse=21"], &out);
    let thetas: Vec<f64> = table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(thetas.len(), 15);
    assert!((thetas[1] - thetas[0] - 2.571).abs() < 5e-4);
    assert!(out.join("schedule/schedule.txt").exists());
    assert!(out.join("schedule/manifest.toml").exists());
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let out = scratch("usage");
    assert_eq!(u3spat(&["bogus"], &out).status.code(), Some(2));
    assert_eq!(
        u3spat(&["config", "--set", "training.nope=1"], &out).status.code(),
        Some(2)
    );
    assert_eq!(u3spat(&["reconstruct", "--method", "fbp"], &out).status.code(), Some(2));
    assert_eq!(u3spat(&["config", "--preset", "laptop"], &out).status.code(), Some(2));
    let bad = scratch("usage-file");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("c.toml"), "[image]\nsidee = 64\n").unwrap();
    let path = bad.join("c.toml");
    assert_eq!(
        u3spat(&["config", "--config", path.to_str().unwrap()], &out)
            .status
            .code(),
        Some(2)
    );
    std::fs::remove_dir_all(&bad).unwrap();
}

#[test]
fn missing_reference_is_a_runtime_failure() {
    let out = scratch("noref");
    assert_eq!(u3spat(&tiny(&["evaluate"]), &out).status.code(), Some(1));
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn config_dump_round_trips() {
    let out = scratch("dump");
    let desk = run_ok(&["config", "--dump"], &out);
    assert_eq!(Config::from_toml(&desk).unwrap(), Config::default());
    let paper = run_ok(&["config", "--dump", "--preset", "paper", "--seed", "3"], &out);
    let cfg = Config::from_toml(&paper).unwrap();
    assert_eq!((cfg.image.side, cfg.seed), (220, 3));
}

#[test]
fn environment_variable_sets_the_output_directory() {
    let out = scratch("env");
    let o = Command::new(env!("CARGO_BIN_EXE_u3spat"))
        .args(["schedule"])
        .env("U3S_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("schedule/schedule.txt").exists());
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn pipeline_writes_manifests_that_match_the_files() {
    let out = scratch("pipeline");
    run_ok(&tiny(&["acquire", "--dense"]), &out);
    for method in ["ds", "ss", "u3s", "u3s-noprior"] {
        run_ok(&tiny(&["reconstruct", "--method", method]), &out);
    }
    run_ok(&tiny(&["unmix", "--method", "u3s"]), &out);
    let report = run_ok(&tiny(&["evaluate"]), &out);
    assert_eq!(report.lines().count(), 4);

    let manifest = Manifest::from_toml(&std::fs::read_to_string(out.join("recon-u3s/manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest.outputs.len(), 15);
    for entry in &manifest.outputs {
        let bytes = std::fs::read(out.join("recon-u3s").join(&entry.file)).unwrap();
        assert_eq!(sha256_hex(&bytes), entry.sha256, "{}", entry.file);
    }
    let cfg = Config::from_toml(&std::fs::read_to_string(out.join("recon-u3s/config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.hash(), manifest.config_hash);

    let metrics = std::fs::read_to_string(out.join("evaluate/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 5);

    let img = out.join("recon-ds/img_700nm.u3simg");
    let png = out.join("ds.png");
    let pgm = out.join("ds.pgm");
    let args = ["export-png", img.to_str().unwrap(), png.to_str().unwrap()];
    run_ok(&args, &out);
    run_ok(&["export-png", img.to_str().unwrap(), pgm.to_str().unwrap()], &out);
    assert_eq!(&std::fs::read(&png).unwrap()[..8], b"\x89PNG\r\n\x1a\n");
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n24 24\n255\n"));
    std::fs::remove_dir_all(&out).unwrap();
}

#[test]
fn stale_upstream_stages_are_recomputed() {
    let out = scratch("stale");
    run_ok(&tiny(&["prior"]), &out);
    let first = std::fs::read(out.join("prior/prior.u3simg")).unwrap();
    let mut args = tiny(&["prior"]);
    args.extend(["--set".to_string(), "acquisition.slice_spacing_mm=1.0".to_string()]);
    run_ok(&args, &out);
    assert_ne!(std::fs::read(out.join("prior/prior.u3simg")).unwrap(), first);
    std::fs::remove_dir_all(&out).unwrap();
}
