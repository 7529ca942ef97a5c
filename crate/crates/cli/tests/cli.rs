use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_picl");

const MOCK: &str = r#"
n_blocks = 8
hidden_dim = 8
distractors = 2
reference_systems = 4
plants = [{ block = 4, sources = ["TotalEnergy"] }]
"#;

fn picl(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("picl.toml");
    let text = format!(
        r#"
output_dir = "out"
seed = 3
systems = ["mass_spring"]
context_lengths = [8, 16]
blocks = [0, 4, 7]

[simulation]
n_trajectories = 2

[sae]
learning_rate = 1e-3
sparsity_weight = 0.1
batch_size = 64
epochs = 2

[analysis]
sync_fraction = 0.25

[intervention]
n_blocks = 2
trials = 2

[evaluation]
n_samples = 3
horizon = 16

[mock]
{MOCK}
"#
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn stdio_mock_passes_conformance() {
    let dir = tempfile::tempdir().unwrap();
    let mock = dir.path().join("mock.toml");
    fs::write(&mock, MOCK).unwrap();
    let endpoint = format!("stdio:{BIN} mock-serve --stdio --mock-config {}", mock.display());
    let out = picl(&["conformance", &endpoint]);
    let text = stdout(&out);
    println!("{text}");
    assert!(out.status.success(), "{text}{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 10);
}

#[test]
fn tcp_mock_passes_conformance() {
    let dir = tempfile::tempdir().unwrap();
    let mock = dir.path().join("mock.toml");
    fs::write(&mock, MOCK).unwrap();
    let mut server = Command::new(BIN)
        .args(["mock-serve", "--tcp", "127.0.0.1:0", "--max-connections", "1", "--mock-config"])
        .arg(&mock)
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(server.stderr.take().unwrap());
    let addr = loop {
        let mut line = String::new();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited");
        if let Some(rest) = line.split("listening on ").nth(1) {
            break rest.trim().to_owned();
        }
    };
    let out = picl(&["conformance", &format!("tcp://{addr}")]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(server.wait().unwrap().success());
}

#[test]
fn run_rerun_and_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();

    let out = picl(&["run", "--config", config, "--dry-run"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).matches(" run\n").count(), 9, "{}", stdout(&out));
    assert!(!dir.path().join("out").exists());

    let out = picl(&["run", "--config", config, "--jobs", "2"]);
    assert!(out.status.success(), "{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/manifest.json").is_file());
    assert!(dir.path().join("out/report/forecast_first_step.csv").is_file());
    assert_eq!(fs::read_dir(dir.path().join("out/sae/L8")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "psae")
    }).count(), 3);

    let out = picl(&["run", "--config", config]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).matches("skipped").count(), 9, "{}", stdout(&out));

    let out = picl(&["sync", "--config", config, "--force"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("sync       ran"), "{}", stdout(&out));

    let out = picl(&["simulate", "--config", config, "--seed-override", "5"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("simulate   ran"));
}

#[test]
fn bad_config_and_failed_stage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let text = fs::read_to_string(&config).unwrap().replace("seed = 3", "sead = 3");
    let typo = dir.path().join("typo.toml");
    fs::write(&typo, text).unwrap();
    let out = picl(&["run", "--config", typo.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sead"));

    let out = picl(&["correlate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("blocked by train-sae"), "{}", stdout(&out));
}
