use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn crowdfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdfl"))
        .args(args)
        .output()
        .expect("spawn crowdfl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("crowdfl-cli-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn sdiv_matches_plain_quotient() {
    let o = crowdfl(&["sdiv", "--x", "7", "--y", "2", "--L", "2", "--zeta", "128"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.starts_with("invocation: crowdfl sdiv --x 7 --y 2 --L 2 --kappa 32 --sigma 80"));
    assert!(out.lines().any(|l| l == "350 = 350"), "{out}");
}

#[test]
fn smul_handles_signs() {
    let o = crowdfl(&["smul", "--x", "-12", "--y", "5", "--zeta", "128"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "-60 = -60"));
}

#[test]
fn avg_prints_decrypted_and_plain() {
    let o = crowdfl(&["avg", "--model", "10:0.5,-1.25", "--model", "30:1,2", "--L", "3", "--zeta", "128"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "0.875 = 0.875"));
    assert!(out.lines().any(|l| l == "1.187 = 1.187"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(crowdfl(&["sdiv", "--x", "0", "--y", "2"]).status.code(), Some(1));
    assert_eq!(crowdfl(&["nonsense"]).status.code(), Some(1));
    let o = crowdfl(&["run", "--config", "/definitely/missing.cfg", "--metrics-out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
    let bad = scratch("bad.cfg");
    fs::write(&bad, "n = 4\nwhat = 1\n").unwrap();
    let o = crowdfl(&["rewards", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(crowdfl(&["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_metrics_exit_three() {
    let cfg = scratch("io.cfg");
    fs::write(&cfg, "n = 2\nT = 1\nzeta = 128\nrewards = off\n").unwrap();
    let o = crowdfl(&["run", "--config", cfg.to_str().unwrap(), "--metrics-out", "/definitely/missing/m.jsonl"]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
}

#[test]
fn run_writes_metrics_and_rewards_print_csv() {
    let cfg = scratch("run.cfg");
    fs::write(&cfg, "n = 3\nT = 2\nseed = 9\n").unwrap();
    let metrics = scratch("m.jsonl");
    let o = crowdfl(&["run", "--config", cfg.to_str().unwrap(), "--metrics-out", metrics.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("config: n=3 T=2"));
    let jsonl = fs::read_to_string(&metrics).unwrap();
    assert!(jsonl.lines().count() >= 3);
    for line in jsonl.lines() {
        assert!(line.starts_with('{') && line.ends_with('}'));
    }

    let o = crowdfl(&["rewards", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("round,participant_id,mu_decrypted,w_oracle,d_oracle"));
    assert_eq!(out.lines().filter(|l| l.starts_with("1,") || l.starts_with("2,")).count(), 6);
}

#[test]
fn keygen_output_feeds_sdiv() {
    let keys = scratch("keys.bin");
    let o = crowdfl(&["keygen", "--zeta", "128", "--out", keys.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{o:?}");
    let o = crowdfl(&["sdiv", "--x", "9", "--y", "4", "--L", "3", "--keys", keys.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().any(|l| l == "2250 = 2250"));
}
