use std::process::Command;

fn optforge() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_optforge"));
    c.env("RUST_LOG", "warn");
    c
}

const QUICK: [&str; 10] = [
    "--set",
    "map=tworoom",
    "--set",
    "expert.n_trajectories=20",
    "--set",
    "ddo.epochs=30",
    "--set",
    "smdp.episodes=500",
    "--set",
    "eval.n_tasks=10",
];

#[test]
fn unknown_key_exits_with_config_code() {
    let out = optforge().args(["pipeline", "--set", "ddo.nonsense=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn bad_env_override_exits_with_config_code() {
    let out = optforge().arg("config").env("OPTFORGE_DDO_ALPHA", "1.5").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_without_inputs_exits_with_stage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = optforge().arg("eval").arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stages_run_individually_then_render() {
    let tmp = tempfile::tempdir().unwrap();
    for stage in ["expert", "ddo", "smdp", "eval"] {
        let out = optforge().arg(stage).arg("--out").arg(tmp.path()).args(QUICK).output().unwrap();
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(tmp.path().join("metrics.txt").exists());

    let out = optforge().args(["render", "--option", "0"]).arg("--out").arg(tmp.path()).args(QUICK).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.chars().count() == 11));

    let svg = tmp.path().join("expert.svg");
    let out = optforge()
        .args(["render", "--format", "svg", "--output"])
        .arg(&svg)
        .arg("--out")
        .arg(tmp.path())
        .args(QUICK)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let out = optforge().args(["render", "--option", "9"]).arg("--out").arg(tmp.path()).args(QUICK).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_dump_reflects_flags() {
    let out = optforge().args(["config", "--seed", "42"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "seed = 42"));
}
