use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 8] = [
    "--set",
    "policy.channels=[2,4,4]",
    "--set",
    "policy.embed=8",
    "--set",
    "policy.hidden=8",
    "--set",
    "policy.aux_hidden=16",
];

fn gapnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gapnav"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let o = gapnav(&[
        "train",
        "--config",
        "/no/such/run.toml",
        "--seed",
        "1",
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/no/such/run.toml"), "{}", stderr(&o));

    let o = gapnav(&["train", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"));

    let o = gapnav(&["train", "--seed", "1", "--out-dir", p(&out), "--set", "train.batch=0"]);
    assert_eq!(code(&o), 1);
    let o = gapnav(&[
        "train",
        "--seed",
        "1",
        "--out-dir",
        p(&out),
        "--set",
        "train.no_such_key=3",
    ]);
    assert_eq!(code(&o), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbatch = \"many\"\n").unwrap();
    let o = gapnav(&["train", "--config", p(&bad), "--seed", "1", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 1);

    let o = gapnav(&["eval-single", "--seed", "1", "--out-dir", p(&out), "--policy", p(&bad)]);
    assert_eq!(code(&o), 1);

    assert_eq!(code(&gapnav(&["--help"])), 0);
    assert_eq!(code(&gapnav(&["no-such-command"])), 1);
}

#[test]
fn render_test_writes_image_and_scene() {
    let dir = tempfile::tempdir().unwrap();
    let o = gapnav(&["render-test", "--scene-seed", "4", "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pgm = std::fs::read(dir.path().join("depth.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    let scene = std::fs::read_to_string(dir.path().join("scene.txt")).unwrap();
    assert!(!scene.is_empty());
}

#[test]
fn gradcheck_passes() {
    let o = gapnav(&["gradcheck", "--seed", "7", "--trials", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn train_then_evaluate_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "train",
            "--seed",
            "3",
            "--out-dir",
            p(&out),
            "--iterations",
            "2",
            "--batch",
            "2",
        ];
        args.extend(["--horizon", "10"]);
        args.extend(TINY);
        let o = gapnav(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["train_log.csv", "policy.ckpt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let policy = a.join("policy.ckpt");

    let eval = |args: &[&str], name: &str| {
        let out = dir.path().join(name);
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--seed", "5", "--out-dir", p(&out), "--policy", p(&policy)]);
        let o = gapnav(&full);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let s1 = eval(&["eval-single", "--trials", "2"], "s1");
    let s2 = eval(&["eval-single", "--trials", "2"], "s2");
    assert_eq!(
        std::fs::read(s1.join("records.csv")).unwrap(),
        std::fs::read(s2.join("records.csv")).unwrap()
    );
    let summary = std::fs::read_to_string(s1.join("summary.txt")).unwrap();
    assert!(summary.starts_with("version=1\n"));

    let m = eval(&["eval-multi", "--gaps", "2", "--trials", "2"], "m");
    assert!(m.join("records.csv").exists());
    let n = eval(&["eval-noise", "--levels", "0,0.5", "--trials", "2"], "n");
    assert!(n.join("noise.csv").exists());

    let o = gapnav(&[
        "eval-multi",
        "--seed",
        "5",
        "--out-dir",
        p(&m),
        "--policy",
        p(&policy),
        "--reset",
        "sometimes",
    ]);
    assert_eq!(code(&o), 1);
    let o = gapnav(&[
        "eval-multi",
        "--seed",
        "5",
        "--out-dir",
        p(&m),
        "--policy",
        p(&policy),
        "--reset",
        "classifier",
    ]);
    assert_eq!(code(&o), 1, "classifier resets need --aux");
}

#[test]
fn degenerate_auxiliary_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let mut args = vec![
        "train",
        "--seed",
        "3",
        "--out-dir",
        p(&out),
        "--iterations",
        "1",
        "--batch",
        "1",
    ];
    args.extend(["--horizon", "5"]);
    args.extend(TINY);
    assert_eq!(code(&gapnav(&args)), 0);
    let policy = out.join("policy.ckpt");
    let mut args = vec!["train-aux", "--seed", "3", "--out-dir", p(&out), "--policy", p(&policy)];
    args.extend(["--trajectories", "4", "--set", "aux.horizon=10"]);
    args.extend(TINY);
    let o = gapnav(&args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("single-class"));
}
