use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5

[dataset]
classes = 3
n_per_class = 60
test_per_class = 30

[model]
hidden = [8]
normalizer = "bn"

[partition]
scheme = "dirichlet"
clients = 5
alpha = 0.4

[fed]
rounds = 25
local_steps = 2
batch_size = 10
participation = 0.6

[momentum]
mode = "local"

[fixbn]
kind = "sliding_window"
window = 4
tau = 1e-3
"#;

fn fedbn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbn")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(config: &str, out: &Path, threads: &str) -> Output {
    let o = fedbn(&["train", "--config", config, "--out", path(out), "--threads", threads]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "8")] {
        train(&cfg, &dir.path().join(name), threads);
    }
    for file in ["metrics.csv", "model.bin", "manifest.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(file)).unwrap(), "{file}");
        assert_eq!(a, fs::read(dir.path().join("c").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn eval_reproduces_last_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("run");
    train(&cfg, &out, "1");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "test_acc").unwrap();
    let last: f64 = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(col)
        .unwrap()
        .parse()
        .unwrap();

    let o = fedbn(&[
        "eval",
        "--model",
        path(&out.join("model.bin")),
        "--data",
        path(&out.join("test.csv")),
    ]);
    assert!(o.status.success());
    let printed: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert_eq!(printed.to_bits(), last.to_bits());
}

#[test]
fn echoed_config_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let first = dir.path().join("first");
    train(&cfg, &first, "1");
    let echo = first.join("config.toml");
    let second = dir.path().join("second");
    train(path(&echo), &second, "2");
    assert_eq!(
        fs::read(first.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
    assert_eq!(fs::read(echo).unwrap(), fs::read(second.join("config.toml")).unwrap());
}

#[test]
fn partition_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("parts");
    let o = fedbn(&["partition", "--config", &cfg, "--out", path(&out)]);
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("client_id,example_index"));
    let mut rows: Vec<usize> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    rows.sort_unstable();
    assert_eq!(rows, (0..180).collect::<Vec<_>>());

    let reseeded = dir.path().join("reseeded");
    fedbn(&["partition", "--config", &cfg, "--out", path(&reseeded), "--seed", "6"]);
    assert_ne!(text, fs::read_to_string(reseeded.join("manifest.csv")).unwrap());
}

#[test]
fn gradcheck_passes_on_builtin_and_configured_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = fedbn(&["gradcheck", "--config", &cfg]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success(), "{stdout}");
    for layer in [
        "dense",
        "conv2d",
        "batchnorm-train",
        "batchnorm-eval",
        "groupnorm",
        "layernorm",
        "instancenorm",
    ] {
        assert!(stdout.contains(layer), "{layer} missing from\n{stdout}");
    }
    assert!(stdout.contains("configured model"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(fedbn(&["--help"])), 0);
    assert_eq!(code(fedbn(&["train"])), 1);
    assert_eq!(code(fedbn(&["train", "--config", "x.toml", "--threads", "0"])), 1);

    let bad = write_config(dir.path(), "[fed]\nrounds = -3\n");
    let o = fedbn(&["train", "--config", &bad]);
    assert_eq!(code(o), 1);
    let unknown = write_config(dir.path(), "[fed]\nrouns = 3\n");
    let o = fedbn(&["train", "--config", &unknown, "--out", path(&dir.path().join("u"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(fedbn(&["train", "--config", path(&missing)])), 3);

    let garbage = dir.path().join("model.bin");
    fs::write(&garbage, b"not a model").unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "f0,label\n1.0,0\n").unwrap();
    assert_eq!(
        code(fedbn(&["eval", "--model", path(&garbage), "--data", path(&data)])),
        3
    );

    // A valid model fed rows of the wrong width is a runtime error.
    let cfg = write_config(dir.path(), CONFIG);
    let run = dir.path().join("run");
    fedbn(&["train", "--config", &cfg, "--out", path(&run)]);
    let o = fedbn(&["eval", "--model", path(&run.join("model.bin")), "--data", path(&data)]);
    assert_eq!(code(o), 2);
}
