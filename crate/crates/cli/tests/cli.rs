use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
master_seed = 3
n = 8
m = 1
total_rounds = 2

[model]
hidden_dims = [8]

[data.source]
kind = "synthetic"
num_classes = 3
dim = 16
per_class = 40

[aggregator]
rule = "krum"

[attack]
kind = "adaptive_krum"

[csft]
total_epochs = 4
"#;

fn fedbd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbd"))
        .args(args)
        .env("FEDBD_OUTPUT_ROOT", root)
        .output()
        .expect("spawn fedbd")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = fedbd(&["run", &cfg], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let dir = tmp.path().join("tiny-seed3");
    let csv = fs::read_to_string(dir.join("trace.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "round,accuracy,asr,alpha,delta,selected_id,selected_is_malicious");

    let summary: String = fs::read_to_string(dir.join("summary.json")).unwrap();
    assert!(summary.contains("\"acc_diff\""));

    for metric in ["accuracy", "asr", "alpha", "delta"] {
        let svg = fs::read_to_string(dir.join(format!("{metric}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).expect("well-formed svg");
        let line = doc
            .descendants()
            .find(|n| n.has_tag_name("polyline"))
            .expect("polyline");
        let points = line.attribute("points").unwrap().split_whitespace().count();
        let column = ["accuracy", "asr", "alpha", "delta"].iter().position(|m| *m == metric).unwrap() + 1;
        let present = lines[1..].iter().filter(|l| !l.split(',').nth(column).unwrap().is_empty()).count();
        assert_eq!(points, present, "{metric}");
    }
}

#[test]
fn echoed_config_reproduces_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let first = tmp.path().join("first");
    assert!(fedbd(&["run", &cfg, "--out", first.to_str().unwrap()], tmp.path()).status.success());
    let echo = first.join("config.toml");
    let second = tmp.path().join("second");
    assert!(fedbd(&["run", echo.to_str().unwrap(), "--out", second.to_str().unwrap()], tmp.path()).status.success());
    assert_eq!(
        fs::read(first.join("summary.json")).unwrap(),
        fs::read(second.join("summary.json")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(echo).unwrap(),
        fs::read_to_string(second.join("config.toml")).unwrap()
    );
}

#[test]
fn seed_override_changes_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    assert!(fedbd(&["run", &cfg, "--seed", "9"], tmp.path()).status.success());
    let echoed = fs::read_to_string(tmp.path().join("tiny-seed9/config.toml")).unwrap();
    assert!(echoed.contains("master_seed = 9"));
}

#[test]
fn errors_exit_nonzero_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(
        tmp.path(),
        "bad.toml",
        "master_seed = 1\nn = 20\nm = 9\n[aggregator]\nrule = \"krum\"\n",
    );
    let out = fedbd(&["run", &bad], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("2m+2 < n"));

    let out = fedbd(&["run", "/nonexistent/config.toml"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/config.toml"));

    let typo = write_config(tmp.path(), "typo.toml", "master_seed = 1\nrounds = 3\n");
    let out = fedbd(&["run", &typo], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));

    let out = fedbd(&["summarize", tmp.path().join("empty").to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn sweep_then_summarize() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = fedbd(
        &["sweep", &cfg, "--axis", "csft_epochs", "--values", "2,4", "--repeats", "2"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("tiny-csft_epochs");
    let table = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.join("csft_epochs=2/r1/summary.json").exists());

    let csv = tmp.path().join("table.csv");
    let out = fedbd(&["summarize", dir.to_str().unwrap(), "--csv", csv.to_str().unwrap()], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("krum+") && text.contains("adaptive_krum"));
    let grid = fs::read_to_string(csv).unwrap();
    assert!(grid.starts_with("defense,attack,m,runs,"));
    assert!(grid.lines().nth(1).unwrap().contains(",4,"));

    let out = fedbd(&["sweep", &cfg, "--axis", "epochs", "--values", "1"], tmp.path());
    assert!(!out.status.success());
}
