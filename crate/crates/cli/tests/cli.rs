use std::path::Path;
use std::process::{Command, Output};

fn roadfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadfusion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write(path: &Path, body: &str) -> String {
    std::fs::write(path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn empty_config_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("empty.toml"), "");
    let o = roadfusion(&["--config", &cfg, "validate-config"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    for key in ["train.loss.tau_plus = 0.5", "train.loss.tau_minus = -0.5", "inference.sigma = 4.0"] {
        assert!(out.contains(key), "missing {key} in\n{out}");
    }
    assert!(out.lines().filter(|l| l.contains('=')).all(|l| l.ends_with("# default")), "{out}");
}

#[test]
fn user_keys_are_marked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.toml"), "[train]\nepochs = 3\n");
    let o = roadfusion(&["--config", &cfg, "--set", "inference.sigma=2", "validate-config"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("train.epochs = 3") && l.ends_with("# user")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("inference.sigma = 2") && l.ends_with("# user")), "{out}");
}

#[test]
fn inverted_thresholds_name_both_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.toml"), "[train.loss]\ntau_plus = -0.5\ntau_minus = 0.5\n");
    let o = roadfusion(&["--config", &cfg, "validate-config"]);
    assert!(!o.status.success());
    let t = text(&o);
    assert!(t.contains("train.loss.tau_plus") && t.contains("train.loss.tau_minus"), "{t}");
}

#[test]
fn unknown_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.toml"), "[train]\nepochz = 3\n");
    let o = roadfusion(&["--config", &cfg, "validate-config"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("train.epochz"), "{}", text(&o));
}

#[test]
fn train_without_pool_names_generate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = roadfusion(&[
        "toy-data", "--out", data.to_str().unwrap(), "--size", "32", "--normals", "10", "--defects", "3",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let runs = dir.path().join("runs");
    let o = roadfusion(&[
        "--set", &format!("dataset.root=\"{}\"", data.display()),
        "--set", &format!("output_dir=\"{}\"", runs.display()),
        "train",
    ]);
    assert!(!o.status.success());
    assert!(text(&o).contains("generate"), "{}", text(&o));
}

#[test]
fn full_flow_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = roadfusion(&[
        "toy-data", "--out", data.to_str().unwrap(), "--size", "32", "--normals", "16", "--defects", "4",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let runs = dir.path().join("runs");
    let cfg = write(
        &dir.path().join("toy.toml"),
        &format!(
            "output_dir = \"{}\"\n[dataset]\nroot = \"{}\"\nratios = [0.8, 0.0, 0.2]\n\
             [model]\nbackbone = \"compact-cnn\"\nweights_id = \"random-init-0\"\nlevels = [1, 2]\ninput_size = 32\n\
             [train]\nepochs = 1\nbatch_size = 8\n",
            runs.display(),
            data.display()
        ),
    );
    let mut dirs = Vec::new();
    for name in ["first", "second"] {
        let set = format!("run_name=\"{name}\"");
        for cmd in ["generate", "train", "evaluate"] {
            let o = roadfusion(&["--config", &cfg, "--set", &set, "--jobs", "2", cmd]);
            assert!(o.status.success(), "{cmd}: {}", text(&o));
        }
        dirs.push(runs.join(name).to_string_lossy().into_owned());
    }
    let o = roadfusion(&["report", &dirs[0], &dirs[1]]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.contains("first") || l.contains("second")).count(), 2, "{out}");

    let o = roadfusion(&["--config", &cfg, "--set", "run_name=\"first\"", "--set", "inference.sigma=2", "evaluate"]);
    assert!(!o.status.success());
    let o = roadfusion(&[
        "--config", &cfg, "--set", "run_name=\"first\"", "--set", "inference.sigma=2", "--force", "evaluate",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let rep = std::fs::read_to_string(runs.join("first").join("report.txt")).unwrap();
    assert!(rep.contains("config-mismatch"), "{rep}");
}
