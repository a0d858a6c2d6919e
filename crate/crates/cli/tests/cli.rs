use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn caes(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caes"))
        .args(args)
        .current_dir(dir)
        .env_remove("CAES_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn caes")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tubingen_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/tubingen")
        .canonicalize()
        .unwrap()
}

const TINY: &str = r#"
run_id = "tiny"
output_dir = "out"

[dataset]
classes = 2
per_class = 12

[classifier]
input_size = 16
epochs = 2

[ncc]
corpus_size = 40

[ncc.train]
epochs = 1
hidden = 8

[caes]
fraction = 0.1
"#;

#[test]
fn dry_run_prints_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = caes(&["score", "--dry-run", "--set", "run_id=\"x\""], dir.path());
    // Score needs checkpoints even for a dry run.
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("classifier.checkpoint"), "{}", stderr(&o));

    let o = caes(&["train-ncc", "--dry-run", "--set", "run_id=x"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("run x: TrainNcc"), "{}", stdout(&o));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = caes(&["gen-data", "--set", "dataset.classes=0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset.classes"), "{}", stderr(&o));

    let o = caes(&["gen-data", "--set", "dataset.colour=3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_is_read_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "run_id = \"from-env\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_caes"))
        .args(["gen-data", "--dry-run"])
        .current_dir(dir.path())
        .env("CAES_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("run from-env:"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.toml"), TINY).unwrap();
    let tub = format!("ncc.tubingen_dir={}", tubingen_dir().display());
    let run = |cmd: &str| {
        let o = caes(&[cmd, "-c", "run.toml", "--set", &tub], root);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        o
    };

    run("gen-data");
    assert_eq!(std::fs::read_to_string(root.join("out/ncc-corpus.jsonl")).unwrap().lines().count(), 40);
    assert!(root.join("out/dataset").is_dir());

    run("train-ncc");
    let o = run("eval-ncc");
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 100);
    let first: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(first[0], "pair0001");
    assert_eq!(first[2], "1");
    assert!(lines[99].starts_with("weighted_accuracy="));

    run("train-classifier");
    run("make-masks");
    assert!(root.join("out/masks/gradcam/masks-report.json").is_file());
    run("score");
    for source in ["human", "gradcam"] {
        let d = root.join("out").join(source);
        for f in ["caes.json", "caes.csv", "features.json", "caes-causal-object.svg"] {
            assert!(d.join(f).is_file(), "{source}/{f}");
        }
    }
    let csv = std::fs::read_to_string(root.join("out/human/caes.csv")).unwrap();
    assert!(csv.starts_with("class,set,ratio,mean,std,n\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);

    std::fs::remove_file(root.join("out/human/caes.csv")).unwrap();
    run("report");
    assert_eq!(std::fs::read_to_string(root.join("out/human/caes.csv")).unwrap(), csv);
}
