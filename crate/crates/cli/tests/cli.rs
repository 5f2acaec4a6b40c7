use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xoffense"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = r#"
seed = 5
pretrain_per_language = 150
source_train = 120
target_train = 260
target_test = 80
"#;

const MODEL: &str = r#"
[model]
num_layers = 1
hidden_size = 16
num_heads = 2
ff_size = 32
max_len = 24
dropout_rate = 0.0
"#;

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, content: &str) -> PathBuf {
        let path = self.path(rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, content).unwrap();
        path
    }

    /// synth data, vocabulary, MLM checkpoint and a fine-tuned source checkpoint
    fn prepare(&self) {
        let spec = self.write("spec.toml", SPEC);
        ok(&["synth-gen", "--spec", p(&spec), "--out-dir", p(&self.path("data"))]);
        let spec3 = self.write("spec3.toml", &format!("{SPEC}target_classes = 3\n"));
        ok(&["synth-gen", "--spec", p(&spec3), "--out-dir", p(&self.path("data3"))]);
        ok(&[
            "tokenizer-train",
            p(&self.path("data/pretrain.txt")),
            "--vocab-size",
            "250",
            "--out",
            p(&self.path("vocab.txt")),
        ]);
        let pre = self.write(
            "pretrain.toml",
            &format!(
                "output_dir = \"pre\"\n[tokenizer]\npath = \"vocab.txt\"\n{MODEL}\n[pretrain]\ncorpus = [\"data/pretrain.txt\"]\nepochs = 1\nbatch_size = 32\nseed = 3\n"
            ),
        );
        ok(&["pretrain", "--manifest", p(&pre)]);
        let src = self.write(
            "source.toml",
            &format!(
                "output_dir = \"source\"\n[tokenizer]\npath = \"vocab.txt\"\n{MODEL}\n[data]\ntask = \"synth-a\"\nlabels = [\"not-offensive\", \"offensive\"]\ntrain = \"data/source_train.tsv\"\n[transfer]\ninit_checkpoint = \"pre/model.ckpt\"\n[train]\nepochs = 1\nlearning_rate = 1e-3\nseed = 1\n"
            ),
        );
        ok(&["train", "--manifest", p(&src)]);
    }

    fn target_manifest(&self, name: &str, data: &str, labels: &str, strategy: &str, out: &str) -> PathBuf {
        self.write(
            name,
            &format!(
                "output_dir = \"{out}\"\n[tokenizer]\npath = \"vocab.txt\"\n{MODEL}\n[data]\ntask = \"synth-b\"\nlabels = {labels}\ntrain = \"{data}/target_train.tsv\"\ntest = \"{data}/target_test.tsv\"\n[transfer]\nstrategy = \"{strategy}\"\ncheckpoint = \"source/model.ckpt\"\ninit_checkpoint = \"pre/model.ckpt\"\n[train]\nepochs = 1\nlearning_rate = 1e-3\n"
            ),
        )
    }
}

#[test]
fn end_to_end_pipeline() {
    let lab = Lab::new();
    lab.prepare();
    for f in ["pre/model.ckpt", "pre/pretrain_history.csv", "source/model.ckpt", "source/history.csv"] {
        assert!(lab.path(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(lab.path("source/history.csv")).unwrap();
    assert!(history.starts_with("round,step,train_loss,eval_loss,eval_macro_f1\n"));

    // progress test: 2 strategies x 2 sizes x 1 seed
    let labels2 = "[\"not-offensive\", \"offensive\"]";
    let m = lab.target_manifest("pt.toml", "data", labels2, "transfer-full", "pt");
    ok(&["progress-test", "--manifest", p(&m), "--sizes", "0,100", "--seeds", "1"]);
    let curve = std::fs::read_to_string(lab.path("pt/curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "strategy,n_train,seed,macro_f1");
    assert_eq!(lines.len(), 1 + 4, "{curve}");
    assert!(lines[1].starts_with("scratch,0,1,"));
    assert!(lines[3].starts_with("transfer-full,0,1,"));
    assert!(lab.path("pt/report.md").is_file());
    assert!(lab.path("pt/run_info.txt").is_file());

    // rerun: byte-identical CSVs
    let report = std::fs::read(lab.path("pt/report.csv")).unwrap();
    ok(&["progress-test", "--manifest", p(&m), "--sizes", "0,100", "--seeds", "1"]);
    assert_eq!(std::fs::read_to_string(lab.path("pt/curve.csv")).unwrap(), curve);
    assert_eq!(std::fs::read(lab.path("pt/report.csv")).unwrap(), report);

    // evaluate the source checkpoint on the target test split
    ok(&[
        "evaluate",
        "--checkpoint",
        p(&lab.path("source/model.ckpt")),
        "--dataset",
        p(&lab.path("data/target_test.tsv")),
        "--tokenizer",
        p(&lab.path("vocab.txt")),
        "--out",
        p(&lab.path("eval")),
    ]);
    let csv = std::fs::read_to_string(lab.path("eval/report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].len(), rows[1].len());
    assert_eq!(rows[0].len(), 4 + 3 * 2 + 4);
    for v in &rows[1][4..] {
        let x: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
    let heat = std::fs::read_to_string(lab.path("eval/confusion.csv")).unwrap();
    assert_eq!(heat.lines().count(), 3);

    // transfer-full into a 3-class task is a validation error
    let labels3 = "[\"non-aggressive\", \"overtly-aggressive\", \"covertly-aggressive\"]";
    let m3 = lab.target_manifest("t3.toml", "data3", labels3, "transfer-full", "t3");
    let out = run(&["train", "--manifest", p(&m3)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("class count mismatch") && err.contains("load_encoder_only"), "{err}");

    // the encoder-only strategy handles it
    let m3 = lab.target_manifest("t3e.toml", "data3", labels3, "transfer-encoder-only", "t3e");
    ok(&["train", "--manifest", p(&m3)]);
    let heat = std::fs::read_to_string(lab.path("t3e/confusion.csv")).unwrap();
    assert_eq!(heat.lines().count(), 4);
}

#[test]
fn validation_errors_exit_with_one() {
    let lab = Lab::new();
    let m = lab.write("m.toml", "output_dir = \"o\"\n[tokenizer]\npath = \"nope.txt\"\n[model]\n");
    let out = run(&["train", "--manifest", p(&m)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tokenizer.path"));

    let out = run(&["train", "--manifest", p(&lab.path("missing.toml"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["progress-test"]);
    assert_eq!(out.status.code(), Some(1));

    let bad = lab.write("bad.toml", "output_dir = 3\n");
    let out = run(&["train", "--manifest", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
