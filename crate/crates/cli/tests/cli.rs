use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wecomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wecomp")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = wecomp(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const CORPUS: &str = "train_size = 300\nvalidation_size = 60\ntest_size = 80\nvocab_size = 700\nvalues_per_tag = 8\nembedding_dim = 8\n";

fn small_data(dir: &Path) {
    fs::write(dir.join("corpus.toml"), CORPUS).unwrap();
    ok(dir, &["gen-data", "--config", "corpus.toml", "--out", "data"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&wecomp(d, &["--help"])), 0);
    assert_eq!(code(&wecomp(d, &["--version"])), 0);
    assert_eq!(code(&wecomp(d, &["frobnicate"])), 1);
    assert_eq!(code(&wecomp(d, &["quantize", "--model", "m.nlu"])), 1);
    assert_eq!(code(&wecomp(d, &["inspect", "missing.nlu"])), 2);
    fs::write(d.join("junk.nlu"), b"NLU1 but not really").unwrap();
    assert_eq!(code(&wecomp(d, &["inspect", "junk.nlu"])), 2);
    fs::write(d.join("bad.toml"), "seeds = []\n").unwrap();
    assert_eq!(code(&wecomp(d, &["sweep", "--config", "bad.toml"])), 1);
    fs::write(d.join("typo.toml"), "seedz = [1]\n").unwrap();
    assert_eq!(code(&wecomp(d, &["sweep", "--config", "typo.toml"])), 1);
    assert_eq!(code(&wecomp(d, &["sweep", "--M", "8,4", "--K", "16,16,16"])), 1);
    assert_eq!(code(&wecomp(d, &["sweep", "--regimes", "tag-nothing"])), 1);
}

#[test]
fn stage_by_stage_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    for f in ["train.txt", "validation.txt", "test.txt", "pretrained.emb", "corpus.toml"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let split = ["--train", "data/train.txt", "--validation", "data/validation.txt"];
    let fast = ["--epochs", "2", "--lr", "1e-2", "--hidden", "8"];

    let mut args = vec!["train-nlu"];
    args.extend(split);
    args.extend(["--embeddings", "data/pretrained.emb", "--out", "base.nlu", "--report", "base.jsonl"]);
    args.extend(fast);
    let out = ok(d, &args);
    assert!(out.starts_with("# resolved config"));
    assert!(out.contains("hidden = 8"));
    let report = fs::read_to_string(d.join("base.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3 + 1, "config, epochs 0-2, summary");

    ok(d, &["train-ae", "--embeddings", "base.nlu", "--M", "2", "--K", "4", "--epochs", "3", "--lr", "1e-2", "--out", "ae.dae"]);
    ok(d, &["compress-dccl", "--autoencoder", "ae.dae", "--embeddings", "base.nlu", "--out", "codes.dccl", "--model", "base.nlu", "--model-out", "tag.nlu"]);
    let mut args = vec!["finetune"];
    args.extend(split);
    args.extend(["--model", "base.nlu", "--codes", "codes.dccl", "--out", "ft.nlu", "--epochs", "1"]);
    ok(d, &args);
    let mut args = vec!["train-taskaware"];
    args.extend(split);
    args.extend(["--model", "base.nlu", "--autoencoder", "ae.dae", "--out", "taw.nlu", "--epochs", "1"]);
    ok(d, &args);
    ok(d, &["compress-svd", "--embeddings", "base.nlu", "--n", "0.5", "--out", "f.svdf"]);
    let mut args = vec!["train-taskaware", "--regime", "taskaware_svd"];
    args.extend(split);
    args.extend(["--model", "base.nlu", "--factors", "f.svdf", "--out", "svd.nlu", "--epochs", "1"]);
    ok(d, &args);
    ok(d, &["quantize", "--model", "taw.nlu", "--out", "q.nlu"]);

    ok(d, &["evaluate", "--model", "base.nlu", "--corpus", "data/test.txt", "--report-out", "base.json"]);
    let table = ok(d, &["evaluate", "--model", "base.nlu", "--corpus", "data/test.txt", "--baseline-report", "base.json", "--baseline-model", "base.nlu"]);
    assert!(table.contains("IRER   +0.00"), "{table}");
    assert!(table.contains("model rate      1.00x"), "{table}");
    let table = ok(d, &["evaluate", "--model", "q.nlu", "--corpus", "data/test.txt", "--baseline-report", "base.json", "--baseline-model", "base.nlu"]);
    assert!(table.contains("relative change vs baseline"));

    assert!(ok(d, &["inspect", "q.nlu"]).contains("q8"));
    assert!(ok(d, &["inspect", "tag.nlu"]).contains("codes"));
    assert!(ok(d, &["inspect", "codes.dccl"]).contains("M 2  K 4"));
    assert!(ok(d, &["inspect", "f.svdf"]).contains("fraction 0.5"));
    assert!(ok(d, &["inspect", "data/pretrained.emb"]).contains("dim 8"));
    assert!(ok(d, &["inspect", "ae.dae"]).contains("M 2  K 4"));

    // the input checkpoint is left untouched
    let before = fs::read(d.join("base.nlu")).unwrap();
    let mut args = vec!["finetune"];
    args.extend(split);
    args.extend(["--model", "base.nlu", "--codes", "codes.dccl", "--out", "ft2.nlu", "--epochs", "1"]);
    ok(d, &args);
    assert_eq!(fs::read(d.join("base.nlu")).unwrap(), before);
    assert_eq!(fs::read(d.join("ft.nlu")).unwrap(), fs::read(d.join("ft2.nlu")).unwrap());
}

#[test]
fn evaluation_rejects_mismatched_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    fs::write(d.join("other.toml"), CORPUS.replace("vocab_size = 700", "vocab_size = 650")).unwrap();
    ok(d, &["gen-data", "--config", "other.toml", "--out", "other"]);
    ok(d, &["train-nlu", "--train", "data/train.txt", "--validation", "data/validation.txt", "--embeddings", "data/pretrained.emb", "--out", "m.nlu", "--epochs", "0", "--hidden", "4"]);
    let o = wecomp(d, &["evaluate", "--model", "m.nlu", "--corpus", "other/test.txt"]);
    assert_eq!(code(&o), 2);
}
