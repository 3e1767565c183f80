use std::path::Path;
use std::process::{Command, Output};

use strlab::synthgen::{manifest_hash, read_manifest, GrayImage};

fn strlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strlab")).args(args).output().expect("spawn strlab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_writes_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = strlab(&["gen", "--script", "A", "--count", "100", "--out", p(out), "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("\"seed\":4"));
    }
    assert_eq!(read_manifest(&a).unwrap().len(), 100);
    assert_eq!(manifest_hash(&a).unwrap(), manifest_hash(&b).unwrap());

    let split = dir.path().join("s");
    let o = strlab(&["gen", "--script", "B", "--count", "50", "--out", p(&split), "--split", "0.8"]);
    assert!(o.status.success());
    assert_eq!(read_manifest(&split.join("train")).unwrap().len() + read_manifest(&split.join("test")).unwrap().len(), 50);
}

#[test]
fn usage_errors_exit_2() {
    let o = strlab(&["gen", "--script", "Z", "--count", "1", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(strlab(&["stats", "--corpus", "c", "--verbose"]).status.code(), Some(2));
    assert_eq!(strlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(strlab(&["train", "--model", "lenet", "--data", "d", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn corpus_commands() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "ab\nab\n").unwrap();
    let o = strlab(&["stats", "--corpus", p(&corpus)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "2\t2.00\t0.00\n");

    std::fs::write(&corpus, "aba cab\u{200B}a\n").unwrap();
    let o = strlab(&["ngrams", "--corpus", p(&corpus), "--n", "1", "--top", "5"]);
    assert!(o.status.success());
    // Hand count over "aba" and "caba".
    assert_eq!(stdout(&o), "a\t4\nb\t2\nc\t1\n");
    let o = strlab(&["ngrams", "--corpus", p(&corpus), "--n", "2", "--top", "2"]);
    assert_eq!(stdout(&o), "ab\t2\nba\t2\n");
    assert_eq!(strlab(&["ngrams", "--corpus", p(&corpus), "--n", "6"]).status.code(), Some(1));
    assert_eq!(strlab(&["stats", "--corpus", p(&dir.path().join("missing"))]).status.code(), Some(1));
}

#[test]
fn train_eval_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = strlab(&["gen", "--script", "A", "--count", "16", "--lexicon", "16", "--out", p(&data), "--clean", "--seed", "2"]);
    assert!(o.status.success());

    let ckpt = dir.path().join("m.strc");
    let curve = dir.path().join("curve.tsv");
    let o = strlab(&[
        "train", "--model", "crnn", "--data", p(&data), "--out", p(&ckpt), "--epochs", "300", "--target-wrr", "100", "--curve", p(&curve), "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("correction\tabsent"));
    assert!(std::fs::read_to_string(&curve).unwrap().starts_with("step\tloss\n1\t"));

    // Overfit model on its own training set.
    let o = strlab(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), "16\t100.00\t100.00");
    assert_eq!(out.lines().nth(1).unwrap(), "gt\tpred\tdistance");
    assert_eq!(out.lines().count(), 18);

    let row = &read_manifest(&data).unwrap()[0];
    let o = strlab(&["decode", "--ckpt", p(&ckpt), "--image", p(&data.join(&row.path))]);
    assert_eq!(stdout(&o), format!("{}\n", row.label));

    let blank = dir.path().join("blank.pgm");
    GrayImage::blank(32, 100).save(&blank).unwrap();
    let o = strlab(&["decode", "--ckpt", p(&ckpt), "--image", p(&blank)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "\n");

    let o = strlab(&["decode", "--ckpt", p(&dir.path().join("nope.strc")), "--image", p(&blank)]);
    assert_eq!(o.status.code(), Some(1));
    let o = strlab(&["eval", "--ckpt", p(&dir.path().join("nope.strc")), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(1));

    // Fine-tuning with a correction head from the trained checkpoint.
    let corr = dir.path().join("corr.strc");
    let o = strlab(&["train", "--model", "crnn", "--data", p(&data), "--out", p(&corr), "--from", p(&ckpt), "--correction", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("correction\tpresent"));

    let o = strlab(&["train", "--model", "starnet", "--data", p(&data), "--out", p(&dir.path().join("s.strc")), "--from", p(&ckpt), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ArchMismatch"));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(strlab(&["gen", "--script", "C", "--count", "24", "--out", p(&data)]).status.success());
    let mut curves = Vec::new();
    for i in 0..2 {
        let curve = dir.path().join(format!("c{i}.tsv"));
        let out = dir.path().join(format!("m{i}.strc"));
        let o = strlab(&["train", "--model", "crnn", "--size", "tiny", "--data", p(&data), "--out", p(&out), "--epochs", "2", "--curve", p(&curve)]);
        assert!(o.status.success(), "{}", stderr(&o));
        curves.push(std::fs::read(&curve).unwrap());
    }
    assert_eq!(curves[0], curves[1]);

    let short = dir.path().join("short.strc");
    let o = strlab(&["train", "--model", "crnn", "--size", "tiny", "--data", p(&data), "--out", p(&short), "--epochs", "1"]);
    assert!(o.status.success());
    let resumed = dir.path().join("resumed.tsv");
    let last = dir.path().join("short.strc.last");
    let o = strlab(&["train", "--data", p(&data), "--out", p(&short), "--epochs", "2", "--resume", p(&last), "--curve", p(&resumed)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let losses = |bytes: &[u8]| -> Vec<f64> {
        String::from_utf8_lossy(bytes).lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect()
    };
    let (full, res) = (losses(&curves[0]), losses(&std::fs::read(&resumed).unwrap()));
    assert_eq!(full.len(), res.len());
    assert!(full.iter().zip(&res).all(|(a, b)| (a - b).abs() < 1e-5), "{full:?} vs {res:?}");

    let o = strlab(&["train", "--data", p(&data), "--out", p(&short), "--resume", p(&last), "--correction"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = strlab(&["gradcheck", "--seed", "7"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().count(), 10);
}
