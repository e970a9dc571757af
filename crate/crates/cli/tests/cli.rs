use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bccnn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "bccnn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn corpus(dir: &Path, pairs: &str) {
    ok(&["gen-synthetic", "--kind", "dictionary", "--pairs", pairs, "--seed", "2", "--out-dir", dir.to_str().unwrap()]);
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let out = run(&["train-encoder", "--src", "/nonexistent/a.src", "--tgt", "/nonexistent/a.tgt", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a.src"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(run(&["train-encoder", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "grad-check"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "10");
    let (src, tgt) = (path(dir.path(), "corpus.src"), path(dir.path(), "corpus.tgt"));
    let out = run(&["train-encoder", "--src", &src, "--tgt", &tgt, "--out", "/tmp/x", "--dropout", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_snapshot_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = path(dir.path(), "garbage.snap");
    fs::write(&model, "not a snapshot").unwrap();
    let input = path(dir.path(), "in.txt");
    fs::write(&input, "w1 w2\n").unwrap();
    assert_eq!(run(&["embed", "--model", &model, "--input", &input]).status.code(), Some(1));
}

#[test]
fn print_config_shows_defaults_and_overrides() {
    let text = ok(&["train-encoder", "--src", "a", "--tgt", "b", "--print-config"]);
    assert!(text.lines().any(|l| l == "chunks = 4"), "{text}");
    assert!(text.lines().any(|l| l == "margin = 1"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "enc.conf");
    fs::write(&cfg, "# retrieval setup\nchunks = 2\nembed_dim = 16\n").unwrap();
    let text = ok(&["train-encoder", "--config", &cfg, "--src", "a", "--tgt", "b", "--chunks", "8", "--print-config"]);
    assert!(text.lines().any(|l| l == "chunks = 8"), "flag should override the file: {text}");
    assert!(text.lines().any(|l| l == "embed-dim = 16"), "{text}");
}

#[test]
fn gen_synthetic_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for kind in ["dictionary", "long", "disambiguation", "noisy"] {
        for dir in [a.path(), b.path()] {
            ok(&["gen-synthetic", "--kind", kind, "--pairs", "30", "--seed", "9", "--out-dir", dir.to_str().unwrap(), "--prefix", kind]);
        }
        for ext in ["src", "tgt", "align"] {
            let name = format!("{kind}.{ext}");
            let first = fs::read(a.path().join(&name)).unwrap();
            assert!(!first.is_empty());
            assert_eq!(first, fs::read(b.path().join(&name)).unwrap(), "{name}");
        }
    }
}

#[test]
fn score_lines_sum_to_totals() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), "25");
    let p = |n: &str| path(dir.path(), n);
    ok(&[
        "train-nnjm", "--src", &p("corpus.src"), "--tgt", &p("corpus.tgt"), "--align", &p("corpus.align"), "--out", &p("nnjm.snap"),
        "--embed-dim", "4", "--hidden", "8", "--epochs", "1", "--kappa", "3",
    ]);
    let args = ["score", "--src", &p("corpus.src"), "--tgt", &p("corpus.tgt"), "--align", &p("corpus.align"), "--nnjm", &p("nnjm.snap")];
    let words = ok(&args);
    let totals = ok(&[&args[..], &["--totals"]].concat());
    let mut sums = [0.0; 25];
    for line in words.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        sums[f[0].parse::<usize>().unwrap()] += f[3].parse::<f64>().unwrap();
    }
    let totals: Vec<f64> = totals.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 25);
    for (s, t) in sums.iter().zip(&totals) {
        assert!((s - t).abs() < 1e-9 * t.abs().max(1.0), "{s} vs {t}");
        assert!(*t < 0.0);
    }
}

#[test]
fn grad_check_passes() {
    let text = ok(&["grad-check", "--seed", "2"]);
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn decode_feeds_rescore() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| path(dir.path(), n);
    fs::write(p("in.txt"), "a b\nb\n").unwrap();
    fs::write(p("phrases"), "a ||| x ||| 0-0 ||| -1\na ||| y ||| 0-0 ||| -2\nb ||| z ||| 0-0 ||| -0.5\na b ||| w ||| 0-0 1-0 ||| -1.2\n").unwrap();
    fs::write(p("weights"), "phrase\t1\nword_penalty\t0\n").unwrap();
    let best = ok(&["decode", "--input", &p("in.txt"), "--phrase-table", &p("phrases"), "--weights", &p("weights")]);
    assert_eq!(best, "w\nz\n");
    let nbest = ok(&["decode", "--input", &p("in.txt"), "--phrase-table", &p("phrases"), "--weights", &p("weights"), "--nbest", "5"]);
    assert_eq!(nbest.lines().count(), 4);
    fs::write(p("nbest"), &nbest).unwrap();
    // Reward length instead: the two-word outputs now win.
    fs::write(p("weights2"), "nnjm\t0\nphrase\t1\nword_penalty\t1\nunk\t0\nlm\t0\n").unwrap();
    let rescored = ok(&["rescore", "--nbest", &p("nbest"), "--src", &p("in.txt"), "--weights", &p("weights2")]);
    let first = rescored.lines().next().unwrap();
    assert!(first.starts_with("0 ||| x z |||"), "{rescored}");
}
